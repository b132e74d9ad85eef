//! FMAP: the on-disk tensor format for feature and attention rasters.
//!
//! ```text
//! "FMAP" | version u32 = 1 | h u32 | w u32 | d u32 | dtype u8 (0 = f32, 1 = f16)
//!        | 3 reserved bytes | row-major little-endian payload
//!        | optional: u64 length | JSON provenance
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use half::f16;
use thiserror::Error;

use crate::raster::Raster;

pub const MAGIC: &[u8; 4] = b"FMAP";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum FmapError {
    #[error("not an FMAP file (bad magic)")]
    BadMagic,
    #[error("unsupported FMAP version {0}")]
    Version(u32),
    #[error("unknown dtype code {0}")]
    Dtype(u8),
    #[error("truncated FMAP: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("invalid FMAP dimensions {0}x{1}x{2}")]
    Dimensions(u32, u32, u32),
    #[error("provenance block is not valid JSON: {0}")]
    Provenance(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Dtype {
    #[default]
    F32,
    F16,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F16 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }
}

/// A decoded FMAP file.
#[derive(Clone, Debug, PartialEq)]
pub struct Fmap {
    pub raster: Raster<f32>,
    pub dtype: Dtype,
    pub provenance: Option<serde_json::Value>,
}

pub fn encode(raster: &Raster<f32>, dtype: Dtype, provenance: Option<&serde_json::Value>) -> Vec<u8> {
    let (h, w, d) = raster.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + raster.data().len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.push(dtype.code());
    out.extend_from_slice(&[0u8; 3]);
    match dtype {
        Dtype::F32 => {
            for v in raster.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Dtype::F16 => {
            for v in raster.data() {
                out.extend_from_slice(&f16::from_f32(*v).to_le_bytes());
            }
        }
    }
    if let Some(p) = provenance {
        let json = serde_json::to_vec(p).expect("JSON value serializes");
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn decode(bytes: &[u8]) -> Result<Fmap, FmapError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(FmapError::BadMagic);
        }
        return Err(FmapError::Truncated {
            need: HEADER_LEN,
            have: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(FmapError::BadMagic);
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(FmapError::Version(version));
    }
    let (h, w, d) = (u32_at(bytes, 8), u32_at(bytes, 12), u32_at(bytes, 16));
    let dtype = match bytes[20] {
        0 => Dtype::F32,
        1 => Dtype::F16,
        other => return Err(FmapError::Dtype(other)),
    };
    if h == 0 || w == 0 || d == 0 {
        return Err(FmapError::Dimensions(h, w, d));
    }
    let count = h as usize * w as usize * d as usize;
    let payload_end = HEADER_LEN + count * dtype.width();
    if bytes.len() < payload_end {
        return Err(FmapError::Truncated {
            need: payload_end,
            have: bytes.len(),
        });
    }
    let payload = &bytes[HEADER_LEN..payload_end];
    let data: Vec<f32> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect(),
        Dtype::F16 => payload
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes(c.try_into().expect("2-byte chunk")).to_f32())
            .collect(),
    };
    let raster = Raster::new(h as usize, w as usize, d as usize, data).expect("dimensions checked");

    let rest = &bytes[payload_end..];
    let provenance = if rest.is_empty() {
        None
    } else {
        if rest.len() < 8 {
            return Err(FmapError::Truncated {
                need: payload_end + 8,
                have: bytes.len(),
            });
        }
        let len = u64::from_le_bytes(rest[..8].try_into().expect("8-byte slice")) as usize;
        if rest.len() < 8 + len {
            return Err(FmapError::Truncated {
                need: payload_end + 8 + len,
                have: bytes.len(),
            });
        }
        Some(serde_json::from_slice(&rest[8..8 + len])?)
    };
    Ok(Fmap {
        raster,
        dtype,
        provenance,
    })
}

pub fn read(path: &Path) -> Result<Fmap, FmapError> {
    decode(&fs::read(path)?)
}

/// Writes `bytes` to `path` via a temporary sibling and a rename, so readers
/// never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.{}.tmp", std::process::id(), unique_suffix()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

fn unique_suffix() -> u64 {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    COUNTER.fetch_add(1, Ordering::Relaxed)
}

pub fn write(path: &Path, raster: &Raster<f32>, dtype: Dtype, provenance: Option<&serde_json::Value>) -> std::io::Result<()> {
    write_atomic(path, &encode(raster, dtype, provenance))
}
