use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{BackendDescriptor, FeaturizeError, Featurizer, PatchFeatures};
use crate::fmap::{self, Dtype};
use crate::raster::{Image, Raster};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// Per-channel patch means (`D = 3`), uniform attention.
    PatchMean,
    /// Patch means plus a positional channel (`D = 4`); attention is a
    /// Gaussian of the distance to the image centre.
    PatchMeanCenterAttention,
}

impl SyntheticKind {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::PatchMean => "patch-mean",
            SyntheticKind::PatchMeanCenterAttention => "patch-mean+center-attention",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "patch-mean" => Some(SyntheticKind::PatchMean),
            "patch-mean+center-attention" => Some(SyntheticKind::PatchMeanCenterAttention),
            _ => None,
        }
    }
}

/// Deterministic stand-in for a ViT: patch features are per-channel pixel
/// means over each `P × P` window placed every `S` pixels.
#[derive(Clone, Debug)]
pub struct PatchMean {
    descriptor: BackendDescriptor,
    kind: SyntheticKind,
    /// Gaussian width as a fraction of `min(H, W)`.
    sigma_frac: f64,
}

impl PatchMean {
    pub fn new(kind: SyntheticKind, patch_size: u32, stride: u32) -> Self {
        assert!(patch_size > 0 && stride > 0, "patch size and stride must be positive");
        let hidden_dim = match kind {
            SyntheticKind::PatchMean => 3,
            SyntheticKind::PatchMeanCenterAttention => 4,
        };
        Self {
            descriptor: BackendDescriptor {
                name: format!("synthetic:{}", kind.name()),
                patch_size,
                stride,
                hidden_dim,
                input_multiple: stride,
            },
            kind,
            sigma_frac: 0.25,
        }
    }

    pub fn patch_mean(patch_size: u32, stride: u32) -> Self {
        Self::new(SyntheticKind::PatchMean, patch_size, stride)
    }

    pub fn center_attention(patch_size: u32, stride: u32) -> Self {
        Self::new(SyntheticKind::PatchMeanCenterAttention, patch_size, stride)
    }

    pub fn with_sigma_frac(mut self, sigma_frac: f64) -> Self {
        self.sigma_frac = sigma_frac;
        self
    }

    pub fn kind(&self) -> SyntheticKind {
        self.kind
    }
}

impl Featurizer for PatchMean {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn featurize(&self, image: &Image) -> Result<PatchFeatures, FeaturizeError> {
        let (h, w, c) = image.shape();
        let (gh, gw) = self.descriptor.grid_dims(h, w).ok_or_else(|| FeaturizeError::InputConstraint {
            height: h,
            width: w,
            reason: "smaller than patch".into(),
        })?;
        let p = self.descriptor.patch_size as usize;
        let s = self.descriptor.stride as usize;
        let d = self.descriptor.hidden_dim as usize;
        let norm = (p * p) as f64;

        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let sigma = self.sigma_frac * h.min(w) as f64;
        let half = (p as f64 - 1.0) / 2.0;
        let gaussian = |i: usize, j: usize| {
            let dy = (i * s) as f64 + half - cy;
            let dx = (j * s) as f64 + half - cx;
            (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp()
        };

        let mut features = Vec::with_capacity(gh * gw * d);
        let mut attention = Vec::with_capacity(gh * gw);
        for i in 0..gh {
            for j in 0..gw {
                let mut sums = [0.0f64; 3];
                for y in i * s..i * s + p {
                    for x in j * s..j * s + p {
                        let px = image.pixel(y, x);
                        for (k, sum) in sums.iter_mut().enumerate() {
                            *sum += px[k % c] as f64;
                        }
                    }
                }
                features.extend(sums.iter().map(|v| (v / norm) as f32));
                match self.kind {
                    SyntheticKind::PatchMean => attention.push(1.0),
                    SyntheticKind::PatchMeanCenterAttention => {
                        let g = gaussian(i, j);
                        features.push(g as f32);
                        attention.push(g);
                    }
                }
            }
        }
        let total: f64 = attention.iter().sum();
        let attention = attention.into_iter().map(|a| (a / total) as f32).collect();
        Ok(PatchFeatures {
            features: Raster::new(gh, gw, d, features).expect("grid dims"),
            attention: Raster::new(gh, gw, 1, attention).expect("grid dims"),
        })
    }
}

/// Serves archived patch tensors for a single image.
#[derive(Clone, Debug)]
pub struct Precomputed {
    descriptor: BackendDescriptor,
    features: Raster<f32>,
    attention: Raster<f32>,
}

impl Precomputed {
    /// `attention` defaults to uniform when absent.
    pub fn new(descriptor: BackendDescriptor, features: Raster<f32>, attention: Option<Raster<f32>>) -> Self {
        let attention = attention.unwrap_or_else(|| {
            let n = features.pixel_count() as f32;
            Raster::filled(features.height(), features.width(), 1, 1.0 / n)
        });
        Self {
            descriptor,
            features,
            attention,
        }
    }

    /// Opens an FMAP archive. Without an explicit descriptor the one recorded
    /// in the file's provenance block is used.
    pub fn open(features: &Path, attention: Option<&Path>, descriptor: Option<BackendDescriptor>) -> Result<Self, FeaturizeError> {
        let f = fmap::read(features)?;
        let descriptor = match descriptor {
            Some(d) => d,
            None => f
                .provenance
                .as_ref()
                .and_then(|p| p.get("backend").cloned().or_else(|| Some(p.clone())))
                .and_then(|v| serde_json::from_value::<BackendDescriptor>(v).ok())
                .ok_or_else(|| FeaturizeError::ModelLoad(format!("{} carries no backend descriptor", features.display())))?,
        };
        let attention = attention.map(fmap::read).transpose()?.map(|a| a.raster);
        Ok(Self::new(descriptor, f.raster, attention))
    }
}

impl Featurizer for Precomputed {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn featurize(&self, _image: &Image) -> Result<PatchFeatures, FeaturizeError> {
        Ok(PatchFeatures {
            features: self.features.clone(),
            attention: self.attention.clone(),
        })
    }
}

/// Runs a frozen single-file network through an external inference program.
///
/// The program is invoked once per image as
/// `program [args..] --model M --input-name N --patch-size P --stride S
/// --input in.fmap --features-out f.fmap --attention-out a.fmap`, where
/// `in.fmap` holds the `H × W × C` image as f32 pixel values. It must write a
/// `gh × gw × D` feature FMAP and a `gh × gw × 1` attention FMAP and exit 0.
#[derive(Clone, Debug)]
pub struct ExternalRuntime {
    descriptor: BackendDescriptor,
    program: PathBuf,
    args: Vec<String>,
    model: PathBuf,
    input_name: String,
    /// Declared `[N, C, H, W]` input shape; zero entries are dynamic.
    input_shape: Option<Vec<usize>>,
    single_flight: bool,
}

impl ExternalRuntime {
    pub fn new(
        descriptor: BackendDescriptor,
        program: impl Into<PathBuf>,
        model: impl Into<PathBuf>,
        input_name: impl Into<String>,
    ) -> Result<Self, FeaturizeError> {
        let model = model.into();
        if !model.is_file() {
            return Err(FeaturizeError::ModelLoad(format!("model file {} not found", model.display())));
        }
        Ok(Self {
            descriptor,
            program: program.into(),
            args: Vec::new(),
            model,
            input_name: input_name.into(),
            input_shape: None,
            single_flight: true,
        })
    }

    pub fn with_args(mut self, args: Vec<String>) -> Self {
        self.args = args;
        self
    }

    pub fn with_input_shape(mut self, shape: Vec<usize>) -> Self {
        self.input_shape = Some(shape);
        self
    }

    pub fn with_single_flight(mut self, single_flight: bool) -> Self {
        self.single_flight = single_flight;
        self
    }

    fn check_declared_shape(&self, image: &Image) -> Result<(), FeaturizeError> {
        let Some(shape) = &self.input_shape else {
            return Ok(());
        };
        let (h, w, c) = image.shape();
        let actual = [1, c, h, w];
        let ok = shape.len() == 4 && shape.iter().zip(actual).all(|(&want, got)| want == 0 || want == got);
        if ok {
            Ok(())
        } else {
            Err(FeaturizeError::InputConstraint {
                height: h,
                width: w,
                reason: format!("input `{}` declared as {:?}, image is {:?}", self.input_name, shape, actual),
            })
        }
    }
}

static SCRATCH_COUNTER: AtomicU64 = AtomicU64::new(0);

impl Featurizer for ExternalRuntime {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn single_flight(&self) -> bool {
        self.single_flight
    }

    fn featurize(&self, image: &Image) -> Result<PatchFeatures, FeaturizeError> {
        self.check_declared_shape(image)?;
        let scratch = std::env::temp_dir().join(format!(
            "featpipe-rt-{}-{}",
            std::process::id(),
            SCRATCH_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::create_dir_all(&scratch)?;
        let result = (|| {
            let input = scratch.join("input.fmap");
            let feats = scratch.join("features.fmap");
            let attn = scratch.join("attention.fmap");
            fmap::write(&input, &image.map(|v| v as f32), Dtype::F32, None)?;
            let output = Command::new(&self.program)
                .args(&self.args)
                .arg("--model")
                .arg(&self.model)
                .arg("--input-name")
                .arg(&self.input_name)
                .arg("--patch-size")
                .arg(self.descriptor.patch_size.to_string())
                .arg("--stride")
                .arg(self.descriptor.stride.to_string())
                .arg("--input")
                .arg(&input)
                .arg("--features-out")
                .arg(&feats)
                .arg("--attention-out")
                .arg(&attn)
                .output()
                .map_err(|e| FeaturizeError::ModelLoad(format!("cannot start {}: {e}", self.program.display())))?;
            if !output.status.success() {
                return Err(FeaturizeError::Runtime(format!(
                    "{} exited with {}: {}",
                    self.program.display(),
                    output.status,
                    String::from_utf8_lossy(&output.stderr).trim()
                )));
            }
            Ok(PatchFeatures {
                features: fmap::read(&feats)?.raster,
                attention: fmap::read(&attn)?.raster,
            })
        })();
        let _ = std::fs::remove_dir_all(&scratch);
        result
    }
}
