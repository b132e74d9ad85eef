//! Backend spec strings and transform-set names.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use anyhow::Context;
use featpipe_core::featurize::{BackendDescriptor, ExternalRuntime, Featurizer, PatchMean, Precomputed, SyntheticKind};
use featpipe_core::fmap;
use featpipe_core::geometry::{Neighborhood, TransformSet};

use crate::error::invalid;

/// `synthetic:<kind>`, `precomputed:<features.fmap>[,<attention.fmap>]` or
/// `external:<program>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BackendSpec {
    Synthetic(SyntheticKind),
    Precomputed { features: PathBuf, attention: Option<PathBuf> },
    External { program: PathBuf },
}

impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (scheme, rest) = s
            .split_once(':')
            .ok_or_else(|| format!("backend {s:?} should look like synthetic:patch-mean, precomputed:<file> or external:<program>"))?;
        match scheme {
            "synthetic" => SyntheticKind::parse(rest)
                .map(BackendSpec::Synthetic)
                .ok_or_else(|| format!("unknown synthetic backend {rest:?} (patch-mean, patch-mean+center-attention)")),
            "precomputed" => {
                let mut parts = rest.splitn(2, ',');
                let features = parts.next().filter(|p| !p.is_empty()).ok_or("precomputed: needs a features file")?;
                Ok(BackendSpec::Precomputed {
                    features: features.into(),
                    attention: parts.next().map(PathBuf::from),
                })
            }
            "external" if !rest.is_empty() => Ok(BackendSpec::External { program: rest.into() }),
            "external" => Err("external: needs a program path".into()),
            _ => Err(format!("unknown backend scheme {scheme:?}")),
        }
    }
}

/// Everything besides the backend string needed to construct a backend.
#[derive(Clone, Debug)]
pub struct BackendParams {
    pub patch_size: u32,
    pub stride: u32,
    /// Required for external backends.
    pub hidden_dim: Option<u32>,
    /// Defaults to the stride.
    pub input_multiple: Option<u32>,
    pub model: Option<PathBuf>,
    pub input_name: String,
    pub args: Vec<String>,
}

impl Default for BackendParams {
    fn default() -> Self {
        Self {
            patch_size: 8,
            stride: 4,
            hidden_dim: None,
            input_multiple: None,
            model: None,
            input_name: "pixel_values".into(),
            args: Vec::new(),
        }
    }
}

impl BackendParams {
    pub fn check(&self) -> anyhow::Result<()> {
        if self.patch_size == 0 {
            return Err(invalid("patch_size: must be positive"));
        }
        if self.stride == 0 || self.stride > self.patch_size {
            return Err(invalid(format!("stride: must be in 1..={}", self.patch_size)));
        }
        if self.input_multiple == Some(0) {
            return Err(invalid("input_multiple: must be positive"));
        }
        Ok(())
    }
}

pub fn build(spec: &BackendSpec, params: &BackendParams) -> anyhow::Result<Arc<dyn Featurizer>> {
    params.check()?;
    Ok(match spec {
        BackendSpec::Synthetic(kind) => Arc::new(PatchMean::new(*kind, params.patch_size, params.stride)),
        BackendSpec::Precomputed { features, attention } => {
            let f = fmap::read(features).with_context(|| format!("reading {}", features.display()))?;
            let recorded = f
                .provenance
                .as_ref()
                .and_then(|p| p.get("backend").cloned())
                .and_then(|v| serde_json::from_value::<BackendDescriptor>(v).ok());
            let descriptor = recorded.unwrap_or_else(|| BackendDescriptor {
                name: "precomputed".into(),
                patch_size: params.patch_size,
                stride: params.stride,
                hidden_dim: f.raster.channels() as u32,
                input_multiple: params.input_multiple.unwrap_or(params.stride),
            });
            let attention = match attention {
                Some(p) => Some(fmap::read(p).with_context(|| format!("reading {}", p.display()))?.raster),
                None => None,
            };
            Arc::new(Precomputed::new(descriptor, f.raster, attention))
        }
        BackendSpec::External { program } => {
            let hidden_dim = params
                .hidden_dim
                .ok_or_else(|| invalid("hidden_dim: required for external backends"))?;
            let model = params
                .model
                .as_ref()
                .ok_or_else(|| invalid("model_path: required for external backends"))?;
            if !model.is_file() {
                return Err(invalid(format!("model_path: {} is not a file", model.display())));
            }
            let descriptor = BackendDescriptor {
                name: format!("external:{}", model.file_name().and_then(|n| n.to_str()).unwrap_or("model")),
                patch_size: params.patch_size,
                stride: params.stride,
                hidden_dim,
                input_multiple: params.input_multiple.unwrap_or(params.stride),
            };
            Arc::new(ExternalRuntime::new(descriptor, program, model, params.input_name.clone())?.with_args(params.args.clone()))
        }
    })
}

/// `identity`, `standard` (shifts 1..S/2 in 8 directions, with flips),
/// `shifts` (same without flips), `flips`, or a path to a JSON set document.
pub fn transform_set(name: &str, stride: u32) -> anyhow::Result<TransformSet> {
    let half: Vec<u32> = (1..=(stride / 2).max(1)).collect();
    let set = match name {
        "identity" => TransformSet::identity(stride),
        "standard" => TransformSet::default_for_stride(stride),
        "shifts" => TransformSet::standard(stride, Neighborhood::Moore, &half, false),
        "flips" => TransformSet::standard(stride, Neighborhood::Moore, &[], true),
        path => {
            let text = std::fs::read_to_string(Path::new(path))
                .map_err(|e| invalid(format!("transform set {path:?}: not a known name and not readable ({e})")))?;
            let set = TransformSet::from_json(&text).map_err(|e| invalid(format!("transform set {path}: {e}")))?;
            if set.stride() != stride {
                return Err(invalid(format!(
                    "transform set {path} is for stride {}, backend stride is {stride}",
                    set.stride()
                )));
            }
            set
        }
    };
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specs_parse() {
        assert_eq!(
            "synthetic:patch-mean".parse::<BackendSpec>().unwrap(),
            BackendSpec::Synthetic(SyntheticKind::PatchMean)
        );
        assert_eq!(
            "precomputed:a.fmap,b.fmap".parse::<BackendSpec>().unwrap(),
            BackendSpec::Precomputed {
                features: "a.fmap".into(),
                attention: Some("b.fmap".into())
            }
        );
        assert!("synthetic:nope".parse::<BackendSpec>().is_err());
        assert!("onnx".parse::<BackendSpec>().is_err());
        assert!("external:".parse::<BackendSpec>().is_err());
    }

    #[test]
    fn named_sets() {
        assert_eq!(transform_set("identity", 4).unwrap().len(), 1);
        assert_eq!(transform_set("standard", 4).unwrap().non_identity_len(), 64);
        assert_eq!(transform_set("shifts", 4).unwrap().non_identity_len(), 16);
        assert_eq!(transform_set("flips", 4).unwrap().non_identity_len(), 3);
        assert!(transform_set("/nonexistent.json", 4).is_err());
    }
}
