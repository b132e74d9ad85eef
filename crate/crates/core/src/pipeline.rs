//! End-to-end workflows built from the other modules.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cas::{segment, CasConfig, CasError, CasMap};
use crate::detect::{boxes, BoxOptions, DetectionResult};
use crate::featurize::{upsample, AttentionMap, FeatureMap, FeaturizeError, Featurizer, UpsampleOptions};
use crate::geometry::TransformSet;
use crate::pixelclf::{classical_features, hybrid_stack, ClassicalRecipe, PixelClfError, PixelFeatures};
use crate::Image;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Featurize(#[from] FeaturizeError),
    #[error(transparent)]
    Cas(#[from] CasError),
    #[error(transparent)]
    PixelClf(#[from] PixelClfError),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnsupConfig {
    pub cas: CasConfig,
    pub boxes: BoxOptions,
}

#[derive(Clone, Debug)]
pub struct UnsupResult {
    pub features: FeatureMap,
    pub attention: AttentionMap,
    pub cas: CasMap,
    pub detection: DetectionResult,
}

/// Upsample, segment, then extract boxes and the saliency mask.
pub fn unsupervised<F: Featurizer + ?Sized>(
    backend: &F,
    image: &Image,
    set: &TransformSet,
    opts: &UpsampleOptions,
    cfg: &UnsupConfig,
) -> Result<UnsupResult, PipelineError> {
    let (features, attention) = upsample(backend, image, set, opts)?;
    let cas = segment(&features, &attention, &cfg.cas)?;
    let detection = boxes(&cas, &cfg.boxes);
    Ok(UnsupResult {
        features,
        attention,
        cas,
        detection,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Deep,
    Classical,
    Hybrid,
}

impl std::str::FromStr for FeatureSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "deep" => Ok(Self::Deep),
            "classical" => Ok(Self::Classical),
            "hybrid" => Ok(Self::Hybrid),
            _ => Err(format!("unknown feature source {s:?} (deep, classical, hybrid)")),
        }
    }
}

/// Per-pixel features for weak supervision. `deep` must be given for the
/// deep and hybrid sources; it is computed by the caller so it can be cached.
pub fn pixel_features(
    source: FeatureSource,
    image: &Image,
    deep: Option<&FeatureMap>,
    classical: &ClassicalRecipe,
) -> Result<PixelFeatures, PixelClfError> {
    let need_deep = || deep.ok_or_else(|| PixelClfError::InvalidParameter("deep features required".into()));
    Ok(match source {
        FeatureSource::Deep => PixelFeatures::deep(need_deep()?),
        FeatureSource::Classical => PixelFeatures::classical(classical_features(image, classical)?),
        FeatureSource::Hybrid => hybrid_stack(need_deep()?, &classical_features(image, classical)?)?,
    })
}
