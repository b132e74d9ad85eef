//! Patch featurizers and the transform-ensemble upsampler.
//!
//! A [`Featurizer`] turns an image into a coarse grid of patch features plus a
//! [CLS]-attention grid. [`upsample`] queries it once per transform of a
//! [`TransformSet`](crate::geometry::TransformSet), resizes each grid back to
//! the image with nearest-neighbour sampling, undoes the transform and
//! averages, producing dense per-pixel [`FeatureMap`]s and [`AttentionMap`]s.

mod analysis;
mod backends;
mod upsample;

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fmap::{self, Dtype, FmapError};
use crate::geometry::{GeometryError, TransformSetDoc};
use crate::raster::{Image, Raster};

pub use analysis::{keypoint_query, pca_rgb, KeypointMatch};
pub use backends::{ExternalRuntime, PatchMean, Precomputed, SyntheticKind};
pub use upsample::{nearest_patch_index, upsample, UpsampleMode, UpsampleOptions};

/// How attention grids are defined; recorded in provenance.
pub const ATTENTION_SOURCE: &str = "final-block cls->patch attention, mean over heads, sum-normalized";

#[derive(Debug, Error)]
pub enum FeaturizeError {
    #[error("image {height}x{width} violates backend constraints: {reason}")]
    InputConstraint {
        height: usize,
        width: usize,
        reason: String,
    },
    #[error("model output shape {actual:?} does not match descriptor shape {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },
    #[error("failed to load model: {0}")]
    ModelLoad(String),
    #[error("model runtime failed: {0}")]
    Runtime(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("empty transform set")]
    EmptyTransformSet,
    #[error("feature map has {0} channels, need at least {1}")]
    TooFewChannels(usize, usize),
    #[error("degenerate query feature (zero norm)")]
    DegenerateQuery,
    #[error("feature dimensions differ: query {0}, target {1}")]
    DimensionMismatch(usize, usize),
    #[error("query point ({x}, {y}) outside {width}x{height} map")]
    PointOutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Fmap(#[from] FmapError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Static description of a patch featurizer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub patch_size: u32,
    pub stride: u32,
    pub hidden_dim: u32,
    /// Image height and width must be multiples of this.
    pub input_multiple: u32,
}

impl BackendDescriptor {
    /// Patch-grid size for an input image, `⌊(H−P)/S⌋+1 × ⌊(W−P)/S⌋+1`.
    pub fn grid_dims(&self, height: usize, width: usize) -> Option<(usize, usize)> {
        let (p, s) = (self.patch_size as usize, self.stride as usize);
        if height < p || width < p || s == 0 {
            return None;
        }
        Some(((height - p) / s + 1, (width - p) / s + 1))
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<(), FeaturizeError> {
        let fail = |reason: String| FeaturizeError::InputConstraint { height, width, reason };
        let p = self.patch_size as usize;
        if height < p || width < p {
            return Err(fail(format!("smaller than patch size {p}")));
        }
        let m = self.input_multiple.max(1) as usize;
        if height % m != 0 || width % m != 0 {
            return Err(fail(format!("dimensions must be multiples of {m}")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("descriptor serializes")
    }
}

/// Patch-level output of a featurizer for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatures {
    /// `gh × gw × D`
    pub features: Raster<f32>,
    /// `gh × gw × 1`, sums to 1.
    pub attention: Raster<f32>,
}

/// A patch featurizer: a frozen model or a synthetic stand-in.
pub trait Featurizer: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Raw backend call; callers should go through [`featurize_patches`],
    /// which validates the input and output shapes.
    fn featurize(&self, image: &Image) -> Result<PatchFeatures, FeaturizeError>;

    /// Batched evaluation. The default evaluates images one by one in parallel
    /// unless the backend is single-flight.
    fn featurize_batch(&self, images: &[Image]) -> Result<Vec<PatchFeatures>, FeaturizeError> {
        if self.single_flight() {
            images.iter().map(|i| featurize_patches(self, i)).collect()
        } else {
            use rayon::prelude::*;
            images.par_iter().map(|i| featurize_patches(self, i)).collect()
        }
    }

    /// Backends that cannot serve concurrent calls return `true`; the
    /// upsampler then serializes calls.
    fn single_flight(&self) -> bool {
        false
    }
}

/// Featurizes one image, checking input constraints and output shapes.
pub fn featurize_patches<F: Featurizer + ?Sized>(backend: &F, image: &Image) -> Result<PatchFeatures, FeaturizeError> {
    let desc = backend.descriptor();
    desc.check_input(image.height(), image.width())?;
    let out = backend.featurize(image)?;
    let (gh, gw) = desc
        .grid_dims(image.height(), image.width())
        .expect("input constraints checked");
    let expected = (gh, gw, desc.hidden_dim as usize);
    if out.features.shape() != expected {
        return Err(FeaturizeError::ShapeMismatch {
            expected,
            actual: out.features.shape(),
        });
    }
    if out.attention.shape() != (gh, gw, 1) {
        return Err(FeaturizeError::ShapeMismatch {
            expected: (gh, gw, 1),
            actual: out.attention.shape(),
        });
    }
    if !out.features.is_finite() {
        return Err(FeaturizeError::NonFinite("patch features"));
    }
    if !out.attention.is_finite() {
        return Err(FeaturizeError::NonFinite("patch attention"));
    }
    Ok(out)
}

/// Where a feature or attention map came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend: BackendDescriptor,
    pub transform_set: TransformSetDoc,
    pub image_id: Option<String>,
    pub created_unix_ms: u64,
    pub attention_source: String,
    #[serde(default)]
    pub l2_normalized: bool,
}

impl Provenance {
    pub fn new(backend: BackendDescriptor, transform_set: TransformSetDoc, image_id: Option<String>, l2_normalized: bool) -> Self {
        let created_unix_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Self {
            backend,
            transform_set,
            image_id,
            created_unix_ms,
            attention_source: ATTENTION_SOURCE.to_string(),
            l2_normalized,
        }
    }
}

/// Dense `H × W × D` features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Raster<f32>,
    pub provenance: Option<Provenance>,
}

/// Dense `H × W` attention, non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub data: Raster<f32>,
    pub provenance: Option<Provenance>,
}

impl FeatureMap {
    pub fn new(data: Raster<f32>) -> Self {
        Self { data, provenance: None }
    }

    pub fn height(&self) -> usize {
        self.data.height()
    }

    pub fn width(&self) -> usize {
        self.data.width()
    }

    pub fn dim(&self) -> usize {
        self.data.channels()
    }

    pub fn to_fmap_bytes(&self, dtype: Dtype) -> Vec<u8> {
        let prov = self.provenance.as_ref().map(|p| serde_json::to_value(p).expect("provenance serializes"));
        fmap::encode(&self.data, dtype, prov.as_ref())
    }

    pub fn from_fmap_bytes(bytes: &[u8]) -> Result<Self, FeaturizeError> {
        let f = fmap::decode(bytes)?;
        if !f.raster.is_finite() {
            return Err(FeaturizeError::NonFinite("feature map file"));
        }
        Ok(Self {
            data: f.raster,
            provenance: f.provenance.and_then(|v| serde_json::from_value(v).ok()),
        })
    }
}

impl AttentionMap {
    pub fn new(data: Raster<f32>) -> Self {
        assert_eq!(data.channels(), 1, "attention maps have one channel");
        Self { data, provenance: None }
    }

    pub fn height(&self) -> usize {
        self.data.height()
    }

    pub fn width(&self) -> usize {
        self.data.width()
    }

    pub fn values(&self) -> &[f32] {
        self.data.data()
    }

    pub fn to_fmap_bytes(&self, dtype: Dtype) -> Vec<u8> {
        let prov = self.provenance.as_ref().map(|p| serde_json::to_value(p).expect("provenance serializes"));
        fmap::encode(&self.data, dtype, prov.as_ref())
    }

    pub fn from_fmap_bytes(bytes: &[u8]) -> Result<Self, FeaturizeError> {
        let f = fmap::decode(bytes)?;
        if f.raster.channels() != 1 {
            return Err(FeaturizeError::ShapeMismatch {
                expected: (f.raster.height(), f.raster.width(), 1),
                actual: f.raster.shape(),
            });
        }
        if !f.raster.is_finite() || f.raster.data().iter().any(|&v| v < 0.0) {
            return Err(FeaturizeError::NonFinite("attention map file"));
        }
        Ok(Self {
            data: f.raster,
            provenance: f.provenance.and_then(|v| serde_json::from_value(v).ok()),
        })
    }
}
