//! Datasets on disk, image conforming, the feature cache and session state.

mod cache;
mod conform;
mod dataset;
mod labels;
mod session;

use std::path::PathBuf;

use thiserror::Error;

pub use cache::{CacheKey, FeatureCache};
pub use conform::{conform, resize_bilinear, resize_nearest, ConformMap, Conformed};
pub use dataset::{ingest, parse_voc_boxes, Dataset, DatasetEntry, Layout, Split};
pub use labels::{rasterize_stroke, BrushStroke, RunLengthLabels};
pub use session::{Session, SessionConfig, SessionStore};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("duplicate image id {0:?}")]
    DuplicateId(String),
    #[error("invalid name {0:?}: use letters, digits, '_', '-' or '.'")]
    InvalidName(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid: {0}")]
    Invalid(String),
    #[error(transparent)]
    Fmap(#[from] crate::fmap::FmapError),
    #[error(transparent)]
    Featurize(#[from] crate::featurize::FeaturizeError),
    #[error(transparent)]
    PixelClf(#[from] crate::pixelclf::PixelClfError),
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> StoreError {
    let path = path.into();
    move |source| StoreError::Io { path, source }
}

/// Names usable as file stems: non-empty, no leading dot, `[A-Za-z0-9_.-]`.
pub fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name.len() <= 200
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}
