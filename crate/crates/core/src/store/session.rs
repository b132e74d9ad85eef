use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, valid_name, FeatureCache, StoreError};
use crate::featurize::BackendDescriptor;
use crate::fmap::{write_atomic, Dtype};
use crate::geometry::TransformSetDoc;
use crate::pipeline::FeatureSource;
use crate::pixelclf::{decode_classifier, encode_classifier, ClassicalRecipe, LabelMask, PixelClassifier, Prediction, TrainConfig};
use crate::Image;

/// Settings frozen into `config.json` when a session is created.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Backend spec as given by the user, e.g. `synthetic:patch-mean`.
    pub backend: String,
    pub descriptor: BackendDescriptor,
    pub transform_set: TransformSetDoc,
    pub source: FeatureSource,
    pub classical: ClassicalRecipe,
    pub train: TrainConfig,
    /// Working resolution images are conformed to, if any.
    #[serde(default)]
    pub target_size: Option<(usize, usize)>,
}

/// Directory of sessions.
#[derive(Clone, Debug)]
pub struct SessionStore {
    root: PathBuf,
}

impl SessionStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn create(&self, config: SessionConfig) -> Result<Session, StoreError> {
        let id = loop {
            let id = format!("{:016x}", rand::random::<u64>());
            if !self.root.join(&id).exists() {
                break id;
            }
        };
        let dir = self.root.join(&id);
        for sub in ["images", "features", "labels", "classifiers", "predictions"] {
            fs::create_dir_all(dir.join(sub)).map_err(io_err(dir.join(sub)))?;
        }
        let cfg_path = dir.join("config.json");
        let json = serde_json::to_vec_pretty(&config).expect("config serializes");
        write_atomic(&cfg_path, &json).map_err(io_err(&cfg_path))?;
        Ok(Session::at(id, dir, config))
    }

    pub fn open(&self, id: &str) -> Result<Session, StoreError> {
        if !valid_name(id) {
            return Err(StoreError::NotFound(format!("session {id}")));
        }
        let dir = self.root.join(id);
        let cfg_path = dir.join("config.json");
        let text = match fs::read(&cfg_path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound(format!("session {id}")))
            }
            Err(e) => return Err(io_err(&cfg_path)(e)),
        };
        let config = serde_json::from_slice(&text).map_err(|e| StoreError::Corrupt {
            path: cfg_path,
            reason: e.to_string(),
        })?;
        Ok(Session::at(id.to_string(), dir, config))
    }

    pub fn list(&self) -> Result<Vec<String>, StoreError> {
        if !self.root.is_dir() {
            return Ok(vec![]);
        }
        let mut ids: Vec<String> = fs::read_dir(&self.root)
            .map_err(io_err(&self.root))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("config.json").is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        Ok(ids)
    }
}

/// One labeling session on disk:
/// `config.json`, `images/<image>.png`, `features/<hash>.fmap`,
/// `labels/<image>.png`, `classifiers/<n>.clf`, `predictions/<image>.png`.
#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub dir: PathBuf,
    pub config: SessionConfig,
    cache: FeatureCache,
}

fn list_stems(dir: &Path, suffix: &str) -> Result<Vec<String>, StoreError> {
    if !dir.is_dir() {
        return Ok(vec![]);
    }
    let mut v: Vec<String> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| !n.starts_with('.'))
        .filter_map(|n| n.strip_suffix(suffix).map(str::to_string))
        .collect();
    v.sort();
    Ok(v)
}

impl Session {
    fn at(id: String, dir: PathBuf, config: SessionConfig) -> Self {
        let cache = FeatureCache::new(dir.join("features"));
        Self { id, dir, config, cache }
    }

    pub fn cache(&self) -> &FeatureCache {
        &self.cache
    }

    fn image_path(&self, name: &str) -> PathBuf {
        self.dir.join("images").join(format!("{name}.png"))
    }

    fn check_name(name: &str) -> Result<(), StoreError> {
        if valid_name(name) {
            Ok(())
        } else {
            Err(StoreError::InvalidName(name.to_string()))
        }
    }

    fn require_image(&self, name: &str) -> Result<(), StoreError> {
        Self::check_name(name)?;
        if self.image_path(name).is_file() {
            Ok(())
        } else {
            Err(StoreError::NotFound(format!("image {name}")))
        }
    }

    /// Decodes `bytes` (PNG or JPEG) and stores the image as PNG.
    pub fn add_image(&self, name: &str, bytes: &[u8]) -> Result<Image, StoreError> {
        Self::check_name(name)?;
        let decoded = image::load_from_memory(bytes).map_err(|e| StoreError::Invalid(format!("image {name}: {e}")))?;
        let img = Image::from_dynamic(&decoded);
        let mut png = Vec::new();
        img.to_dynamic()
            .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| StoreError::Invalid(format!("image {name}: {e}")))?;
        let path = self.image_path(name);
        write_atomic(&path, &png).map_err(io_err(&path))?;
        Ok(img)
    }

    pub fn image_names(&self) -> Result<Vec<String>, StoreError> {
        list_stems(&self.dir.join("images"), ".png")
    }

    pub fn image_bytes(&self, name: &str) -> Result<Vec<u8>, StoreError> {
        self.require_image(name)?;
        let path = self.image_path(name);
        fs::read(&path).map_err(io_err(&path))
    }

    pub fn image(&self, name: &str) -> Result<Image, StoreError> {
        let bytes = self.image_bytes(name)?;
        let img = image::load_from_memory(&bytes).map_err(|e| StoreError::Corrupt {
            path: self.image_path(name),
            reason: e.to_string(),
        })?;
        Ok(Image::from_dynamic(&img))
    }

    fn labels_path(&self, name: &str) -> PathBuf {
        self.dir.join("labels").join(format!("{name}.png"))
    }

    pub fn save_labels(&self, name: &str, labels: &LabelMask) -> Result<(), StoreError> {
        self.require_image(name)?;
        let path = self.labels_path(name);
        write_atomic(&path, &labels.to_png()?).map_err(io_err(&path))
    }

    pub fn labels(&self, name: &str) -> Result<Option<LabelMask>, StoreError> {
        self.require_image(name)?;
        let path = self.labels_path(name);
        match fs::read(&path) {
            Ok(b) => Ok(Some(LabelMask::from_png(&b)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    pub fn labeled_images(&self) -> Result<Vec<String>, StoreError> {
        list_stems(&self.dir.join("labels"), ".png")
    }

    pub fn classifier_versions(&self) -> Result<Vec<u32>, StoreError> {
        let mut v: Vec<u32> = list_stems(&self.dir.join("classifiers"), ".clf")?
            .iter()
            .filter_map(|s| s.parse().ok())
            .collect();
        v.sort_unstable();
        Ok(v)
    }

    /// Stores `clf` as the next version (starting at 1) and returns it.
    pub fn save_classifier(&self, clf: &PixelClassifier) -> Result<u32, StoreError> {
        let n = self.classifier_versions()?.last().map_or(1, |v| v + 1);
        let path = self.dir.join("classifiers").join(format!("{n}.clf"));
        write_atomic(&path, &encode_classifier(clf)).map_err(io_err(&path))?;
        Ok(n)
    }

    pub fn classifier(&self, version: u32) -> Result<PixelClassifier, StoreError> {
        let path = self.dir.join("classifiers").join(format!("{version}.clf"));
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound(format!("classifier version {version}")))
            }
            Err(e) => return Err(io_err(&path)(e)),
        };
        Ok(decode_classifier(&bytes)?)
    }

    fn prediction_path(&self, name: &str, probs: bool) -> PathBuf {
        let file = if probs { format!("{name}.prob.fmap") } else { format!("{name}.png") };
        self.dir.join("predictions").join(file)
    }

    pub fn save_prediction(&self, name: &str, pred: &Prediction) -> Result<(), StoreError> {
        self.require_image(name)?;
        let probs = self.prediction_path(name, true);
        write_atomic(&probs, &crate::fmap::encode(&pred.probabilities, Dtype::F32, None)).map_err(io_err(&probs))?;
        let png = self.prediction_path(name, false);
        write_atomic(&png, &pred.labels.to_png()?).map_err(io_err(&png))
    }

    /// The stored prediction PNG, and the probability FMAP bytes if asked.
    pub fn prediction(&self, name: &str, with_probs: bool) -> Result<Option<(Vec<u8>, Option<Vec<u8>>)>, StoreError> {
        self.require_image(name)?;
        let png = self.prediction_path(name, false);
        let bytes = match fs::read(&png) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&png)(e)),
        };
        let probs = if with_probs {
            let p = self.prediction_path(name, true);
            Some(fs::read(&p).map_err(io_err(&p))?)
        } else {
            None
        };
        Ok(Some((bytes, probs)))
    }
}
