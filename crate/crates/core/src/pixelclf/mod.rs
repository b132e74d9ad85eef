//! Pixel classification from sparse labels: filter-bank and deep features,
//! multinomial logistic regression, random forests and label smoothing.

mod archive;
pub mod filters;
pub mod forest;
pub mod logistic;
mod smooth;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::featurize::{BackendDescriptor, FeatureMap};
use crate::geometry::TransformSetDoc;
use crate::indexed::{self, IndexedPngError};
use crate::Raster;

pub use archive::{decode_classifier, encode_classifier, CLASSIFIER_MAGIC};
pub use filters::{classical_features, ClassicalFeatureStack, ClassicalRecipe, ColorMode, Filter, DEFAULT_SCALES};
pub use forest::{Forest, ForestConfig};
pub use logistic::{LogisticConfig, LogisticModel, LogisticProblem, TrainReport};
pub use smooth::{smooth, SMOOTH_MAX_ITER};

#[derive(Debug, Error)]
pub enum PixelClfError {
    #[error("need ≥2 classes, found {0:?}")]
    TooFewClasses(Vec<u32>),
    #[error("non-finite feature value in channel {channel} at pixel {pixel}")]
    NonFinite { channel: String, pixel: usize },
    #[error("scale must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("feature recipe mismatch\n  classifier: {expected}\n  features:   {actual}")]
    RecipeMismatch { expected: String, actual: String },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("classifier archive: {0}")]
    Archive(String),
    #[error(transparent)]
    Png(#[from] IndexedPngError),
}

/// Sparse or dense class labels; 0 means unlabeled.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self, PixelClfError> {
        if labels.len() != height * width {
            return Err(PixelClfError::Shape(format!(
                "{} labels for a {height}x{width} mask",
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn unlabeled(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    /// Distinct non-zero labels, ascending.
    pub fn classes(&self) -> Vec<u32> {
        let mut c: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    /// Overwrites this mask with the non-zero labels of `other`.
    pub fn paint_over(&mut self, other: &LabelMask) -> Result<(), PixelClfError> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(PixelClfError::Shape("label masks differ in size".into()));
        }
        for (a, &b) in self.labels.iter_mut().zip(&other.labels) {
            if b != 0 {
                *a = b;
            }
        }
        Ok(())
    }

    pub fn to_png(&self) -> Result<Vec<u8>, PixelClfError> {
        Ok(indexed::encode(self.height, self.width, &self.labels)?)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self, PixelClfError> {
        let (height, width, labels) = indexed::decode(bytes)?;
        Ok(Self { height, width, labels })
    }
}

/// Where the deep channels of a feature stack came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeepRecipe {
    pub backend: Option<BackendDescriptor>,
    pub transform_set: Option<TransformSetDoc>,
    pub l2_normalized: bool,
    pub dim: usize,
}

impl DeepRecipe {
    pub fn of(fm: &FeatureMap) -> Self {
        Self {
            backend: fm.provenance.as_ref().map(|p| p.backend.clone()),
            transform_set: fm.provenance.as_ref().map(|p| p.transform_set.clone()),
            l2_normalized: fm.provenance.as_ref().is_some_and(|p| p.l2_normalized),
            dim: fm.dim(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum FeatureRecipe {
    Deep(DeepRecipe),
    Classical(ClassicalRecipe),
    Hybrid { deep: DeepRecipe, classical: ClassicalRecipe },
}

impl FeatureRecipe {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("recipe serializes")
    }

    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Per-pixel feature vectors with their recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelFeatures {
    pub data: Raster<f32>,
    pub recipe: FeatureRecipe,
    pub channel_names: Vec<String>,
}

impl PixelFeatures {
    pub fn deep(fm: &FeatureMap) -> Self {
        Self {
            data: fm.data.clone(),
            recipe: FeatureRecipe::Deep(DeepRecipe::of(fm)),
            channel_names: (0..fm.dim()).map(|k| format!("deep[{k}]")).collect(),
        }
    }

    pub fn classical(stack: ClassicalFeatureStack) -> Self {
        Self {
            data: stack.data,
            recipe: FeatureRecipe::Classical(stack.recipe),
            channel_names: stack.channel_names,
        }
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

    fn check_finite(&self) -> Result<(), PixelClfError> {
        let d = self.dim();
        match self.data.data().iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(PixelClfError::NonFinite {
                channel: self.channel_names[i % d].clone(),
                pixel: i / d,
            }),
        }
    }
}

/// Channel-wise concatenation, deep channels first.
pub fn hybrid_stack(deep: &FeatureMap, classical: &ClassicalFeatureStack) -> Result<PixelFeatures, PixelClfError> {
    let (h, w) = (deep.height(), deep.width());
    if (classical.data.height(), classical.data.width()) != (h, w) {
        return Err(PixelClfError::Shape(format!(
            "deep features are {h}x{w}, classical are {}x{}",
            classical.data.height(),
            classical.data.width()
        )));
    }
    let (d, dc) = (deep.dim(), classical.data.channels());
    let data = Raster::from_fn(h, w, d + dc, |y, x, k| {
        if k < d {
            deep.data.get(y, x, k)
        } else {
            classical.data.get(y, x, k - d)
        }
    });
    let mut channel_names: Vec<String> = (0..d).map(|k| format!("deep[{k}]")).collect();
    channel_names.extend(classical.channel_names.iter().cloned());
    Ok(PixelFeatures {
        data,
        recipe: FeatureRecipe::Hybrid {
            deep: DeepRecipe::of(deep),
            classical: classical.recipe.clone(),
        },
        channel_names,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Logistic,
    RandomForest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kind: ClassifierKind,
    pub logistic: LogisticConfig,
    pub forest: ForestConfig,
}

impl TrainConfig {
    pub fn logistic() -> Self {
        Self {
            kind: ClassifierKind::Logistic,
            logistic: LogisticConfig::default(),
            forest: ForestConfig::default(),
        }
    }

    pub fn random_forest() -> Self {
        Self {
            kind: ClassifierKind::RandomForest,
            ..Self::logistic()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Logistic(LogisticModel),
    Forest(Forest),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelClassifier {
    pub kind: ClassifierKind,
    pub recipe: FeatureRecipe,
    pub recipe_checksum: String,
    pub channel_names: Vec<String>,
    /// Label value of each output class, ascending.
    pub classes: Vec<u32>,
    pub config: TrainConfig,
    pub model: Model,
}

impl PixelClassifier {
    pub fn dim(&self) -> usize {
        self.channel_names.len()
    }

    /// Class probabilities for one feature vector, in `classes` order.
    pub fn predict_proba_row(&self, x: &[f32]) -> Vec<f64> {
        match &self.model {
            Model::Logistic(m) => m.predict_proba(x),
            Model::Forest(f) => f.predict_proba(x),
        }
    }

    pub fn training_report(&self) -> Option<&TrainReport> {
        match &self.model {
            Model::Logistic(m) => Some(&m.report),
            Model::Forest(_) => None,
        }
    }
}

/// Labeled rows gathered from possibly many images.
#[derive(Clone, Debug, Default)]
pub struct TrainingSet {
    pub rows: Vec<f32>,
    pub labels: Vec<u32>,
    pub dim: usize,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Appends every labeled pixel of `labels`.
    pub fn add(&mut self, features: &PixelFeatures, labels: &LabelMask) -> Result<(), PixelClfError> {
        if (features.height(), features.width()) != (labels.height, labels.width) {
            return Err(PixelClfError::Shape(format!(
                "features are {}x{}, labels are {}x{}",
                features.height(),
                features.width(),
                labels.height,
                labels.width
            )));
        }
        if self.dim == 0 && self.is_empty() {
            self.dim = features.dim();
        } else if self.dim != features.dim() {
            return Err(PixelClfError::Shape(format!(
                "feature dim {} differs from {}",
                features.dim(),
                self.dim
            )));
        }
        for (p, &l) in labels.labels.iter().enumerate() {
            if l == 0 {
                continue;
            }
            let row = &features.data.data()[p * self.dim..(p + 1) * self.dim];
            if let Some(k) = row.iter().position(|v| !v.is_finite()) {
                return Err(PixelClfError::NonFinite {
                    channel: features.channel_names[k].clone(),
                    pixel: p,
                });
            }
            self.rows.extend_from_slice(row);
            self.labels.push(l);
        }
        Ok(())
    }
}

/// Trains on the labeled pixels of one image.
pub fn train(features: &PixelFeatures, labels: &LabelMask, config: &TrainConfig) -> Result<PixelClassifier, PixelClfError> {
    let mut set = TrainingSet::default();
    set.add(features, labels)?;
    train_rows(&set, features.recipe.clone(), features.channel_names.clone(), config)
}

/// Trains on rows gathered with [`TrainingSet::add`], all from `recipe`.
pub fn train_rows(
    set: &TrainingSet,
    recipe: FeatureRecipe,
    channel_names: Vec<String>,
    config: &TrainConfig,
) -> Result<PixelClassifier, PixelClfError> {
    let mut classes = set.labels.clone();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(PixelClfError::TooFewClasses(classes));
    }
    if set.dim != channel_names.len() {
        return Err(PixelClfError::Shape(format!(
            "{} channel names for {} dims",
            channel_names.len(),
            set.dim
        )));
    }
    let y: Vec<usize> = set
        .labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label is a class"))
        .collect();
    let model = match config.kind {
        ClassifierKind::Logistic => Model::Logistic(logistic::fit(&set.rows, &y, set.dim, classes.len(), &config.logistic)?),
        ClassifierKind::RandomForest => Model::Forest(forest::fit(&set.rows, &y, set.dim, classes.len(), &config.forest)?),
    };
    Ok(PixelClassifier {
        kind: config.kind,
        recipe_checksum: recipe.checksum(),
        recipe,
        channel_names,
        classes,
        config: config.clone(),
        model,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: LabelMask,
    /// `H × W × K`, channels in the classifier's class order.
    pub probabilities: Raster<f32>,
}

/// Per-pixel argmax (lowest class wins ties) and class probabilities.
pub fn predict(clf: &PixelClassifier, features: &PixelFeatures) -> Result<Prediction, PixelClfError> {
    let checksum = features.recipe.checksum();
    if checksum != clf.recipe_checksum {
        return Err(PixelClfError::RecipeMismatch {
            expected: clf.recipe.to_json(),
            actual: features.recipe.to_json(),
        });
    }
    if features.dim() != clf.dim() {
        return Err(PixelClfError::Shape(format!(
            "classifier expects {} channels, features have {}",
            clf.dim(),
            features.dim()
        )));
    }
    features.check_finite()?;
    let (h, w, d) = features.data.shape();
    let k = clf.classes.len();
    let rows: Vec<Vec<f64>> = {
        use rayon::prelude::*;
        features
            .data
            .data()
            .par_chunks_exact(d)
            .map(|row| clf.predict_proba_row(row))
            .collect()
    };
    let mut labels = Vec::with_capacity(h * w);
    let mut probs = Vec::with_capacity(h * w * k);
    for p in &rows {
        let mut best = 0;
        for c in 1..k {
            if p[c] > p[best] {
                best = c;
            }
        }
        labels.push(clf.classes[best]);
        probs.extend(p.iter().map(|&v| v as f32));
    }
    Ok(Prediction {
        labels: LabelMask { height: h, width: w, labels },
        probabilities: Raster::new(h, w, k, probs).expect("shape matches"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features_1d(values: &[f32]) -> PixelFeatures {
        PixelFeatures {
            data: Raster::new(1, values.len(), 1, values.to_vec()).unwrap(),
            recipe: FeatureRecipe::Deep(DeepRecipe {
                backend: None,
                transform_set: None,
                l2_normalized: false,
                dim: 1,
            }),
            channel_names: vec!["deep[0]".into()],
        }
    }

    #[test]
    fn single_class_rejected() {
        let f = features_1d(&[0.0, 1.0]);
        let l = LabelMask::new(1, 2, vec![3, 3]).unwrap();
        let err = train(&f, &l, &TrainConfig::logistic()).unwrap_err();
        assert!(err.to_string().contains("need ≥2 classes"));
    }

    #[test]
    fn nan_names_channel() {
        let mut f = features_1d(&[0.0, f32::NAN]);
        f.channel_names = vec!["sobel(s=2)".into()];
        let l = LabelMask::new(1, 2, vec![1, 2]).unwrap();
        let err = train(&f, &l, &TrainConfig::logistic()).unwrap_err();
        assert!(err.to_string().contains("sobel(s=2)"), "{err}");
    }

    #[test]
    fn separable_points_reproduce_labels() {
        let f = features_1d(&[-1.0, 1.0, 0.0]);
        let l = LabelMask::new(1, 3, vec![1, 2, 0]).unwrap();
        for cfg in [TrainConfig::logistic(), TrainConfig::random_forest()] {
            let clf = train(&f, &l, &cfg).unwrap();
            let pred = predict(&clf, &f).unwrap();
            assert_eq!(&pred.labels.labels[..2], &[1, 2]);
            assert_eq!(pred.probabilities.channels(), 2);
            for p in pred.probabilities.pixels() {
                assert!((p.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn recipe_mismatch_prints_both() {
        let f = features_1d(&[-1.0, 1.0]);
        let l = LabelMask::new(1, 2, vec![1, 2]).unwrap();
        let clf = train(&f, &l, &TrainConfig::logistic()).unwrap();
        let mut g = f.clone();
        g.recipe = FeatureRecipe::Classical(ClassicalRecipe::standard(&[1.0]).unwrap());
        let msg = predict(&clf, &g).unwrap_err().to_string();
        assert!(msg.contains("\"deep\"") && msg.contains("\"classical\""), "{msg}");
    }

    #[test]
    fn hybrid_layout_puts_deep_first() {
        let deep = FeatureMap::new(Raster::from_fn(2, 2, 3, |y, x, k| (y * 100 + x * 10 + k) as f32));
        let classical = ClassicalFeatureStack {
            data: Raster::from_fn(2, 2, 2, |_, _, k| -(k as f32) - 1.0),
            recipe: ClassicalRecipe::standard(&[1.0]).unwrap(),
            channel_names: vec!["a".into(), "b".into()],
        };
        let h = hybrid_stack(&deep, &classical).unwrap();
        assert_eq!(h.dim(), 5);
        assert_eq!(h.data.pixel(1, 1), &[110.0, 111.0, 112.0, -1.0, -2.0]);
        assert_eq!(h.channel_names[3], "a");
        let small = FeatureMap::new(Raster::filled(1, 2, 3, 0.0));
        assert!(hybrid_stack(&small, &classical).is_err());
    }

    #[test]
    fn label_png_round_trip() {
        let m = LabelMask::new(3, 4, vec![0, 1, 2, 3, 0, 0, 7, 1, 2, 2, 2, 0]).unwrap();
        assert_eq!(LabelMask::from_png(&m.to_png().unwrap()).unwrap(), m);
    }
}
