//! Steps shared by the CLI and the HTTP service.

use std::path::Path;

use anyhow::Context;
use featpipe_core::featurize::{upsample, AttentionMap, FeatureMap, Featurizer, UpsampleOptions};
use featpipe_core::geometry::TransformSet;
use featpipe_core::pipeline::{pixel_features, FeatureSource};
use featpipe_core::pixelclf::{
    predict, smooth, train_rows, ClassicalRecipe, LabelMask, PixelClassifier, PixelClfError, PixelFeatures, Prediction,
    TrainConfig, TrainingSet,
};
use featpipe_core::store::{conform, CacheKey, Conformed, FeatureCache, RunLengthLabels};
use featpipe_core::Image;

use crate::error::invalid;

pub fn load_image(path: &Path) -> anyhow::Result<Image> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_image(&bytes).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

pub fn decode_image(bytes: &[u8]) -> anyhow::Result<Image> {
    let img = image::load_from_memory(bytes).map_err(|e| invalid(format!("not a readable image ({e})")))?;
    Ok(Image::from_dynamic(&img))
}

pub fn encode_png(img: &Image) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.to_dynamic()
        .write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

/// Labels from an indexed PNG, or run-length JSON when the file ends in `.json`.
pub fn load_labels(path: &Path, height: usize, width: usize) -> anyhow::Result<LabelMask> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mask = if path.extension().is_some_and(|e| e == "json") {
        let rle: RunLengthLabels =
            serde_json::from_slice(&bytes).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        rle.decode(height, width).map_err(|e| invalid(format!("{}: {e}", path.display())))?
    } else {
        LabelMask::from_png(&bytes).map_err(|e| invalid(format!("{}: {e}", path.display())))?
    };
    if (mask.height, mask.width) != (height, width) {
        return Err(invalid(format!(
            "{}: labels are {}x{}, image is {height}x{width}",
            path.display(),
            mask.height,
            mask.width
        )));
    }
    Ok(mask)
}

/// Cache key over the conformed pixels, so the working resolution is part of it.
pub fn cache_key(conformed: &Image, backend: &dyn Featurizer, set: &TransformSet) -> CacheKey {
    let (h, w, c) = conformed.shape();
    let mut bytes = Vec::with_capacity(24 + conformed.data().len());
    for v in [h, w, c] {
        bytes.extend((v as u64).to_le_bytes());
    }
    bytes.extend_from_slice(conformed.data());
    CacheKey::new(&bytes, backend.descriptor(), set)
}

pub struct Featurized {
    pub conformed: Conformed,
    pub features: FeatureMap,
    pub attention: AttentionMap,
    pub cache_hit: bool,
}

/// Conforms `image` to the backend, then upsamples, reading and filling
/// `cache` when given. Maps are at the conformed resolution.
pub fn featurize(
    backend: &dyn Featurizer,
    set: &TransformSet,
    image: &Image,
    target: Option<(usize, usize)>,
    cache: Option<&FeatureCache>,
    opts: &UpsampleOptions,
) -> anyhow::Result<Featurized> {
    let conformed = conform(image, backend.descriptor(), target).map_err(|e| invalid(e.to_string()))?;
    let compute = || upsample(backend, &conformed.image, set, opts).map_err(anyhow::Error::from);
    let ((features, attention), cache_hit) = match cache {
        Some(cache) => {
            let key = cache_key(&conformed.image, backend, set);
            cache.get_or_compute::<anyhow::Error>(&key, compute)?
        }
        None => (compute()?, false),
    };
    Ok(Featurized {
        conformed,
        features,
        attention,
        cache_hit,
    })
}

/// Pixel features for a conformed image. `deep` is needed for the deep and
/// hybrid sources.
pub fn features_for(
    source: FeatureSource,
    conformed: &Image,
    deep: Option<&FeatureMap>,
    classical: &ClassicalRecipe,
) -> anyhow::Result<PixelFeatures> {
    Ok(pixel_features(source, conformed, deep, classical)?)
}

pub fn needs_deep(source: FeatureSource) -> bool {
    source != FeatureSource::Classical
}

/// One training image: pixel features at the conformed resolution and labels
/// at the original one.
pub struct TrainItem<'a> {
    pub conformed: &'a Conformed,
    pub features: PixelFeatures,
    pub labels: &'a LabelMask,
}

/// Trains one classifier on the labeled pixels of every item. Label values
/// of 0 are unlabeled.
pub fn train_on(items: &[TrainItem<'_>], config: &TrainConfig) -> anyhow::Result<PixelClassifier> {
    let first = items.first().ok_or_else(|| invalid("no labeled images"))?;
    let mut set = TrainingSet::default();
    for item in items {
        if item.features.recipe != first.features.recipe {
            return Err(invalid("images were featurized with different recipes"));
        }
        let labels = item.conformed.map.forward_labels(item.labels);
        set.add(&item.features, &labels)?;
    }
    train_rows(&set, first.features.recipe.clone(), first.features.channel_names.clone(), config).map_err(|e| match e {
        PixelClfError::TooFewClasses(_) => invalid(e.to_string()),
        e => e.into(),
    })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SmoothOptions {
    pub radius: usize,
    pub iterations: usize,
}

/// Predicts at the conformed resolution and maps the result back to the
/// original image.
pub fn apply_classifier(
    clf: &PixelClassifier,
    conformed: &Conformed,
    features: &PixelFeatures,
    smoothing: SmoothOptions,
) -> anyhow::Result<Prediction> {
    let pred = predict(clf, features).map_err(|e| match e {
        PixelClfError::RecipeMismatch { .. } => invalid(e.to_string()),
        e => e.into(),
    })?;
    let labels = if smoothing.radius > 0 && smoothing.iterations > 0 {
        smooth(&pred.labels, &pred.probabilities, &clf.classes, smoothing.radius, smoothing.iterations)
    } else {
        pred.labels
    };
    Ok(Prediction {
        labels: conformed.map.restore_labels(&labels),
        probabilities: conformed.map.restore(&pred.probabilities),
    })
}
