//! Unsupervised detection and saliency over a set of images, and the
//! benchmark report built from it.

use std::collections::BTreeMap;
use std::fmt::Write;

use featpipe_core::detect::{corloc, mask_iou, BBox, DetectedBox};
use featpipe_core::featurize::{BackendDescriptor, Featurizer, UpsampleOptions};
use featpipe_core::geometry::{TransformSet, TransformSetDoc};
use featpipe_core::pipeline::{unsupervised, UnsupConfig};
use featpipe_core::store::conform;
use featpipe_core::{Image, Raster};
use serde::{Deserialize, Serialize};

use crate::error::invalid;

pub struct BenchImage {
    pub id: String,
    pub image: Image,
    pub boxes: Option<Vec<BBox>>,
    pub mask: Option<Vec<bool>>,
}

/// Detection output for one image, in original image coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageDetection {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub boxes: Vec<DetectedBox>,
    #[serde(skip)]
    pub saliency: Vec<bool>,
    pub classes: usize,
}

/// Runs the unsupervised pipeline on `image` after padding it to the backend
/// constraints, and crops the results back.
pub fn detect_one(
    backend: &dyn Featurizer,
    set: &TransformSet,
    id: &str,
    image: &Image,
    opts: &UpsampleOptions,
    cfg: &UnsupConfig,
) -> anyhow::Result<ImageDetection> {
    let (h, w) = (image.height(), image.width());
    let c = conform(image, backend.descriptor(), None).map_err(|e| invalid(format!("{id}: {e}")))?;
    let opts = UpsampleOptions {
        image_id: Some(id.to_string()),
        ..opts.clone()
    };
    let out = unsupervised(backend, &c.image, set, &opts, cfg)?;
    let (ph, pw) = c.map.padded;
    let sal = Raster::new(ph, pw, 1, out.detection.saliency.iter().map(|&s| s as u8).collect()).expect("dims");
    let saliency = c.map.restore(&sal).data().iter().map(|&v| v != 0).collect();
    let boxes = out
        .detection
        .boxes
        .into_iter()
        .filter_map(|mut b| {
            b.bbox.x1 = b.bbox.x1.min(w as u32);
            b.bbox.y1 = b.bbox.y1.min(h as u32);
            (b.bbox.x0 < b.bbox.x1 && b.bbox.y0 < b.bbox.y1).then_some(b)
        })
        .collect();
    Ok(ImageDetection {
        id: id.to_string(),
        height: h,
        width: w,
        boxes,
        saliency,
        classes: out.cas.class_count(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub boxes: Vec<BBox>,
    /// Whether any box beats 0.5 IoU with a ground-truth box.
    pub hit: Option<bool>,
    pub saliency_iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub dataset: String,
    pub images: usize,
    pub mode: String,
    pub backend: BackendDescriptor,
    pub transform_set: TransformSetDoc,
    pub lambda: f64,
    pub corloc: Option<f64>,
    pub saliency_iou_mean: Option<f64>,
    pub saliency_iou_min: Option<f64>,
    pub seconds: f64,
    pub per_image: Vec<ImageScore>,
}

pub fn score(images: &[BenchImage], detections: &[ImageDetection]) -> anyhow::Result<(Option<f64>, Vec<ImageScore>)> {
    let mut pred = BTreeMap::new();
    let mut gt = BTreeMap::new();
    let mut scores = Vec::with_capacity(images.len());
    for (img, det) in images.iter().zip(detections) {
        let boxes: Vec<BBox> = det.boxes.iter().map(|b| b.bbox).collect();
        let hit = img
            .boxes
            .as_ref()
            .map(|g| boxes.iter().any(|p| g.iter().any(|b| p.iou(b) > 0.5)));
        if let Some(g) = &img.boxes {
            gt.insert(img.id.clone(), g.clone());
            pred.insert(img.id.clone(), boxes.clone());
        }
        let saliency_iou = match &img.mask {
            Some(m) => Some(mask_iou(&det.saliency, m)?),
            None => None,
        };
        scores.push(ImageScore {
            id: img.id.clone(),
            boxes,
            hit,
            saliency_iou,
        });
    }
    let cl = if gt.is_empty() { None } else { Some(corloc(&pred, &gt)?) };
    Ok((cl, scores))
}

impl BenchmarkReport {
    pub fn to_markdown(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "# Benchmark: {}\n", self.dataset);
        let _ = writeln!(s, "| metric | value |\n|---|---|");
        let _ = writeln!(s, "| images | {} |", self.images);
        let _ = writeln!(s, "| mode | {} |", self.mode);
        let _ = writeln!(s, "| backend | {} (P={}, S={}) |", self.backend.name, self.backend.patch_size, self.backend.stride);
        let _ = writeln!(s, "| transforms | {} |", TransformSet::from_doc(&self.transform_set).len());
        let _ = writeln!(s, "| lambda | {} |", self.lambda);
        let _ = writeln!(s, "| CorLoc | {} |", fmt(self.corloc));
        let _ = writeln!(s, "| saliency IoU (mean) | {} |", fmt(self.saliency_iou_mean));
        let _ = writeln!(s, "| saliency IoU (min) | {} |", fmt(self.saliency_iou_min));
        let _ = writeln!(s, "| seconds | {:.2} |", self.seconds);
        let misses: Vec<&str> = self
            .per_image
            .iter()
            .filter(|i| i.hit == Some(false))
            .map(|i| i.id.as_str())
            .collect();
        if !misses.is_empty() {
            let _ = writeln!(s, "\nMissed: {}", misses.join(", "));
        }
        s
    }
}
