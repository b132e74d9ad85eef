//! Boxes, saliency masks and the localization / segmentation metrics.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cas::CasMap;

/// A superbox overlapping another box by more than this IoU is dropped.
pub const SUPERBOX_IOU: f64 = 0.8;
/// A prediction localizes an object when its IoU strictly exceeds this.
pub const CORLOC_IOU: f64 = 0.5;
/// Default minimum component area as a fraction of the image.
pub const MIN_AREA_FRACTION: f64 = 0.001;

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("missing ground truth for images: {0:?}")]
    MissingGroundTruth(Vec<String>),
    #[error("class list is empty")]
    EmptyClassList,
    #[error("none of the classes {0:?} occur in prediction or ground truth")]
    NoClassPresent(Vec<u32>),
    #[error("shape mismatch: {0} vs {1} pixels")]
    ShapeMismatch(usize, usize),
}

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl From<[u32; 4]> for BBox {
    fn from(v: [u32; 4]) -> Self {
        BBox {
            x0: v[0],
            y0: v[1],
            x1: v[2],
            y1: v[3],
        }
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> u64 {
        self.x1.saturating_sub(self.x0) as u64 * self.y1.saturating_sub(self.y0) as u64
    }

    pub fn intersection(&self, other: &BBox) -> u64 {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0)) as u64;
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0)) as u64;
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            log::warn!("IoU of two empty boxes defined as 0");
            return 0.0;
        }
        inter as f64 / union as f64
    }
}

/// IoU of two boolean masks over the same frame.
pub fn mask_iou(a: &[bool], b: &[bool]) -> Result<f64, DetectError> {
    if a.len() != b.len() {
        return Err(DetectError::ShapeMismatch(a.len(), b.len()));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    if union == 0 {
        log::warn!("IoU of two empty masks defined as 0");
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(i64, i64)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

/// One connected component.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub id: u32,
    pub area: usize,
    pub bbox: BBox,
}

/// Labels connected `true` regions of a mask. Components are numbered from 1
/// in raster order of their first pixel; background is 0.
pub fn label_components(mask: &[bool], height: usize, width: usize, conn: Connectivity) -> (Vec<u32>, Vec<Component>) {
    assert_eq!(mask.len(), height * width, "mask does not match dims");
    let mut labels = vec![0u32; mask.len()];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        let id = comps.len() as u32 + 1;
        labels[start] = id;
        queue.push_back(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut area = 0;
        while let Some(p) = queue.pop_front() {
            let (y, x) = (p / width, p % width);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            for &(dy, dx) in conn.offsets() {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < 0 || nx < 0 || ny >= height as i64 || nx >= width as i64 {
                    continue;
                }
                let q = ny as usize * width + nx as usize;
                if mask[q] && labels[q] == 0 {
                    labels[q] = id;
                    queue.push_back(q);
                }
            }
        }
        comps.push(Component {
            id,
            area,
            bbox: BBox::new(x0 as u32, y0 as u32, x1 as u32, y1 as u32),
        });
    }
    (labels, comps)
}

/// Connected components of every CAS class, keyed by class id.
pub fn components(cas: &CasMap, conn: Connectivity) -> BTreeMap<u32, Vec<Component>> {
    cas.classes
        .iter()
        .map(|c| {
            let mask: Vec<bool> = cas.labels.iter().map(|&l| l == c.id).collect();
            (c.id, label_components(&mask, cas.height, cas.width, conn).1)
        })
        .collect()
}

/// Union of the foreground classes.
pub fn saliency(cas: &CasMap) -> Vec<bool> {
    let fg: Vec<bool> = cas.classes.iter().map(|c| c.foreground).collect();
    cas.labels.iter().map(|&l| fg[l as usize]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionMode {
    /// Only the superbox (or the box that replaced it).
    #[default]
    Single,
    /// Every retained box.
    Multi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxOptions {
    /// Components smaller than this are ignored; `None` means 0.1% of the image.
    pub min_area: Option<usize>,
    pub connectivity: Connectivity,
    pub mode: DetectionMode,
}

impl Default for BoxOptions {
    fn default() -> Self {
        Self {
            min_area: None,
            connectivity: Connectivity::Eight,
            mode: DetectionMode::Multi,
        }
    }
}

impl BoxOptions {
    pub fn resolved_min_area(&self, pixels: usize) -> usize {
        self.min_area
            .unwrap_or_else(|| ((pixels as f64 * MIN_AREA_FRACTION).ceil() as usize).max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectedBox {
    pub bbox: BBox,
    /// CAS class id; `None` for the superbox, which spans classes.
    pub class: Option<u32>,
    pub area: usize,
    pub is_superbox: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionResult {
    pub boxes: Vec<DetectedBox>,
    pub saliency: Vec<bool>,
}

impl DetectionResult {
    pub fn bboxes(&self) -> Vec<BBox> {
        self.boxes.iter().map(|b| b.bbox).collect()
    }
}

/// One box per foreground-class component, plus a superbox around the largest
/// component of the foreground union. The superbox is dropped when it
/// overlaps another box by more than 80% IoU. Single mode keeps only the
/// superbox, or the box that displaced it.
pub fn boxes(cas: &CasMap, opts: &BoxOptions) -> DetectionResult {
    let (h, w) = (cas.height, cas.width);
    let min_area = opts.resolved_min_area(h * w);
    let sal = saliency(cas);

    let mut per_class = Vec::new();
    for (class, comps) in components(cas, opts.connectivity) {
        if !cas.is_foreground(class) {
            continue;
        }
        per_class.extend(comps.into_iter().filter(|c| c.area >= min_area).map(|c| DetectedBox {
            bbox: c.bbox,
            class: Some(class),
            area: c.area,
            is_superbox: false,
        }));
    }

    let (_, union_comps) = label_components(&sal, h, w, opts.connectivity);
    let largest = union_comps
        .iter()
        .fold(None::<&Component>, |best, c| match best {
            Some(b) if b.area >= c.area => Some(b),
            _ => Some(c),
        })
        .filter(|c| c.area >= min_area);

    let mut result = per_class;
    let mut single: Option<DetectedBox> = None;
    if let Some(big) = largest {
        let displaced_by = result
            .iter()
            .map(|b| (b, big.bbox.iou(&b.bbox)))
            .filter(|(_, iou)| *iou > SUPERBOX_IOU)
            .fold(None::<(&DetectedBox, f64)>, |best, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            });
        match displaced_by {
            Some((other, _)) => single = Some(other.clone()),
            None => {
                let sb = DetectedBox {
                    bbox: big.bbox,
                    class: None,
                    area: big.area,
                    is_superbox: true,
                };
                single = Some(sb.clone());
                result.push(sb);
            }
        }
    }

    let boxes = match opts.mode {
        DetectionMode::Multi => result,
        DetectionMode::Single => single.into_iter().collect(),
    };
    DetectionResult { boxes, saliency: sal }
}

/// Fraction of ground-truth images where some prediction has IoU > 0.5 with
/// some ground-truth box. Images without predictions count as misses.
pub fn corloc(predictions: &BTreeMap<String, Vec<BBox>>, ground_truth: &BTreeMap<String, Vec<BBox>>) -> Result<f64, DetectError> {
    let missing: Vec<String> = predictions
        .keys()
        .filter(|k| !ground_truth.contains_key(*k))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(DetectError::MissingGroundTruth(missing));
    }
    if ground_truth.is_empty() {
        return Ok(0.0);
    }
    let hits = ground_truth
        .iter()
        .filter(|(id, gt)| {
            predictions
                .get(*id)
                .is_some_and(|preds| preds.iter().any(|p| gt.iter().any(|g| p.iou(g) > CORLOC_IOU)))
        })
        .count();
    Ok(hits as f64 / ground_truth.len() as f64)
}

/// Mean over `classes` of per-class IoU; classes absent from both rasters
/// are skipped.
pub fn miou(pred: &[u32], gt: &[u32], classes: &[u32]) -> Result<f64, DetectError> {
    let per = per_class_iou(pred, gt, classes)?;
    if per.is_empty() {
        return Err(DetectError::NoClassPresent(classes.to_vec()));
    }
    Ok(per.values().sum::<f64>() / per.len() as f64)
}

/// IoU for each class present in `pred` or `gt`.
pub fn per_class_iou(pred: &[u32], gt: &[u32], classes: &[u32]) -> Result<BTreeMap<u32, f64>, DetectError> {
    if classes.is_empty() {
        return Err(DetectError::EmptyClassList);
    }
    if pred.len() != gt.len() {
        return Err(DetectError::ShapeMismatch(pred.len(), gt.len()));
    }
    let wanted: BTreeSet<u32> = classes.iter().copied().collect();
    let mut inter: BTreeMap<u32, u64> = BTreeMap::new();
    let mut union: BTreeMap<u32, u64> = BTreeMap::new();
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            if wanted.contains(&p) {
                *inter.entry(p).or_default() += 1;
                *union.entry(p).or_default() += 1;
            }
        } else {
            if wanted.contains(&p) {
                *union.entry(p).or_default() += 1;
            }
            if wanted.contains(&g) {
                *union.entry(g).or_default() += 1;
            }
        }
    }
    Ok(union
        .into_iter()
        .map(|(c, u)| (c, inter.get(&c).copied().unwrap_or(0) as f64 / u as f64))
        .collect())
}

/// Ground-truth boxes for one image: `{"image": id, "boxes": [[x0,y0,x1,y1], ...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image: String,
    pub boxes: Vec<BBox>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cas::CasClass;

    fn cas_from(labels: Vec<u32>, height: usize, width: usize, fg: &[bool]) -> CasMap {
        let classes = fg
            .iter()
            .enumerate()
            .map(|(i, &f)| CasClass {
                id: i as u32,
                area: labels.iter().filter(|&&l| l == i as u32).count(),
                attention_mass: 0.0,
                rho_a: 0.0,
                foreground: f,
                clusters: vec![i as u32],
            })
            .collect();
        CasMap {
            height,
            width,
            labels,
            classes,
            d_sem: 0.5,
            lambda: 1.0,
            seed: 0,
            degenerate_split: false,
        }
    }

    #[test]
    fn box_iou_examples() {
        let a = BBox::new(0, 0, 10, 10);
        assert_eq!(a.iou(&a), 1.0);
        assert!((a.iou(&BBox::new(5, 5, 15, 15)) - 25.0 / 175.0).abs() < 1e-15);
        assert_eq!(a.iou(&BBox::new(10, 0, 20, 10)), 0.0);
        assert_eq!(BBox::new(1, 1, 1, 1).iou(&BBox::new(2, 2, 2, 2)), 0.0);
    }

    #[test]
    fn diagonal_pixels_depend_on_connectivity() {
        let mask = [true, false, false, true];
        assert_eq!(label_components(&mask, 2, 2, Connectivity::Eight).1.len(), 1);
        assert_eq!(label_components(&mask, 2, 2, Connectivity::Four).1.len(), 2);
    }

    #[test]
    fn boxes_are_tight() {
        let mut mask = vec![false; 6 * 7];
        for &(y, x) in &[(1, 2), (2, 2), (2, 3), (3, 4)] {
            mask[y * 7 + x] = true;
        }
        let (_, comps) = label_components(&mask, 6, 7, Connectivity::Eight);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].bbox, BBox::new(2, 1, 5, 4));
        assert_eq!(comps[0].area, 4);
    }

    #[test]
    fn single_blob_superbox_is_displaced() {
        let mut labels = vec![0u32; 100];
        for y in 3..7 {
            for x in 2..6 {
                labels[y * 10 + x] = 1;
            }
        }
        let cas = cas_from(labels, 10, 10, &[false, true]);
        let det = boxes(&cas, &BoxOptions::default());
        assert_eq!(det.boxes.len(), 1);
        assert!(!det.boxes[0].is_superbox);
        assert_eq!(det.boxes[0].bbox, BBox::new(2, 3, 6, 7));
        let single = boxes(
            &cas,
            &BoxOptions {
                mode: DetectionMode::Single,
                ..Default::default()
            },
        );
        assert_eq!(single.bboxes(), vec![BBox::new(2, 3, 6, 7)]);
    }

    #[test]
    fn two_blobs_get_superbox_around_larger() {
        let mut labels = vec![0u32; 20 * 20];
        for y in 1..4 {
            for x in 1..4 {
                labels[y * 20 + x] = 1;
            }
        }
        for y in 10..18 {
            for x in 10..18 {
                labels[y * 20 + x] = 1;
            }
        }
        let cas = cas_from(labels, 20, 20, &[false, true]);
        let det = boxes(
            &cas,
            &BoxOptions {
                min_area: Some(1),
                ..Default::default()
            },
        );
        // the superbox equals the larger blob's box (IoU 1 > 0.8), so it is dropped
        assert_eq!(det.boxes.len(), 2);

        // split the larger blob across two classes so no class box covers it
        let mut labels = cas.labels.clone();
        for y in 10..18 {
            for x in 14..18 {
                labels[y * 20 + x] = 2;
            }
        }
        let cas = cas_from(labels, 20, 20, &[false, true, true]);
        let det = boxes(
            &cas,
            &BoxOptions {
                min_area: Some(1),
                ..Default::default()
            },
        );
        assert_eq!(det.boxes.len(), 4);
        let sb: Vec<_> = det.boxes.iter().filter(|b| b.is_superbox).collect();
        assert_eq!(sb.len(), 1);
        assert_eq!(sb[0].bbox, BBox::new(10, 10, 18, 18));
    }

    #[test]
    fn min_area_filters_everything() {
        let mut labels = vec![0u32; 100];
        labels[55] = 1;
        let cas = cas_from(labels, 10, 10, &[false, true]);
        let det = boxes(
            &cas,
            &BoxOptions {
                min_area: Some(50),
                ..Default::default()
            },
        );
        assert!(det.boxes.is_empty());
        assert_eq!(det.saliency.iter().filter(|&&s| s).count(), 1);
    }

    #[test]
    fn corloc_counts() {
        let gt: BTreeMap<String, Vec<BBox>> = [
            ("a".to_string(), vec![BBox::new(0, 0, 10, 10)]),
            ("b".to_string(), vec![BBox::new(0, 0, 10, 10)]),
        ]
        .into();
        assert_eq!(corloc(&gt, &gt).unwrap(), 1.0);
        // IoU 0.6 on "a", no prediction on "b"
        let pred: BTreeMap<String, Vec<BBox>> = [("a".to_string(), vec![BBox::new(0, 0, 10, 6)])].into();
        assert_eq!(corloc(&pred, &gt).unwrap(), 0.5);
        // IoU exactly 0.5 is a miss
        let half: BTreeMap<String, Vec<BBox>> = [
            ("a".to_string(), vec![BBox::new(0, 0, 10, 5)]),
            ("b".to_string(), vec![BBox::new(0, 0, 5, 10)]),
        ]
        .into();
        assert_eq!(corloc(&half, &gt).unwrap(), 0.0);
        let stray: BTreeMap<String, Vec<BBox>> = [("z".to_string(), vec![])].into();
        assert_eq!(
            corloc(&stray, &gt).unwrap_err(),
            DetectError::MissingGroundTruth(vec!["z".into()])
        );
    }

    #[test]
    fn miou_examples() {
        let gt = vec![1, 1, 1, 1, 0, 0, 0, 0];
        assert_eq!(miou(&gt, &gt, &[0, 1]).unwrap(), 1.0);
        let pred = vec![1, 1, 0, 0, 0, 0, 0, 0];
        let per = per_class_iou(&pred, &gt, &[1]).unwrap();
        assert_eq!(per[&1], 0.5);
        assert_eq!(miou(&pred, &gt, &[0, 1, 7]).unwrap(), (0.5 + 4.0 / 6.0) / 2.0);
        assert_eq!(miou(&gt, &gt, &[]).unwrap_err(), DetectError::EmptyClassList);
        assert!(matches!(miou(&gt, &gt, &[5]), Err(DetectError::NoClassPresent(_))));
    }

    #[test]
    fn saliency_cases() {
        let cas = cas_from(vec![0, 1, 2, 1], 2, 2, &[true, true, true]);
        assert!(saliency(&cas).iter().all(|&s| s));
        let cas = cas_from(vec![0, 1, 2, 1], 2, 2, &[false, true, false]);
        assert_eq!(saliency(&cas), vec![false, true, false, true]);
    }

    #[test]
    fn ground_truth_schema() {
        let g: GroundTruth = serde_json::from_str(r#"{"image": "x", "boxes": [[1,2,3,4]]}"#).unwrap();
        assert_eq!(g.boxes, vec![BBox::new(1, 2, 3, 4)]);
        assert_eq!(serde_json::to_string(&g).unwrap(), r#"{"image":"x","boxes":[[1,2,3,4]]}"#);
    }
}
