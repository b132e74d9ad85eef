//! Class-agnostic segmentation (CAS).
//!
//! Pixels are clustered with k-means on their upsampled features. Clusters
//! whose attention density (attention mass per pixel) beats the mean density
//! are foreground. The modal cosine distance between foreground and
//! background centroids gives a per-image semantic distance, and clusters are
//! merged by complete linkage until no pair is closer than `λ · d_sem`.

mod kmeans;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurize::{AttentionMap, FeatureMap};
use crate::indexed::{self, IndexedPngError};

pub use kmeans::{kmeans, kmeans_points, ClusterModel, KMeansConfig};

/// Histogram resolution for the modal distance.
pub const DEFAULT_BINS: usize = 64;
/// Cosine distances live in `[0, 2]`.
pub const DISTANCE_RANGE: f64 = 2.0;

#[derive(Debug, Error)]
pub enum CasError {
    #[error("{pixels} pixels cannot form {clusters} clusters")]
    TooFewPixels { pixels: usize, clusters: usize },
    #[error("attention map {attn:?} does not match cluster raster {model:?}")]
    ShapeMismatch { model: (usize, usize), attn: (usize, usize) },
    #[error("attention not normalized: total attention is zero")]
    AttentionNotNormalized,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Png(#[from] IndexedPngError),
}

/// Attention bookkeeping for one cluster or class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Density {
    pub area: usize,
    pub attention_mass: f64,
    pub rho_a: f64,
}

/// Per-group densities and the foreground split.
#[derive(Clone, Debug, PartialEq)]
pub struct DensitySplit {
    pub groups: Vec<Density>,
    pub foreground: Vec<bool>,
    pub mean_rho: f64,
}

/// Attention density of each group in `labels` (ids `0..count`) and the
/// `ρ_A > mean ρ_A` foreground rule. When nothing strictly beats the mean the
/// densest group (lowest id on ties) is foreground.
pub fn density_split(labels: &[u32], count: usize, attention: &[f32]) -> Result<DensitySplit, CasError> {
    let total: f64 = attention.iter().map(|&a| a as f64).sum();
    if total <= 0.0 {
        return Err(CasError::AttentionNotNormalized);
    }
    let mut area = vec![0usize; count];
    let mut mass = vec![0.0f64; count];
    for (&l, &a) in labels.iter().zip(attention) {
        area[l as usize] += 1;
        mass[l as usize] += a as f64;
    }
    let groups: Vec<Density> = area
        .iter()
        .zip(&mass)
        .map(|(&area, &attention_mass)| Density {
            area,
            attention_mass,
            rho_a: if area == 0 { 0.0 } else { attention_mass / area as f64 },
        })
        .collect();
    let mean_rho = groups.iter().map(|g| g.rho_a).sum::<f64>() / count as f64;
    let mut foreground: Vec<bool> = groups.iter().map(|g| g.rho_a > mean_rho).collect();
    if !foreground.iter().any(|&f| f) {
        let densest = groups
            .iter()
            .enumerate()
            .fold(0usize, |best, (i, g)| if g.rho_a > groups[best].rho_a { i } else { best });
        foreground[densest] = true;
    }
    Ok(DensitySplit {
        groups,
        foreground,
        mean_rho,
    })
}

/// Per-cluster attention density and foreground flags.
pub fn attention_density(model: &ClusterModel, attn: &AttentionMap) -> Result<DensitySplit, CasError> {
    if (attn.height(), attn.width()) != (model.height, model.width) {
        return Err(CasError::ShapeMismatch {
            model: (model.height, model.width),
            attn: (attn.height(), attn.width()),
        });
    }
    density_split(&model.assignment, model.cluster_count(), attn.values())
}

/// `1 − cos(a, b)`; a zero vector is treated as orthogonal to everything.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na * nb)).clamp(0.0, DISTANCE_RANGE)
}

/// Centre of the most populated of `bins` equal bins over `[0, 2]`
/// (lowest bin on ties). `None` for an empty sample.
pub fn modal_distance(distances: &[f64], bins: usize) -> Option<f64> {
    if distances.is_empty() || bins == 0 {
        return None;
    }
    let width = DISTANCE_RANGE / bins as f64;
    let mut counts = vec![0usize; bins];
    for &d in distances {
        let b = ((d / width).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let mode = counts
        .iter()
        .enumerate()
        .fold(0usize, |best, (i, &c)| if c > counts[best] { i } else { best });
    Some((mode as f64 + 0.5) * width)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticDistance {
    pub value: f64,
    /// No background (or no foreground) cluster: the value is the median
    /// pairwise centroid distance instead of the modal fg/bg distance.
    pub degenerate: bool,
}

/// Modal cosine distance over every (foreground, background) centroid pair.
pub fn semantic_distance(model: &ClusterModel, foreground: &[bool], bins: usize) -> SemanticDistance {
    let k = model.cluster_count();
    let mut pairs = Vec::new();
    for f in (0..k).filter(|&c| foreground[c]) {
        for b in (0..k).filter(|&c| !foreground[c]) {
            pairs.push(cosine_distance(model.centroid(f), model.centroid(b)));
        }
    }
    if let Some(value) = modal_distance(&pairs, bins) {
        return SemanticDistance {
            value,
            degenerate: false,
        };
    }
    log::warn!("degenerate split: no foreground/background pair; using median pairwise distance");
    let mut all = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            all.push(cosine_distance(model.centroid(i), model.centroid(j)));
        }
    }
    all.sort_by(f64::total_cmp);
    let value = match all.len() {
        0 => 0.0,
        n if n % 2 == 1 => all[n / 2],
        n => 0.5 * (all[n / 2 - 1] + all[n / 2]),
    };
    SemanticDistance {
        value,
        degenerate: true,
    }
}

/// Complete-linkage agglomeration over a symmetric distance matrix: the
/// closest pair of groups (lowest indices on ties) merges while its linkage
/// is strictly below `threshold`. Returns a group id per item, numbered by
/// each group's lowest member.
pub fn complete_linkage(dist: &[Vec<f64>], threshold: f64) -> Vec<usize> {
    let n = dist.len();
    let mut d: Vec<Vec<f64>> = dist.to_vec();
    let mut active: Vec<bool> = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in (0..n).filter(|&i| active[i]) {
            for j in (i + 1..n).filter(|&j| active[j]) {
                if d[i][j] < threshold && best.map_or(true, |(_, _, bd)| d[i][j] < bd) {
                    best = Some((i, j, d[i][j]));
                }
            }
        }
        let Some((i, j, _)) = best else { break };
        for k in 0..n {
            let v = d[i][k].max(d[j][k]);
            d[i][k] = v;
            d[k][i] = v;
        }
        active[j] = false;
        for o in owner.iter_mut() {
            if *o == j {
                *o = i;
            }
        }
    }
    let mut ids = vec![usize::MAX; n];
    let mut next = 0;
    for item in 0..n {
        let root = owner[item];
        if ids[root] == usize::MAX {
            ids[root] = next;
            next += 1;
        }
    }
    owner.iter().map(|&r| ids[r]).collect()
}

/// One class of a CAS map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CasClass {
    pub id: u32,
    pub area: usize,
    pub attention_mass: f64,
    #[serde(rename = "rho_A")]
    pub rho_a: f64,
    pub foreground: bool,
    /// k-means clusters merged into this class.
    pub clusters: Vec<u32>,
}

/// An image partition into unnamed classes, ids sorted by descending area.
#[derive(Clone, Debug, PartialEq)]
pub struct CasMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub classes: Vec<CasClass>,
    pub d_sem: f64,
    pub lambda: f64,
    pub seed: u64,
    pub degenerate_split: bool,
}

#[derive(Serialize, Deserialize)]
struct SidecarClass {
    id: u32,
    area: usize,
    #[serde(rename = "rho_A")]
    rho_a: f64,
    foreground: bool,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    classes: Vec<SidecarClass>,
    d_sem: f64,
    lambda: f64,
    seed: u64,
}

impl CasMap {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn foreground_ids(&self) -> Vec<u32> {
        self.classes.iter().filter(|c| c.foreground).map(|c| c.id).collect()
    }

    pub fn is_foreground(&self, id: u32) -> bool {
        self.classes[id as usize].foreground
    }

    pub fn to_png(&self) -> Result<Vec<u8>, CasError> {
        Ok(indexed::encode(self.height, self.width, &self.labels)?)
    }

    /// JSON sidecar `{classes: [{id, area, rho_A, foreground}], d_sem, lambda, seed}`.
    pub fn sidecar_json(&self) -> String {
        let doc = Sidecar {
            classes: self
                .classes
                .iter()
                .map(|c| SidecarClass {
                    id: c.id,
                    area: c.area,
                    rho_a: c.rho_a,
                    foreground: c.foreground,
                })
                .collect(),
            d_sem: self.d_sem,
            lambda: self.lambda,
            seed: self.seed,
        };
        serde_json::to_string_pretty(&doc).expect("sidecar serializes")
    }

    /// Rebuilds a map from its PNG and sidecar. Attention masses are restored
    /// as `ρ_A · area` and cluster membership is not recorded.
    pub fn from_files(png: &[u8], sidecar: &str) -> Result<Self, CasError> {
        let (height, width, labels) = indexed::decode(png)?;
        let doc: Sidecar = serde_json::from_str(sidecar).map_err(|e| CasError::InvalidParameter(format!("sidecar: {e}")))?;
        Ok(Self {
            height,
            width,
            labels,
            classes: doc
                .classes
                .into_iter()
                .map(|c| CasClass {
                    id: c.id,
                    area: c.area,
                    attention_mass: c.rho_a * c.area as f64,
                    rho_a: c.rho_a,
                    foreground: c.foreground,
                    clusters: Vec::new(),
                })
                .collect(),
            d_sem: doc.d_sem,
            lambda: doc.lambda,
            seed: doc.seed,
            degenerate_split: false,
        })
    }
}

/// Merges clusters whose complete-linkage cosine distance stays below
/// `λ · d_sem` and recomputes densities and foreground flags per class.
pub fn merge(model: &ClusterModel, attn: &AttentionMap, d_sem: &SemanticDistance, lambda: f64) -> Result<CasMap, CasError> {
    if !(lambda > 0.0) {
        return Err(CasError::InvalidParameter(format!("lambda must be positive, got {lambda}")));
    }
    if (attn.height(), attn.width()) != (model.height, model.width) {
        return Err(CasError::ShapeMismatch {
            model: (model.height, model.width),
            attn: (attn.height(), attn.width()),
        });
    }
    let k = model.cluster_count();
    let dist: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| cosine_distance(model.centroid(i), model.centroid(j))).collect())
        .collect();
    let groups = complete_linkage(&dist, lambda * d_sem.value);
    let group_count = groups.iter().max().map_or(0, |m| m + 1);

    let pixel_groups: Vec<u32> = model.assignment.iter().map(|&c| groups[c as usize] as u32).collect();
    let split = density_split(&pixel_groups, group_count, attn.values())?;

    // relabel by descending area, ties by lowest member cluster
    let mut order: Vec<usize> = (0..group_count).collect();
    order.sort_by(|&a, &b| split.groups[b].area.cmp(&split.groups[a].area).then(a.cmp(&b)));
    let mut new_id = vec![0u32; group_count];
    for (rank, &g) in order.iter().enumerate() {
        new_id[g] = rank as u32;
    }

    let classes = order
        .iter()
        .enumerate()
        .map(|(rank, &g)| CasClass {
            id: rank as u32,
            area: split.groups[g].area,
            attention_mass: split.groups[g].attention_mass,
            rho_a: split.groups[g].rho_a,
            foreground: split.foreground[g],
            clusters: (0..k).filter(|&c| groups[c] == g).map(|c| c as u32).collect(),
        })
        .collect();

    Ok(CasMap {
        height: model.height,
        width: model.width,
        labels: pixel_groups.iter().map(|&g| new_id[g as usize]).collect(),
        classes,
        d_sem: d_sem.value,
        lambda,
        seed: model.seed,
        degenerate_split: d_sem.degenerate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CasConfig {
    pub kmeans: KMeansConfig,
    pub lambda: f64,
    pub bins: usize,
}

impl Default for CasConfig {
    fn default() -> Self {
        Self {
            kmeans: KMeansConfig::default(),
            lambda: 1.0,
            bins: DEFAULT_BINS,
        }
    }
}

/// Full CAS pipeline: k-means, attention split, semantic distance, merge.
pub fn segment(fm: &FeatureMap, attn: &AttentionMap, cfg: &CasConfig) -> Result<CasMap, CasError> {
    let model = kmeans(fm, &cfg.kmeans)?;
    let split = attention_density(&model, attn)?;
    let d_sem = semantic_distance(&model, &split.foreground, cfg.bins);
    merge(&model, attn, &d_sem, cfg.lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Raster;

    fn model_with(centroids: &[&[f64]], assignment: Vec<u32>, width: usize) -> ClusterModel {
        let dim = centroids[0].len();
        ClusterModel {
            centroids: centroids.iter().flat_map(|c| c.iter().copied()).collect(),
            dim,
            height: assignment.len() / width,
            width,
            assignment,
            inertia: 0.0,
            inertia_history: vec![0.0],
            seed: 0,
            requested: centroids.len(),
        }
    }

    #[test]
    fn density_example() {
        let mut labels = vec![0u32; 10];
        labels.extend(vec![1u32; 90]);
        let mut attn = vec![0.05f32; 10];
        attn.extend(vec![0.5f32 / 90.0; 90]);
        let s = density_split(&labels, 2, &attn).unwrap();
        assert!((s.groups[0].rho_a - 0.05).abs() < 1e-7);
        assert!((s.groups[1].rho_a - 0.005_555_6).abs() < 1e-7);
        assert!((s.mean_rho - 0.027_777_8).abs() < 1e-7);
        assert_eq!(s.foreground, vec![true, false]);
    }

    #[test]
    fn uniform_attention_falls_back_to_cluster_zero() {
        let labels = vec![0, 0, 1, 1, 2, 2];
        let s = density_split(&labels, 3, &[1.0; 6]).unwrap();
        assert_eq!(s.foreground, vec![true, false, false]);
    }

    #[test]
    fn all_mass_in_one_cluster() {
        let labels = vec![0, 1, 1, 2, 2, 2];
        let s = density_split(&labels, 3, &[0.0, 0.5, 0.5, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s.foreground, vec![false, true, false]);
    }

    #[test]
    fn zero_attention_is_an_error() {
        assert!(matches!(
            density_split(&[0, 1], 2, &[0.0, 0.0]),
            Err(CasError::AttentionNotNormalized)
        ));
    }

    #[test]
    fn modal_distance_examples() {
        assert_eq!(modal_distance(&[0.30, 0.31, 0.80], 64), Some(0.296875));
        assert_eq!(modal_distance(&[1.0, 1.0], 64), Some(1.015625));
        assert_eq!(modal_distance(&[2.0], 64), Some(1.984375));
        assert_eq!(modal_distance(&[], 64), None);
        // tie between bins 9 and 25 goes low
        assert_eq!(modal_distance(&[0.30, 0.80], 64), Some(0.296875));
    }

    #[test]
    fn orthogonal_fg_bg_pairs() {
        let m = model_with(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 2.0]], vec![0, 1, 2, 2], 2);
        let d = semantic_distance(&m, &[true, false, false], 64);
        assert!(!d.degenerate);
        assert_eq!(d.value, 1.015625);
    }

    #[test]
    fn no_background_is_degenerate() {
        let m = model_with(&[&[1.0, 0.0], &[0.0, 1.0]], vec![0, 1], 2);
        let d = semantic_distance(&m, &[true, true], 64);
        assert!(d.degenerate);
        assert!((d.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn complete_linkage_blocks_chaining() {
        // d(0,1) = 0.1, d(0,2) = d(1,2) = 0.9
        let dist = vec![vec![0.0, 0.1, 0.9], vec![0.1, 0.0, 0.9], vec![0.9, 0.9, 0.0]];
        assert_eq!(complete_linkage(&dist, 0.2), vec![0, 0, 1]);
        assert_eq!(complete_linkage(&dist, 1e-9), vec![0, 1, 2]);
        assert_eq!(complete_linkage(&dist, 10.0), vec![0, 0, 0]);
        // single linkage would chain 0-1-2 here; complete linkage must not
        let chain = vec![vec![0.0, 0.15, 0.3], vec![0.15, 0.0, 0.15], vec![0.3, 0.15, 0.0]];
        assert_eq!(complete_linkage(&chain, 0.2), vec![0, 0, 1]);
    }

    #[test]
    fn merge_extremes() {
        let m = model_with(
            &[&[1.0, 0.0], &[0.9, 0.1], &[0.0, 1.0]],
            vec![0, 0, 0, 1, 1, 2, 2, 2, 2],
            3,
        );
        let attn = AttentionMap::new(Raster::new(3, 3, 1, vec![0.3, 0.3, 0.3, 0.0, 0.0, 0.025, 0.025, 0.025, 0.025]).unwrap());
        let d = SemanticDistance {
            value: 0.5,
            degenerate: false,
        };
        let tiny = merge(&m, &attn, &d, 1e-9).unwrap();
        assert_eq!(tiny.class_count(), 3);
        // class 0 is the largest (cluster 2, four pixels)
        assert_eq!(tiny.classes[0].clusters, vec![2]);
        assert_eq!(tiny.classes[0].area, 4);
        let huge = merge(&m, &attn, &d, 1e6).unwrap();
        assert_eq!(huge.class_count(), 1);
        assert!(huge.classes[0].foreground);
        assert!(matches!(merge(&m, &attn, &d, 0.0), Err(CasError::InvalidParameter(_))));
    }

    #[test]
    fn sidecar_round_trip() {
        let m = model_with(&[&[1.0, 0.0], &[0.0, 1.0]], vec![0, 0, 1, 1, 1, 1], 3);
        let attn = AttentionMap::new(Raster::new(2, 3, 1, vec![0.4, 0.4, 0.05, 0.05, 0.05, 0.05]).unwrap());
        let cas = merge(
            &m,
            &attn,
            &SemanticDistance {
                value: 0.3,
                degenerate: false,
            },
            1.0,
        )
        .unwrap();
        let json = cas.sidecar_json();
        assert!(json.contains("\"rho_A\""));
        let back = CasMap::from_files(&cas.to_png().unwrap(), &json).unwrap();
        assert_eq!(back.labels, cas.labels);
        assert_eq!(back.foreground_ids(), cas.foreground_ids());
        assert_eq!(back.d_sem, 0.3);
    }
}
