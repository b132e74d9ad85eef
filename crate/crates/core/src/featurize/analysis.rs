use nalgebra::{DMatrix, SymmetricEigen};

use super::{FeatureMap, FeaturizeError};
use crate::raster::{Image, Raster};

/// Relative eigenvalue floor below which a principal axis is treated as flat.
const FLAT_RATIO: f64 = 1e-9;

/// Projects every pixel onto the top three principal components of the map's
/// own feature cloud and min-max scales each component to a colour channel.
///
/// Each axis is signed so its largest-magnitude loading is positive. Axes with
/// no variance come out as mid-gray; a constant map is uniformly gray.
pub fn pca_rgb(fm: &FeatureMap) -> Result<Image, FeaturizeError> {
    let (h, w, d) = fm.data.shape();
    if d < 3 {
        return Err(FeaturizeError::TooFewChannels(d, 3));
    }
    let n = h * w;
    let mut mean = vec![0.0f64; d];
    for px in fm.data.pixels() {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0f64; d];
    for px in fm.data.pixels() {
        for k in 0..d {
            centered[k] = px[k] as f64 - mean[k];
        }
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / n as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let gray = Raster::filled(h, w, 3, 128u8);
    let scale = mean.iter().map(|m| m * m).sum::<f64>().max(1.0);
    if cov.trace() <= 1e-12 * scale {
        log::warn!("feature map has zero variance; PCA image is uniform gray");
        return Ok(gray);
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]];

    let mut axes: Vec<Option<Vec<f64>>> = Vec::with_capacity(3);
    for &idx in order.iter().take(3) {
        if eig.eigenvalues[idx] <= FLAT_RATIO * top {
            axes.push(None);
            continue;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let lead = v
            .iter()
            .enumerate()
            .fold(0usize, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        axes.push(Some(v));
    }

    let mut proj = vec![0.0f64; n * 3];
    for (p, px) in fm.data.pixels().enumerate() {
        for (c, axis) in axes.iter().enumerate() {
            if let Some(v) = axis {
                proj[p * 3 + c] = px.iter().zip(&mean).zip(v).map(|((&x, m), a)| (x as f64 - m) * a).sum();
            }
        }
    }

    let mut out = gray;
    for (c, axis) in axes.iter().enumerate() {
        if axis.is_none() {
            continue;
        }
        let (lo, hi) = proj
            .iter()
            .skip(c)
            .step_by(3)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        if range <= 0.0 {
            continue;
        }
        for (p, px) in out.data_mut().chunks_exact_mut(3).enumerate() {
            px[c] = ((proj[p * 3 + c] - lo) / range * 255.0).round() as u8;
        }
    }
    Ok(out)
}

/// Result of a nearest-feature search.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointMatch {
    /// `H × W × 1` cosine similarities in `[-1, 1]`.
    pub similarity: Raster<f32>,
    /// `(x, y)` of the most similar target pixel (first in raster order on ties).
    pub best: (usize, usize),
    pub best_similarity: f32,
}

/// Cosine similarity between the query pixel's feature and every target pixel.
pub fn keypoint_query(query: &FeatureMap, point: (usize, usize), target: &FeatureMap) -> Result<KeypointMatch, FeaturizeError> {
    if query.dim() != target.dim() {
        return Err(FeaturizeError::DimensionMismatch(query.dim(), target.dim()));
    }
    let (x, y) = point;
    if x >= query.width() || y >= query.height() {
        return Err(FeaturizeError::PointOutOfBounds {
            x,
            y,
            width: query.width(),
            height: query.height(),
        });
    }
    let q: Vec<f64> = query.data.pixel(y, x).iter().map(|&v| v as f64).collect();
    let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if qn == 0.0 {
        return Err(FeaturizeError::DegenerateQuery);
    }

    let mut sims = Vec::with_capacity(target.data.pixel_count());
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, px) in target.data.pixels().enumerate() {
        let (mut dot, mut nn) = (0.0f64, 0.0f64);
        for (a, &b) in q.iter().zip(px) {
            dot += a * b as f64;
            nn += (b as f64) * (b as f64);
        }
        let s = if nn == 0.0 { 0.0 } else { (dot / (qn * nn.sqrt())).clamp(-1.0, 1.0) };
        if s > best.1 {
            best = (i, s);
        }
        sims.push(s as f32);
    }
    let tw = target.width();
    Ok(KeypointMatch {
        similarity: Raster::new(target.height(), tw, 1, sims).expect("one value per pixel"),
        best: (best.0 % tw, best.0 / tw),
        best_similarity: best.1 as f32,
    })
}
