use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::CasError;
use crate::featurize::FeatureMap;

/// Points per block in parallel reductions; fixed so sums are schedule-independent.
const BLOCK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub clusters: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once the relative inertia improvement drops below this.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            clusters: 80,
            seed: 0,
            max_iter: 300,
            tol: 1e-4,
        }
    }
}

/// Result of clustering every pixel's feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    /// `C × D`, row-major.
    pub centroids: Vec<f64>,
    pub dim: usize,
    /// Cluster id per pixel, raster order.
    pub assignment: Vec<u32>,
    pub height: usize,
    pub width: usize,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
    pub seed: u64,
    /// Cluster count asked for; `cluster_count()` may be smaller after
    /// duplicate collapse.
    pub requested: usize,
}

impl ClusterModel {
    pub fn cluster_count(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn areas(&self) -> Vec<usize> {
        let mut a = vec![0usize; self.cluster_count()];
        for &c in &self.assignment {
            a[c as usize] += 1;
        }
        a
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for (c, cen) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, cen);
        if d < best.1 {
            best = (c as u32, d);
        }
    }
    best
}

/// Greedy farthest-point seeding: a seeded random first pixel, then repeatedly
/// the pixel farthest from every chosen centroid (lowest index on ties). Stops
/// early when every remaining point duplicates a centroid.
fn farthest_point_init(points: &[f64], dim: usize, k: usize, seed: u64) -> Vec<f64> {
    let n = points.len() / dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.gen_range(0..n);
    let mut centroids = points[first * dim..(first + 1) * dim].to_vec();
    let mut min_d: Vec<f64> = points
        .par_chunks_exact(dim)
        .map(|p| sq_dist(p, &centroids[..dim]))
        .collect();
    while centroids.len() / dim < k {
        let (idx, far) = min_d
            .iter()
            .enumerate()
            .fold((0usize, -1.0f64), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        if far <= 0.0 {
            break;
        }
        let c = points[idx * dim..(idx + 1) * dim].to_vec();
        min_d
            .par_iter_mut()
            .zip(points.par_chunks_exact(dim))
            .for_each(|(m, p)| *m = m.min(sq_dist(p, &c)));
        centroids.extend(c);
    }
    centroids
}

/// Lloyd's k-means over the pixels of a feature map.
pub fn kmeans(fm: &FeatureMap, cfg: &KMeansConfig) -> Result<ClusterModel, CasError> {
    let points: Vec<f64> = fm.data.data().iter().map(|&v| v as f64).collect();
    kmeans_points(&points, fm.dim(), fm.height(), fm.width(), cfg)
}

/// k-means over `height·width` row-major points of dimension `dim`.
pub fn kmeans_points(points: &[f64], dim: usize, height: usize, width: usize, cfg: &KMeansConfig) -> Result<ClusterModel, CasError> {
    let n = height * width;
    assert_eq!(points.len(), n * dim, "point buffer does not match dims");
    if cfg.clusters == 0 {
        return Err(CasError::InvalidParameter("cluster count must be positive".into()));
    }
    if n < cfg.clusters {
        return Err(CasError::TooFewPixels {
            pixels: n,
            clusters: cfg.clusters,
        });
    }

    let mut centroids = farthest_point_init(points, dim, cfg.clusters, cfg.seed);
    let k = centroids.len() / dim;
    if k < cfg.clusters {
        log::warn!("only {k} distinct feature vectors; clustering with C = {k} instead of {}", cfg.clusters);
    }

    let mut assignment = vec![0u32; n];
    let mut dists = vec![0.0f64; n];
    let mut history: Vec<f64> = Vec::new();
    for iter in 0..cfg.max_iter.max(1) {
        assignment
            .par_chunks_mut(BLOCK)
            .zip(dists.par_chunks_mut(BLOCK))
            .zip(points.par_chunks(BLOCK * dim))
            .for_each(|((a, d), p)| {
                for ((ai, di), pt) in a.iter_mut().zip(d.iter_mut()).zip(p.chunks_exact(dim)) {
                    let (c, dd) = nearest(pt, &centroids, dim);
                    *ai = c;
                    *di = dd;
                }
            });
        let inertia: f64 = dists.par_chunks(BLOCK).map(|c| c.iter().sum::<f64>()).collect::<Vec<_>>().iter().sum();
        history.push(inertia);

        let converged = inertia == 0.0
            || (iter > 0 && {
                let prev = history[iter - 1];
                (prev - inertia) / prev < cfg.tol
            });
        if converged || iter + 1 == cfg.max_iter {
            break;
        }

        // block sums reduced in block order
        let partials: Vec<(Vec<f64>, Vec<usize>)> = assignment
            .par_chunks(BLOCK)
            .zip(points.par_chunks(BLOCK * dim))
            .map(|(a, p)| {
                let mut sums = vec![0.0f64; k * dim];
                let mut counts = vec![0usize; k];
                for (&c, pt) in a.iter().zip(p.chunks_exact(dim)) {
                    let c = c as usize;
                    counts[c] += 1;
                    for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(pt) {
                        *s += v;
                    }
                }
                (sums, counts)
            })
            .collect();
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (s, c) in &partials {
            for (a, b) in sums.iter_mut().zip(s) {
                *a += b;
            }
            for (a, b) in counts.iter_mut().zip(c) {
                *a += b;
            }
        }

        let mut taken: Vec<usize> = Vec::new();
        for c in 0..k {
            let dst = &mut centroids[c * dim..(c + 1) * dim];
            if counts[c] > 0 {
                for (d, s) in dst.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *d = s / counts[c] as f64;
                }
            } else {
                // reseed from the point farthest from its current centroid
                let far = dists
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken.contains(i))
                    .fold((usize::MAX, -1.0f64), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
                if far.0 != usize::MAX && far.1 > 0.0 {
                    taken.push(far.0);
                    dst.copy_from_slice(&points[far.0 * dim..(far.0 + 1) * dim]);
                }
            }
        }
    }

    // drop clusters that ended up empty and relabel densely
    let mut counts = vec![0usize; k];
    for &a in &assignment {
        counts[a as usize] += 1;
    }
    let mut remap = vec![u32::MAX; k];
    let mut kept = Vec::with_capacity(centroids.len());
    let mut next = 0u32;
    for c in 0..k {
        if counts[c] > 0 {
            remap[c] = next;
            next += 1;
            kept.extend_from_slice(&centroids[c * dim..(c + 1) * dim]);
        }
    }
    if (next as usize) < k {
        log::warn!("{} empty clusters dropped", k - next as usize);
        for a in assignment.iter_mut() {
            *a = remap[*a as usize];
        }
    }

    Ok(ClusterModel {
        centroids: kept,
        dim,
        assignment,
        height,
        width,
        inertia: *history.last().expect("at least one iteration"),
        inertia_history: history,
        seed: cfg.seed,
        requested: cfg.clusters,
    })
}
