use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{featurize_patches, AttentionMap, FeatureMap, FeaturizeError, Featurizer, PatchFeatures, Provenance};
use crate::geometry::{apply, Transform, TransformSet};
use crate::raster::{Image, Raster};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    /// One transform at a time; memory stays constant in the set size.
    #[default]
    Sequential,
    /// All transformed images featurized together, contributions evaluated
    /// in parallel and reduced in set order.
    Batched,
}

#[derive(Clone, Debug, Default)]
pub struct UpsampleOptions {
    pub mode: UpsampleMode,
    /// L2-normalize each patch vector before averaging. Off by default.
    pub l2_normalize: bool,
    pub image_id: Option<String>,
}

/// Nearest-neighbour sampling from a pixel coordinate to a patch-grid index:
/// pixel `p` of an axis of length `extent` reads patch `⌊p · grid / extent⌋`.
#[inline]
pub fn nearest_patch_index(p: usize, extent: usize, grid: usize) -> usize {
    p * grid / extent
}

/// For every pixel of the original frame, the flat patch index it reads after
/// resizing the transformed grid and undoing the transform.
fn pullback(t: &Transform, height: usize, width: usize, grid: (usize, usize)) -> Result<Vec<usize>, FeaturizeError> {
    let (th, tw) = t.output_dims(height, width);
    let (_, _, map) = t.invert().source_map(th, tw)?;
    let (gh, gw) = grid;
    Ok(map
        .into_iter()
        .map(|q| {
            let (qy, qx) = (q / tw, q % tw);
            nearest_patch_index(qy, th, gh) * gw + nearest_patch_index(qx, tw, gw)
        })
        .collect())
}

struct Accumulator {
    features: Vec<f64>,
    attention: Vec<f64>,
    dim: usize,
    l2_normalize: bool,
}

impl Accumulator {
    fn new(pixels: usize, dim: usize, l2_normalize: bool) -> Self {
        Self {
            features: vec![0.0; pixels * dim],
            attention: vec![0.0; pixels],
            dim,
            l2_normalize,
        }
    }

    fn patch_vectors(&self, pf: &PatchFeatures) -> Vec<f64> {
        let mut v: Vec<f64> = pf.features.data().iter().map(|&x| x as f64).collect();
        if self.l2_normalize {
            for chunk in v.chunks_exact_mut(self.dim) {
                let n = chunk.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    chunk.iter_mut().for_each(|x| *x /= n);
                }
            }
        }
        v
    }

    fn add(&mut self, pf: &PatchFeatures, pullback: &[usize]) {
        let patches = self.patch_vectors(pf);
        let attn = pf.attention.data();
        let d = self.dim;
        for (p, &g) in pullback.iter().enumerate() {
            let dst = &mut self.features[p * d..(p + 1) * d];
            for (acc, &v) in dst.iter_mut().zip(&patches[g * d..(g + 1) * d]) {
                *acc += v;
            }
            self.attention[p] += attn[g] as f64;
        }
    }

    /// Materializes one transform's contribution as its own buffer.
    fn contribution(&self, pf: &PatchFeatures, pullback: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let patches = self.patch_vectors(pf);
        let attn = pf.attention.data();
        let d = self.dim;
        let mut feats = Vec::with_capacity(pullback.len() * d);
        let mut att = Vec::with_capacity(pullback.len());
        for &g in pullback {
            feats.extend_from_slice(&patches[g * d..(g + 1) * d]);
            att.push(attn[g] as f64);
        }
        (feats, att)
    }

    fn add_buffers(&mut self, feats: &[f64], att: &[f64]) {
        for (a, v) in self.features.iter_mut().zip(feats) {
            *a += v;
        }
        for (a, v) in self.attention.iter_mut().zip(att) {
            *a += v;
        }
    }
}

/// Transform-ensemble upsampling: for each `t` in the set, featurize `t(image)`,
/// nearest-neighbour resize the patch grid to the transformed image size,
/// apply `t⁻¹`, and average over the set. Attention is processed identically.
///
/// Sums are accumulated in `f64` in set order, so both modes give identical
/// output.
pub fn upsample<F: Featurizer + ?Sized>(
    backend: &F,
    image: &Image,
    set: &TransformSet,
    opts: &UpsampleOptions,
) -> Result<(FeatureMap, AttentionMap), FeaturizeError> {
    if set.is_empty() {
        return Err(FeaturizeError::EmptyTransformSet);
    }
    let desc = backend.descriptor().clone();
    let (h, w) = (image.height(), image.width());
    let d = desc.hidden_dim as usize;

    // Validate every transformed frame up front so no work is wasted.
    for t in set.transforms() {
        let (th, tw) = t.output_dims(h, w);
        t.source_map(h, w)?;
        desc.check_input(th, tw)?;
    }

    let grid_of = |t: &Transform| {
        let (th, tw) = t.output_dims(h, w);
        desc.grid_dims(th, tw).expect("input constraints checked")
    };

    let mut acc = Accumulator::new(h * w, d, opts.l2_normalize);
    match opts.mode {
        UpsampleMode::Sequential => {
            for t in set.transforms() {
                let transformed = apply(t, image)?;
                let pf = featurize_patches(backend, &transformed)?;
                acc.add(&pf, &pullback(t, h, w, grid_of(t))?);
            }
        }
        UpsampleMode::Batched => {
            let transformed: Vec<Image> = set
                .transforms()
                .par_iter()
                .map(|t| apply(t, image))
                .collect::<Result<_, _>>()?;
            let outputs = backend.featurize_batch(&transformed)?;
            drop(transformed);
            let contributions: Vec<(Vec<f64>, Vec<f64>)> = set
                .transforms()
                .par_iter()
                .zip(outputs.par_iter())
                .map(|(t, pf)| Ok(acc.contribution(pf, &pullback(t, h, w, grid_of(t))?)))
                .collect::<Result<_, FeaturizeError>>()?;
            for (f, a) in &contributions {
                acc.add_buffers(f, a);
            }
        }
    }

    let n = set.len() as f64;
    let features: Vec<f32> = acc.features.iter().map(|v| (v / n) as f32).collect();
    let attention: Vec<f32> = acc.attention.iter().map(|v| (v / n) as f32).collect();
    let provenance = Provenance::new(desc, set.doc().clone(), opts.image_id.clone(), opts.l2_normalize);

    let fm = FeatureMap {
        data: Raster::new(h, w, d, features).expect("accumulator sized to image"),
        provenance: Some(provenance.clone()),
    };
    if !fm.data.is_finite() {
        return Err(FeaturizeError::NonFinite("upsampled features"));
    }
    let am = AttentionMap {
        data: Raster::new(h, w, 1, attention).expect("accumulator sized to image"),
        provenance: Some(provenance),
    };
    Ok((fm, am))
}
