//! Classical filter bank: Gaussian smoothing and finite-difference derivatives.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PixelClfError;
use crate::{Image, Raster};

pub const DEFAULT_SCALES: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];
/// Gaussian kernels are cut off at this many standard deviations.
pub const TRUNCATE: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Filter {
    Intensity,
    Gaussian { sigma: f64 },
    SobelMagnitude { sigma: f64 },
    LaplacianOfGaussian { sigma: f64 },
    /// Larger Hessian eigenvalue.
    HessianMax { sigma: f64 },
    /// Smaller Hessian eigenvalue.
    HessianMin { sigma: f64 },
    /// `G(sigma_a) - G(sigma_b)`.
    DifferenceOfGaussians { sigma_a: f64, sigma_b: f64 },
}

impl Filter {
    pub fn name(&self) -> String {
        match self {
            Filter::Intensity => "intensity".into(),
            Filter::Gaussian { sigma } => format!("gaussian(s={sigma})"),
            Filter::SobelMagnitude { sigma } => format!("sobel(s={sigma})"),
            Filter::LaplacianOfGaussian { sigma } => format!("log(s={sigma})"),
            Filter::HessianMax { sigma } => format!("hessian_max(s={sigma})"),
            Filter::HessianMin { sigma } => format!("hessian_min(s={sigma})"),
            Filter::DifferenceOfGaussians { sigma_a, sigma_b } => format!("dog(s={sigma_a},{sigma_b})"),
        }
    }

    fn sigmas(&self) -> Vec<f64> {
        match *self {
            Filter::Intensity => vec![],
            Filter::Gaussian { sigma }
            | Filter::SobelMagnitude { sigma }
            | Filter::LaplacianOfGaussian { sigma }
            | Filter::HessianMax { sigma }
            | Filter::HessianMin { sigma } => vec![sigma],
            Filter::DifferenceOfGaussians { sigma_a, sigma_b } => vec![sigma_a, sigma_b],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorMode {
    /// Filters run on the channel mean.
    #[default]
    Gray,
    /// Filters run on every input channel; output is channel-major.
    PerChannel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassicalRecipe {
    pub color: ColorMode,
    pub filters: Vec<Filter>,
}

impl ClassicalRecipe {
    /// Raw intensity, then per scale: Gaussian, Sobel magnitude, LoG and both
    /// Hessian eigenvalues, then DoG for each consecutive scale pair.
    pub fn standard(scales: &[f64]) -> Result<Self, PixelClfError> {
        if let Some(&s) = scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(PixelClfError::InvalidSigma(s));
        }
        let mut filters = vec![Filter::Intensity];
        for &sigma in scales {
            filters.extend([
                Filter::Gaussian { sigma },
                Filter::SobelMagnitude { sigma },
                Filter::LaplacianOfGaussian { sigma },
                Filter::HessianMax { sigma },
                Filter::HessianMin { sigma },
            ]);
        }
        for pair in scales.windows(2) {
            filters.push(Filter::DifferenceOfGaussians {
                sigma_a: pair[0],
                sigma_b: pair[1],
            });
        }
        Ok(Self {
            color: ColorMode::Gray,
            filters,
        })
    }

    pub fn validate(&self) -> Result<(), PixelClfError> {
        for f in &self.filters {
            if let Some(&s) = f.sigmas().iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
                return Err(PixelClfError::InvalidSigma(s));
            }
        }
        Ok(())
    }

    pub fn channels_for(&self, input_channels: usize) -> usize {
        match self.color {
            ColorMode::Gray => self.filters.len(),
            ColorMode::PerChannel => self.filters.len() * input_channels,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("recipe serializes")
    }

    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassicalFeatureStack {
    pub data: Raster<f32>,
    pub recipe: ClassicalRecipe,
    pub channel_names: Vec<String>,
}

/// Index into `0..n` under half-sample symmetric reflection (`dcba|abcd|dcba`).
pub fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (TRUNCATE * sigma + 0.5) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// 2-D plane of f64 values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    fn at(&self, y: i64, x: i64) -> f64 {
        self.data[reflect_index(y, self.height) * self.width + reflect_index(x, self.width)]
    }

    fn map2(&self, f: impl Fn(i64, i64) -> f64) -> Plane {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height as i64 {
            for x in 0..self.width as i64 {
                data.push(f(y, x));
            }
        }
        Plane {
            height: self.height,
            width: self.width,
            data,
        }
    }

    fn correlate_axis(&self, k: &[f64], horizontal: bool) -> Plane {
        let r = (k.len() / 2) as i64;
        self.map2(|y, x| {
            k.iter()
                .enumerate()
                .map(|(i, w)| {
                    let o = i as i64 - r;
                    if horizontal {
                        w * self.at(y, x + o)
                    } else {
                        w * self.at(y + o, x)
                    }
                })
                .sum()
        })
    }

    pub fn gaussian(&self, sigma: f64) -> Plane {
        let k = gaussian_kernel(sigma);
        self.correlate_axis(&k, true).correlate_axis(&k, false)
    }

    /// Sobel gradient magnitude, normalized so a unit ramp has magnitude 1.
    pub fn sobel_magnitude(&self) -> Plane {
        self.map2(|y, x| {
            let p = |dy, dx| self.at(y + dy, x + dx);
            let gx = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1) - p(-1, -1) - 2.0 * p(0, -1) - p(1, -1)) / 8.0;
            let gy = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1) - p(-1, -1) - 2.0 * p(-1, 0) - p(-1, 1)) / 8.0;
            (gx * gx + gy * gy).sqrt()
        })
    }

    /// Second derivatives `(Ixx, Iyy, Ixy)` by central differences.
    pub fn hessian(&self) -> (Plane, Plane, Plane) {
        let xx = self.map2(|y, x| self.at(y, x + 1) - 2.0 * self.at(y, x) + self.at(y, x - 1));
        let yy = self.map2(|y, x| self.at(y + 1, x) - 2.0 * self.at(y, x) + self.at(y - 1, x));
        let xy = self.map2(|y, x| {
            (self.at(y + 1, x + 1) - self.at(y + 1, x - 1) - self.at(y - 1, x + 1) + self.at(y - 1, x - 1)) / 4.0
        });
        (xx, yy, xy)
    }
}

struct ScaleCache {
    sigma: f64,
    smooth: Plane,
    hessian: Option<(Plane, Plane, Plane)>,
}

struct Scales<'a> {
    plane: &'a Plane,
    entries: Vec<ScaleCache>,
}

impl Scales<'_> {
    fn smooth(&mut self, sigma: f64) -> usize {
        if let Some(i) = self.entries.iter().position(|c| c.sigma == sigma) {
            return i;
        }
        self.entries.push(ScaleCache {
            sigma,
            smooth: self.plane.gaussian(sigma),
            hessian: None,
        });
        self.entries.len() - 1
    }

    fn hessian(&mut self, sigma: f64) -> &(Plane, Plane, Plane) {
        let i = self.smooth(sigma);
        let e = &mut self.entries[i];
        e.hessian.get_or_insert_with(|| e.smooth.hessian())
    }
}

fn eval_filters(plane: &Plane, filters: &[Filter]) -> Vec<Plane> {
    let mut scales = Scales {
        plane,
        entries: Vec::new(),
    };
    filters
        .iter()
        .map(|f| match *f {
            Filter::Intensity => plane.clone(),
            Filter::Gaussian { sigma } => {
                let i = scales.smooth(sigma);
                scales.entries[i].smooth.clone()
            }
            Filter::SobelMagnitude { sigma } => {
                let i = scales.smooth(sigma);
                scales.entries[i].smooth.sobel_magnitude()
            }
            Filter::LaplacianOfGaussian { sigma } => {
                let (xx, yy, _) = scales.hessian(sigma);
                zip_planes(xx, yy, |a, b| a + b)
            }
            Filter::HessianMax { sigma } | Filter::HessianMin { sigma } => {
                let (xx, yy, xy) = scales.hessian(sigma);
                let sign = if matches!(f, Filter::HessianMax { .. }) { 1.0 } else { -1.0 };
                let mut out = zip_planes(xx, yy, |a, b| 0.5 * (a + b));
                for (i, v) in out.data.iter_mut().enumerate() {
                    let (a, b, c) = (xx.data[i], yy.data[i], xy.data[i]);
                    *v += sign * (0.25 * (a - b) * (a - b) + c * c).sqrt();
                }
                out
            }
            Filter::DifferenceOfGaussians { sigma_a, sigma_b } => {
                let a = scales.smooth(sigma_a);
                let b = scales.smooth(sigma_b);
                zip_planes(&scales.entries[a].smooth, &scales.entries[b].smooth, |p, q| p - q)
            }
        })
        .collect()
}

fn zip_planes(a: &Plane, b: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
    Plane {
        height: a.height,
        width: a.width,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// Runs `recipe` over `image`. Intensities are used on their 0..255 scale.
pub fn classical_features(image: &Image, recipe: &ClassicalRecipe) -> Result<ClassicalFeatureStack, PixelClfError> {
    recipe.validate()?;
    let (h, w, c) = image.shape();
    let planes: Vec<(String, Plane)> = match recipe.color {
        ColorMode::Gray => vec![(String::new(), Plane {
            height: h,
            width: w,
            data: image.to_gray_f64(),
        })],
        ColorMode::PerChannel => (0..c)
            .map(|k| {
                (format!("c{k}:"), Plane {
                    height: h,
                    width: w,
                    data: image.channel(k).data().iter().map(|&v| v as f64).collect(),
                })
            })
            .collect(),
    };

    let outputs: Vec<(String, Plane)> = {
        use rayon::prelude::*;
        planes
            .par_iter()
            .flat_map_iter(|(prefix, plane)| {
                eval_filters(plane, &recipe.filters)
                    .into_iter()
                    .zip(&recipe.filters)
                    .map(move |(p, f)| (format!("{prefix}{}", f.name()), p))
            })
            .collect()
    };
    let d = outputs.len();
    let data = Raster::from_fn(h, w, d, |y, x, k| outputs[k].1.data[y * w + x] as f32);
    Ok(ClassicalFeatureStack {
        data,
        recipe: recipe.clone(),
        channel_names: outputs.into_iter().map(|(n, _)| n).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_recipe_has_thirty_channels() {
        let r = ClassicalRecipe::standard(&DEFAULT_SCALES).unwrap();
        assert_eq!(r.filters.len(), 30);
        assert_eq!(r.filters[0], Filter::Intensity);
        assert!(ClassicalRecipe::standard(&[1.0, 0.0]).is_err());
        assert!(ClassicalRecipe::standard(&[-2.0]).is_err());
    }

    #[test]
    fn reflection_matches_half_sample_symmetric() {
        let got: Vec<usize> = (-4..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-1, 1), 0);
    }

    #[test]
    fn kernel_is_normalized_and_truncated() {
        let k = gaussian_kernel(2.0);
        assert_eq!(k.len(), 17);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_image_has_zero_derivatives() {
        let img = Image::filled(12, 9, 1, 77);
        let stack = classical_features(&img, &ClassicalRecipe::standard(&[1.0, 2.0, 16.0]).unwrap()).unwrap();
        for (k, f) in stack.recipe.filters.iter().enumerate() {
            let expect = match f {
                Filter::Intensity | Filter::Gaussian { .. } => 77.0,
                _ => 0.0,
            };
            for v in stack.data.channel(k).data() {
                assert!((v - expect).abs() < 1e-3, "{} gave {v}", f.name());
            }
        }
    }

    #[test]
    fn per_channel_mode_multiplies_channels() {
        let img = Image::from_fn(5, 5, 3, |y, x, k| (y * 10 + x + k) as u8);
        let mut r = ClassicalRecipe::standard(&[1.0]).unwrap();
        r.color = ColorMode::PerChannel;
        let stack = classical_features(&img, &r).unwrap();
        assert_eq!(stack.data.channels(), 18);
        assert_eq!(stack.channel_names[6], "c1:intensity");
    }

    #[test]
    fn checksum_tracks_recipe() {
        let a = ClassicalRecipe::standard(&[1.0, 2.0]).unwrap();
        let b = ClassicalRecipe::standard(&[1.0, 3.0]).unwrap();
        assert_ne!(a.checksum(), b.checksum());
        assert_eq!(a.checksum(), a.clone().checksum());
    }
}
