//! Generated images with known answers, for benchmarks and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detect::BBox;
use crate::pixelclf::LabelMask;
use crate::Image;

/// HSV (all in `0..1`) to 8-bit RGB.
fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

fn noisy(rng: &mut ChaCha8Rng, rgb: [f64; 3], amp: f64) -> [u8; 3] {
    rgb.map(|v| (v + rng.gen_range(-amp..=amp)).round().clamp(0.0, 255.0) as u8)
}

/// Range of blob semi-axes as fractions of the image side.
pub const BLOB_RADIUS: (f64, f64) = (0.28, 0.38);

/// One image with a single salient object.
#[derive(Clone, Debug)]
pub struct BlobSample {
    pub id: String,
    pub image: Image,
    pub mask: Vec<bool>,
    pub bbox: BBox,
}

/// `n` square images of side `size`, each an ellipse near the centre in a
/// hue well away from the background's. Meant for a backend whose attention
/// peaks at the image centre.
pub fn blob_dataset(n: usize, size: usize, seed: u64) -> Vec<BlobSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let bg_hue: f64 = rng.gen();
            let fg_hue = bg_hue + rng.gen_range(0.33..0.67);
            let bg = hsv(bg_hue, rng.gen_range(0.5..0.9), rng.gen_range(0.5..0.9));
            let fg = hsv(fg_hue, rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0));
            let c = (size as f64 - 1.0) / 2.0;
            let (cy, cx) = (c + rng.gen_range(-3.0..=3.0), c + rng.gen_range(-3.0..=3.0));
            let s = size as f64;
            let (ry, rx) = (rng.gen_range(BLOB_RADIUS.0 * s..BLOB_RADIUS.1 * s), rng.gen_range(BLOB_RADIUS.0 * s..BLOB_RADIUS.1 * s));
            let mask: Vec<bool> = (0..size * size)
                .map(|p| {
                    let (y, x) = ((p / size) as f64, (p % size) as f64);
                    ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0
                })
                .collect();
            let mut data = Vec::with_capacity(size * size * 3);
            for &m in &mask {
                data.extend(noisy(&mut rng, if m { fg } else { bg }, 6.0));
            }
            let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
            for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                let (y, x) = ((p / size) as u32, (p % size) as u32);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
            BlobSample {
                id: format!("blob_{i:03}"),
                image: Image::new(size, size, 3, data).expect("dims"),
                mask,
                bbox: BBox::new(x0, y0, x1, y1),
            }
        })
        .collect()
}

/// Fraction of pixels given a training label in the weak-supervision fixtures.
pub const LABEL_FRACTION: f64 = 0.03;

/// An image with dense ground truth and sparse training labels.
#[derive(Clone, Debug)]
pub struct WeakFixture {
    pub image: Image,
    pub truth: LabelMask,
    pub labels: LabelMask,
}

impl WeakFixture {
    pub fn classes(&self) -> Vec<u32> {
        self.truth.classes()
    }
}

/// Labels a random `fraction` of pixels with their true class.
pub fn sprinkle(truth: &LabelMask, fraction: f64, seed: u64) -> LabelMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = truth
        .labels
        .iter()
        .map(|&l| if rng.gen_bool(fraction) { l } else { 0 })
        .collect();
    LabelMask {
        height: truth.height,
        width: truth.width,
        labels,
    }
}

/// Three noisy flat-colour regions split by two slanted lines; colours differ
/// in both hue and brightness.
pub fn color_regions(size: usize, seed: u64) -> WeakFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let colors = [[220.0, 40.0, 40.0], [90.0, 230.0, 220.0], [20.0, 30.0, 70.0]];
    let s = size as f64;
    let (a, b) = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
    let class_at = |y: usize, x: usize| -> u32 {
        let (y, x) = (y as f64, x as f64);
        if x < s / 3.0 + a * (y - s / 2.0) {
            1
        } else if x < 2.0 * s / 3.0 + b * (y - s / 2.0) {
            2
        } else {
            3
        }
    };
    let mut data = Vec::with_capacity(size * size * 3);
    let mut truth = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let c = class_at(y, x);
            truth.push(c);
            data.extend(noisy(&mut rng, colors[c as usize - 1], 10.0));
        }
    }
    let truth = LabelMask::new(size, size, truth).expect("dims");
    let labels = sprinkle(&truth, LABEL_FRACTION, seed.wrapping_add(1));
    WeakFixture {
        image: Image::new(size, size, 3, data).expect("dims"),
        truth,
        labels,
    }
}

/// Ring radii as fractions of the image side.
pub const RING_INNER: f64 = 0.2;
pub const RING_OUTER: f64 = 0.3;

/// Uniform noise texture (mean 120) with a flat centred ring of value 120.
/// Classes: 1 outside the ring, 2 the ring, 3 inside. Inside and outside
/// share the same local statistics, and the ring differs from them only in
/// variance, so no smoothed intensity reveals which side of it a pixel is on.
pub fn interiority(size: usize, seed: u64) -> WeakFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let c = (s - 1.0) / 2.0;
    let (r_in, r_out) = (RING_INNER * s, RING_OUTER * s);
    let mut data = Vec::with_capacity(size * size * 3);
    let mut truth = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let r = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
            let class = if r < r_in {
                3
            } else if r < r_out {
                2
            } else {
                1
            };
            truth.push(class);
            let v = if class == 2 { 120.0 } else { rng.gen_range(60.0..180.0) };
            data.extend([v, v, v].map(|v: f64| v.round() as u8));
        }
    }
    let truth = LabelMask::new(size, size, truth).expect("dims");
    let labels = sprinkle(&truth, LABEL_FRACTION, seed.wrapping_add(1));
    WeakFixture {
        image: Image::new(size, size, 3, data).expect("dims"),
        truth,
        labels,
    }
}
