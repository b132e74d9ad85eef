use image::imageops::{self, FilterType};
use serde::{Deserialize, Serialize};

use super::StoreError;
use crate::featurize::BackendDescriptor;
use crate::pixelclf::LabelMask;
use crate::{Image, Raster};

/// How an image was brought to a backend's working size: resized to
/// `resized`, then zero-padded on the bottom and right to `padded`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConformMap {
    pub original: (usize, usize),
    pub resized: (usize, usize),
    pub padded: (usize, usize),
}

impl ConformMap {
    pub fn is_identity(&self) -> bool {
        self.original == self.resized && self.resized == self.padded
    }

    pub fn padding(&self) -> (usize, usize) {
        (self.padded.0 - self.resized.0, self.padded.1 - self.resized.1)
    }

    /// Labels at native resolution into the conformed frame (padding unlabeled).
    pub fn forward_labels(&self, mask: &LabelMask) -> LabelMask {
        assert_eq!((mask.height, mask.width), self.original, "mask is not at native size");
        let r = resize_nearest(&raster_of(mask), self.resized.0, self.resized.1);
        let labels = pad(&r, self.padded).into_data();
        LabelMask {
            height: self.padded.0,
            width: self.padded.1,
            labels,
        }
    }

    /// Labels in the conformed frame back to native resolution.
    pub fn restore_labels(&self, mask: &LabelMask) -> LabelMask {
        assert_eq!((mask.height, mask.width), self.padded, "mask is not in the conformed frame");
        let cropped = crop(&raster_of(mask), self.resized);
        let r = resize_nearest(&cropped, self.original.0, self.original.1);
        LabelMask {
            height: self.original.0,
            width: self.original.1,
            labels: r.into_data(),
        }
    }

    /// Any per-pixel raster in the conformed frame back to native resolution.
    pub fn restore<T: Copy + Default>(&self, r: &Raster<T>) -> Raster<T> {
        assert_eq!((r.height(), r.width()), self.padded, "raster is not in the conformed frame");
        resize_nearest(&crop(r, self.resized), self.original.0, self.original.1)
    }
}

fn raster_of(mask: &LabelMask) -> Raster<u32> {
    Raster::new(mask.height, mask.width, 1, mask.labels.clone()).expect("mask dims")
}

fn crop<T: Copy>(r: &Raster<T>, (h, w): (usize, usize)) -> Raster<T> {
    Raster::from_fn(h, w, r.channels(), |y, x, k| r.get(y, x, k))
}

fn pad<T: Copy + Default>(r: &Raster<T>, (h, w): (usize, usize)) -> Raster<T> {
    Raster::from_fn(h, w, r.channels(), |y, x, k| {
        if y < r.height() && x < r.width() {
            r.get(y, x, k)
        } else {
            T::default()
        }
    })
}

/// Nearest-neighbour resize sampling source pixel `⌊(i + ½) · src / dst⌋`.
pub fn resize_nearest<T: Copy>(r: &Raster<T>, height: usize, width: usize) -> Raster<T> {
    let (sh, sw) = (r.height(), r.width());
    let src = |i: usize, dst: usize, src: usize| (((2 * i + 1) * src) / (2 * dst)).min(src - 1);
    Raster::from_fn(height, width, r.channels(), |y, x, k| r.get(src(y, height, sh), src(x, width, sw), k))
}

/// Bilinear (triangle-filter) resize of an 8-bit image.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Image {
    if (img.height(), img.width()) == (height, width) {
        return img.clone();
    }
    let resized = match img.to_dynamic() {
        image::DynamicImage::ImageLuma8(b) => {
            image::DynamicImage::ImageLuma8(imageops::resize(&b, width as u32, height as u32, FilterType::Triangle))
        }
        other => image::DynamicImage::ImageRgb8(imageops::resize(&other.to_rgb8(), width as u32, height as u32, FilterType::Triangle)),
    };
    Image::from_dynamic(&resized)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conformed {
    pub image: Image,
    pub map: ConformMap,
}

/// Resizes `image` to `target` (if given), then pads bottom/right so both
/// sides are multiples of the backend's input multiple and at least one patch.
pub fn conform(image: &Image, desc: &BackendDescriptor, target: Option<(usize, usize)>) -> Result<Conformed, StoreError> {
    let (h, w) = (image.height(), image.width());
    if h == 0 || w == 0 {
        return Err(StoreError::Invalid("zero-sized image".into()));
    }
    let m = desc.input_multiple.max(1) as usize;
    let p = desc.patch_size as usize;
    let resized = match target {
        Some((th, tw)) => {
            if th == 0 || tw == 0 || th % m != 0 || tw % m != 0 {
                return Err(StoreError::Invalid(format!(
                    "target {th}x{tw} is not a positive multiple of {m}"
                )));
            }
            (th, tw)
        }
        None => (h, w),
    };
    let round_up = |v: usize| v.max(p).div_ceil(m) * m;
    let padded = (round_up(resized.0), round_up(resized.1));
    let map = ConformMap {
        original: (h, w),
        resized,
        padded,
    };
    let scaled = resize_bilinear(image, resized.0, resized.1);
    let image = if padded == resized { scaled } else { pad(&scaled, padded) };
    Ok(Conformed { image, map })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(p: u32, m: u32) -> BackendDescriptor {
        BackendDescriptor {
            name: "t".into(),
            patch_size: p,
            stride: m,
            hidden_dim: 3,
            input_multiple: m,
        }
    }

    #[test]
    fn conformant_image_is_identity() {
        let img = Image::from_fn(28, 42, 3, |y, x, k| (y + x + k) as u8);
        let c = conform(&img, &desc(14, 14), None).unwrap();
        assert!(c.map.is_identity());
        assert_eq!(c.image, img);
    }

    #[test]
    fn non_square_is_padded_and_restored() {
        let img = Image::from_fn(30, 17, 1, |y, x, _| (y * 3 + x) as u8);
        let c = conform(&img, &desc(8, 4), None).unwrap();
        assert_eq!(c.map.padded, (32, 20));
        assert_eq!(c.map.padding(), (2, 3));
        assert_eq!(c.image.get(29, 16, 0), img.get(29, 16, 0));
        assert_eq!(c.image.get(31, 19, 0), 0);
        let labels = LabelMask::new(30, 17, (0..30 * 17).map(|i| (i % 5) as u32).collect()).unwrap();
        let there = c.map.forward_labels(&labels);
        assert_eq!(c.map.restore_labels(&there), labels);
    }

    #[test]
    fn bad_target_rejected() {
        let img = Image::filled(10, 10, 3, 0);
        assert!(conform(&img, &desc(14, 14), Some((500, 518))).is_err());
    }
}
