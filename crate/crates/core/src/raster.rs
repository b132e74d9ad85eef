//! Row-major `H×W×C` rasters shared by every stage of the pipeline.
//!
//! Images, feature maps, attention maps and probability maps are all
//! rasters; only the element type and channel count differ.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RasterError {
    #[error("raster dimensions must be non-zero, got {height}x{width}x{channels}")]
    Empty {
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("buffer length {actual} does not match {height}x{width}x{channels}")]
    Length {
        height: usize,
        width: usize,
        channels: usize,
        actual: usize,
    },
}

/// A dense `height × width × channels` raster stored row-major, channel-last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Raster<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

/// An 8-bit pixel raster, the unit of ingestion.
pub type Image = Raster<u8>;

impl<T: Copy> Raster<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self, RasterError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(RasterError::Empty {
                height,
                width,
                channels,
            });
        }
        if data.len() != height * width * channels {
            return Err(RasterError::Length {
                height,
                width,
                channels,
                actual: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// # Panics
    /// Panics if any dimension is zero.
    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "raster dimensions must be non-zero");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds a raster by evaluating `f(y, x, k)` for every element.
    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "raster dimensions must be non-zero");
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for k in 0..channels {
                    data.push(f(y, x, k));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`.
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let i = self.index(y, x);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [T] {
        let i = self.index(y, x);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, k: usize) -> T {
        self.data[self.index(y, x) + k]
    }

    /// Iterates over per-pixel channel slices in raster-scan order.
    pub fn pixels(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.channels)
    }

    pub fn map<U: Copy>(&self, mut f: impl FnMut(T) -> U) -> Raster<U> {
        Raster {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Extracts a single channel as a one-channel raster.
    pub fn channel(&self, k: usize) -> Raster<T> {
        assert!(k < self.channels, "channel {k} out of range");
        Raster {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.pixels().map(|p| p[k]).collect(),
        }
    }
}

impl Raster<f32> {
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Image {
    /// Per-pixel mean over channels, as `f64` in `[0, 255]`.
    pub fn to_gray_f64(&self) -> Vec<f64> {
        let c = self.channels as f64;
        self.pixels()
            .map(|p| p.iter().map(|&v| v as f64).sum::<f64>() / c)
            .collect()
    }

    pub fn from_dynamic(img: &image::DynamicImage) -> Self {
        use image::ColorType;
        match img.color() {
            ColorType::L8 | ColorType::L16 | ColorType::La8 | ColorType::La16 => {
                let g = img.to_luma8();
                Raster::new(g.height() as usize, g.width() as usize, 1, g.into_raw())
                    .expect("decoded image is non-empty")
            }
            _ => {
                let rgb = img.to_rgb8();
                Raster::new(rgb.height() as usize, rgb.width() as usize, 3, rgb.into_raw())
                    .expect("decoded image is non-empty")
            }
        }
    }

    pub fn to_dynamic(&self) -> image::DynamicImage {
        let (h, w) = (self.height as u32, self.width as u32);
        match self.channels {
            1 => image::DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(w, h, self.data.clone()).expect("buffer matches dims"),
            ),
            3 => image::DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(w, h, self.data.clone()).expect("buffer matches dims"),
            ),
            4 => image::DynamicImage::ImageRgba8(
                image::RgbaImage::from_raw(w, h, self.data.clone()).expect("buffer matches dims"),
            ),
            c => {
                // fold extra channels down to gray
                let g = self.to_gray_f64().into_iter().map(|v| v.round() as u8).collect();
                log::warn!("{c}-channel image converted to gray for encoding");
                image::DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, g).expect("buffer matches dims"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths() {
        assert!(matches!(Raster::new(2, 2, 1, vec![0u8; 3]), Err(RasterError::Length { .. })));
        assert!(matches!(Raster::<u8>::new(0, 2, 1, vec![]), Err(RasterError::Empty { .. })));
    }

    #[test]
    fn indexing_is_row_major_channel_last() {
        let r = Raster::from_fn(2, 3, 2, |y, x, k| (y * 100 + x * 10 + k) as i32);
        assert_eq!(r.get(1, 2, 1), 121);
        assert_eq!(r.pixel(0, 1), &[10, 11]);
        assert_eq!(r.channel(1).data(), &[1, 11, 21, 101, 111, 121]);
    }
}
