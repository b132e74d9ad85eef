//! Palette-indexed PNG encoding for class rasters (CAS maps, label masks,
//! predictions). Index 0 is black; other indices get well-separated colours.

use std::io::Cursor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IndexedPngError {
    #[error("class index {0} does not fit an 8-bit palette")]
    TooManyClasses(u32),
    #[error("unsupported PNG layout: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Decode(#[from] png::DecodingError),
    #[error(transparent)]
    Encode(#[from] png::EncodingError),
}

/// Deterministic palette colour for a class index.
pub fn palette_color(index: u8) -> [u8; 3] {
    if index == 0 {
        return [0, 0, 0];
    }
    // golden-angle hue walk, fixed saturation/value
    let hue = (index as f64 * 137.507_764) % 360.0;
    let (s, v) = (0.75, 0.95);
    let c = v * s;
    let x = c * (1.0 - ((hue / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (hue / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

/// Encodes `height × width` class indices as an 8-bit palette PNG.
pub fn encode(height: usize, width: usize, indices: &[u32]) -> Result<Vec<u8>, IndexedPngError> {
    assert_eq!(indices.len(), height * width, "index buffer does not match dims");
    let max = indices.iter().copied().max().unwrap_or(0);
    if max > 255 {
        return Err(IndexedPngError::TooManyClasses(max));
    }
    let palette: Vec<u8> = (0..=max as u8).flat_map(palette_color).collect();
    let bytes: Vec<u8> = indices.iter().map(|&i| i as u8).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(Cursor::new(&mut out), width as u32, height as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(palette);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&bytes)?;
    }
    Ok(out)
}

/// Decodes an indexed or 8-bit grayscale PNG into `(height, width, indices)`.
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<u32>), IndexedPngError> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bit_depth = info.bit_depth as u8;
    match (info.color_type, info.bit_depth) {
        (png::ColorType::Indexed, _) | (png::ColorType::Grayscale, png::BitDepth::Eight) => {}
        (ct, bd) => return Err(IndexedPngError::Unsupported(format!("{ct:?} at {bd:?}"))),
    }
    let line = info.line_size;
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let row = &buf[y * line..(y + 1) * line];
        for x in 0..w {
            let v = match bit_depth {
                8 => row[x],
                bits => {
                    let per = 8 / bits as usize;
                    let byte = row[x / per];
                    let shift = 8 - bits as usize * (x % per + 1);
                    (byte >> shift) & ((1u16 << bits) - 1) as u8
                }
            };
            out.push(v as u32);
        }
    }
    Ok((h, w, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let idx: Vec<u32> = (0..35).map(|i| (i * 7 % 13) as u32).collect();
        let png = encode(5, 7, &idx).unwrap();
        assert_eq!(decode(&png).unwrap(), (5, 7, idx));
    }

    #[test]
    fn rejects_wide_indices() {
        assert!(matches!(encode(1, 1, &[256]), Err(IndexedPngError::TooManyClasses(256))));
    }

    #[test]
    fn palette_is_distinct_for_small_indices() {
        let colors: Vec<_> = (0..32u8).map(palette_color).collect();
        for i in 0..colors.len() {
            for j in i + 1..colors.len() {
                assert_ne!(colors[i], colors[j], "{i} vs {j}");
            }
        }
    }
}
