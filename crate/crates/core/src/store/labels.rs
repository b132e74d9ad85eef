use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::StoreError;
use crate::pixelclf::LabelMask;

/// Run-length labels, `{"<class>": [[row, start, len], ...]}`. Class 0
/// erases. Classes are painted in ascending order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RunLengthLabels(pub BTreeMap<u32, Vec<[u32; 3]>>);

impl RunLengthLabels {
    pub fn encode(mask: &LabelMask) -> Self {
        let mut out: BTreeMap<u32, Vec<[u32; 3]>> = BTreeMap::new();
        for (row, line) in mask.labels.chunks_exact(mask.width.max(1)).enumerate() {
            let mut x = 0;
            while x < line.len() {
                let c = line[x];
                let start = x;
                while x < line.len() && line[x] == c {
                    x += 1;
                }
                if c != 0 {
                    out.entry(c).or_default().push([row as u32, start as u32, (x - start) as u32]);
                }
            }
        }
        Self(out)
    }

    /// Paints the runs onto `base` (or an unlabeled mask of the given size).
    pub fn paint(&self, base: &mut LabelMask) -> Result<(), StoreError> {
        let (h, w) = (base.height, base.width);
        for (&class, runs) in &self.0 {
            for &[row, start, len] in runs {
                let (row, start, len) = (row as usize, start as usize, len as usize);
                if row >= h || start.checked_add(len).map_or(true, |e| e > w) {
                    return Err(StoreError::Invalid(format!(
                        "run [{row}, {start}, {len}] of class {class} outside {h}x{w}"
                    )));
                }
                base.labels[row * w + start..row * w + start + len].fill(class);
            }
        }
        Ok(())
    }

    pub fn decode(&self, height: usize, width: usize) -> Result<LabelMask, StoreError> {
        let mut m = LabelMask::unlabeled(height, width);
        self.paint(&mut m)?;
        Ok(m)
    }

    pub fn classes(&self) -> Vec<u32> {
        self.0.keys().copied().collect()
    }
}

/// A brush stroke through integer pixel positions `(x, y)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrushStroke {
    pub class: u32,
    pub radius: u32,
    pub points: Vec<[i64; 2]>,
}

/// Pixels covered by `stroke`, clipped to the image, as run-length labels.
///
/// A disc is stamped at every step along each segment (steps are
/// `max(|dx|, |dy|)`, positions rounded half up). Pixel `q` is inside the
/// stamp at `c` when `⌊|q − c| + ½⌋ < radius`, so radius 1 covers one pixel.
pub fn rasterize_stroke(stroke: &BrushStroke, height: usize, width: usize) -> RunLengthLabels {
    let mut covered = vec![false; height * width];
    let r = stroke.radius as i64;
    let mut stamp = |cx: i64, cy: i64| {
        for y in (cy - r).max(0)..=(cy + r).min(height as i64 - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(width as i64 - 1) {
                let d = (((x - cx) * (x - cx) + (y - cy) * (y - cy)) as f64).sqrt();
                if ((d + 0.5).floor() as i64) < r {
                    covered[y as usize * width + x as usize] = true;
                }
            }
        }
    };
    let pts = &stroke.points;
    if let Some(&[x, y]) = pts.first() {
        stamp(x, y);
    }
    for seg in pts.windows(2) {
        let ([x0, y0], [x1, y1]) = (seg[0], seg[1]);
        let n = (x1 - x0).abs().max((y1 - y0).abs());
        for i in 1..=n {
            let t = i as f64 / n as f64;
            let x = (x0 as f64 + t * (x1 - x0) as f64 + 0.5).floor() as i64;
            let y = (y0 as f64 + t * (y1 - y0) as f64 + 0.5).floor() as i64;
            stamp(x, y);
        }
    }
    let mask = LabelMask {
        height,
        width,
        labels: covered.iter().map(|&c| if c { stroke.class } else { 0 }).collect(),
    };
    if stroke.class == 0 {
        // an eraser stroke: report covered pixels under class 0
        let mut runs = RunLengthLabels::encode(&LabelMask {
            labels: covered.iter().map(|&c| c as u32).collect(),
            ..mask
        });
        if let Some(v) = runs.0.remove(&1) {
            runs.0.insert(0, v);
        }
        return runs;
    }
    RunLengthLabels::encode(&mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_radius_one_is_one_pixel() {
        let s = BrushStroke {
            class: 2,
            radius: 1,
            points: vec![[3, 4]],
        };
        let rle = rasterize_stroke(&s, 10, 10);
        assert_eq!(rle.0[&2], vec![[4, 3, 1]]);
    }

    #[test]
    fn radius_two_is_three_by_three() {
        let s = BrushStroke {
            class: 1,
            radius: 2,
            points: vec![[5, 5]],
        };
        let m = rasterize_stroke(&s, 11, 11).decode(11, 11).unwrap();
        // d = 1 rounds to 1 < 2; d = √2 rounds to 1 < 2; d = 2 does not
        assert_eq!(m.labeled_count(), 9);
    }

    #[test]
    fn stroke_is_clipped() {
        let s = BrushStroke {
            class: 1,
            radius: 3,
            points: vec![[-10, 0], [2, 0]],
        };
        let m = rasterize_stroke(&s, 5, 5).decode(5, 5).unwrap();
        assert!(m.labeled_count() > 0);
        assert_eq!(m.labels[4 * 5 + 4], 0);
    }

    #[test]
    fn rle_round_trip_and_bounds() {
        let m = LabelMask::new(2, 5, vec![0, 1, 1, 2, 2, 3, 3, 0, 0, 1]).unwrap();
        let rle = RunLengthLabels::encode(&m);
        assert_eq!(serde_json::to_string(&rle).unwrap(), r#"{"1":[[0,1,2],[1,4,1]],"2":[[0,3,2]],"3":[[1,0,2]]}"#);
        assert_eq!(rle.decode(2, 5).unwrap(), m);
        let bad: RunLengthLabels = serde_json::from_str(r#"{"1": [[0, 4, 2]]}"#).unwrap();
        assert!(bad.decode(2, 5).is_err());
    }
}
