use super::LabelMask;
use crate::Raster;

pub const SMOOTH_MAX_ITER: usize = 5;

/// Probability-weighted majority vote in a `(2r+1)²` window, repeated until
/// nothing changes or `min(iterations, 5)` passes have run.
///
/// Each labeled neighbour votes for its own label with the probability the
/// classifier gave that label there (`classes[k]` names channel `k`; labels
/// outside `classes` vote with weight 1). Unlabeled pixels neither vote nor
/// change. The current label wins ties, then the lowest label.
pub fn smooth(labels: &LabelMask, probabilities: &Raster<f32>, classes: &[u32], radius: usize, iterations: usize) -> LabelMask {
    let (h, w) = (labels.height, labels.width);
    assert_eq!((probabilities.height(), probabilities.width()), (h, w), "probabilities must match labels");
    let mut present = labels.classes();
    present.dedup();
    let slot = |l: u32| present.binary_search(&l).expect("label present");
    let weight = |p: usize, l: u32| match classes.iter().position(|&c| c == l) {
        Some(k) => probabilities.data()[p * probabilities.channels() + k] as f64,
        None => 1.0,
    };

    let mut cur = labels.labels.clone();
    let r = radius as i64;
    let mut scores = vec![0.0f64; present.len()];
    for _ in 0..iterations.min(SMOOTH_MAX_ITER) {
        let mut next = cur.clone();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let p = (y as usize) * w + x as usize;
                if cur[p] == 0 {
                    continue;
                }
                scores.iter_mut().for_each(|s| *s = 0.0);
                for qy in (y - r).max(0)..=(y + r).min(h as i64 - 1) {
                    for qx in (x - r).max(0)..=(x + r).min(w as i64 - 1) {
                        let q = qy as usize * w + qx as usize;
                        if cur[q] != 0 {
                            scores[slot(cur[q])] += weight(q, cur[q]);
                        }
                    }
                }
                let own = slot(cur[p]);
                let mut best = own;
                for (i, &s) in scores.iter().enumerate() {
                    if s > scores[best] {
                        best = i;
                    }
                }
                next[p] = present[best];
            }
        }
        if next == cur {
            break;
        }
        cur = next;
    }
    LabelMask {
        height: h,
        width: w,
        labels: cur,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(h: usize, w: usize, k: usize) -> Raster<f32> {
        Raster::filled(h, w, k, 1.0)
    }

    #[test]
    fn uniform_field_is_fixed() {
        let m = LabelMask::new(6, 6, vec![2; 36]).unwrap();
        assert_eq!(smooth(&m, &ones(6, 6, 2), &[1, 2], 2, 5), m);
    }

    #[test]
    fn speckle_removed() {
        let mut labels = vec![1; 100];
        labels[44] = 2;
        let m = LabelMask::new(10, 10, labels).unwrap();
        let out = smooth(&m, &ones(10, 10, 2), &[1, 2], 2, 5);
        assert!(out.labels.iter().all(|&l| l == 1));
    }

    #[test]
    fn unlabeled_pixels_stay() {
        let m = LabelMask::new(1, 3, vec![1, 0, 2]).unwrap();
        let out = smooth(&m, &ones(1, 3, 2), &[1, 2], 1, 5);
        assert_eq!(out.labels[1], 0);
    }
}
