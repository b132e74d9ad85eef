//! Exact, invertible image-plane transforms.
//!
//! Every transform is a pixel permutation (wrap-around shifts, flips, quarter
//! turns and compositions of those), so applying a transform followed by its
//! inverse reproduces the input bit for bit. The same code path moves `u8`
//! image pixels before featurization and `f64` feature vectors afterwards.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::raster::Raster;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("shift ({dx}, {dy}) does not fit a {height}x{width} raster")]
    ShiftTooLarge {
        dx: i32,
        dy: i32,
        height: usize,
        width: usize,
    },
    #[error("rotation must be 1, 2 or 3 quarter turns, got {0}")]
    InvalidRotation(u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Wrap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Mirror left-right (`x -> W-1-x`).
    Horizontal,
    /// Mirror top-bottom (`y -> H-1-y`).
    Vertical,
}

/// An invertible image-plane transform.
///
/// `Shift` moves content by `(dx, dy)` pixels with wrap-around, so a positive
/// `dx` moves content to the right. `Rotation` turns the raster clockwise by
/// `k` quarter turns; odd `k` swaps height and width. `Compose` applies its
/// members first to last.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Identity,
    Shift {
        dx: i32,
        dy: i32,
        #[serde(default)]
        boundary: Boundary,
    },
    Flip {
        axis: Axis,
    },
    Rotation {
        k: u8,
    },
    Compose {
        transforms: Vec<Transform>,
    },
}

impl Transform {
    pub fn shift(dx: i32, dy: i32) -> Self {
        Transform::Shift {
            dx,
            dy,
            boundary: Boundary::Wrap,
        }
    }

    pub fn flip(axis: Axis) -> Self {
        Transform::Flip { axis }
    }

    pub fn rotation(k: u8) -> Self {
        Transform::Rotation { k }
    }

    pub fn compose(transforms: Vec<Transform>) -> Self {
        Transform::Compose { transforms }
    }

    pub fn invert(&self) -> Transform {
        match self {
            Transform::Identity => Transform::Identity,
            Transform::Shift { dx, dy, boundary } => Transform::Shift {
                dx: -dx,
                dy: -dy,
                boundary: *boundary,
            },
            Transform::Flip { axis } => Transform::Flip { axis: *axis },
            Transform::Rotation { k } => Transform::Rotation { k: (4 - k % 4) % 4 },
            Transform::Compose { transforms } => Transform::Compose {
                transforms: transforms.iter().rev().map(Transform::invert).collect(),
            },
        }
    }

    /// Output `(height, width)` for an input of the given size.
    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        match self {
            Transform::Rotation { k } if k % 2 == 1 => (width, height),
            Transform::Compose { transforms } => transforms
                .iter()
                .fold((height, width), |(h, w), t| t.output_dims(h, w)),
            _ => (height, width),
        }
    }

    /// For an input of `height × width`, returns the output size and, for each
    /// output pixel in raster order, the flat index of the input pixel it
    /// copies.
    pub fn source_map(&self, height: usize, width: usize) -> Result<(usize, usize, Vec<usize>), GeometryError> {
        let (h, w) = (height, width);
        match self {
            Transform::Identity => Ok((h, w, (0..h * w).collect())),
            Transform::Shift { dx, dy, .. } => {
                if dx.unsigned_abs() as usize >= w || dy.unsigned_abs() as usize >= h {
                    return Err(GeometryError::ShiftTooLarge {
                        dx: *dx,
                        dy: *dy,
                        height: h,
                        width: w,
                    });
                }
                let (hi, wi) = (h as i64, w as i64);
                let mut map = Vec::with_capacity(h * w);
                for y in 0..hi {
                    let sy = (y - *dy as i64).rem_euclid(hi);
                    for x in 0..wi {
                        let sx = (x - *dx as i64).rem_euclid(wi);
                        map.push((sy * wi + sx) as usize);
                    }
                }
                Ok((h, w, map))
            }
            Transform::Flip { axis } => {
                let mut map = Vec::with_capacity(h * w);
                for y in 0..h {
                    for x in 0..w {
                        map.push(match axis {
                            Axis::Horizontal => y * w + (w - 1 - x),
                            Axis::Vertical => (h - 1 - y) * w + x,
                        });
                    }
                }
                Ok((h, w, map))
            }
            Transform::Rotation { k } => {
                let mut map = Vec::with_capacity(h * w);
                match k {
                    1 => {
                        for r in 0..w {
                            for c in 0..h {
                                map.push((h - 1 - c) * w + r);
                            }
                        }
                        Ok((w, h, map))
                    }
                    2 => {
                        for y in 0..h {
                            for x in 0..w {
                                map.push((h - 1 - y) * w + (w - 1 - x));
                            }
                        }
                        Ok((h, w, map))
                    }
                    3 => {
                        for r in 0..w {
                            for c in 0..h {
                                map.push(c * w + (w - 1 - r));
                            }
                        }
                        Ok((w, h, map))
                    }
                    other => Err(GeometryError::InvalidRotation(*other)),
                }
            }
            Transform::Compose { transforms } => {
                let mut cur: (usize, usize, Vec<usize>) = (h, w, (0..h * w).collect());
                for t in transforms {
                    let (nh, nw, step) = t.source_map(cur.0, cur.1)?;
                    let composed = step.iter().map(|&i| cur.2[i]).collect();
                    cur = (nh, nw, composed);
                }
                Ok(cur)
            }
        }
    }

    pub fn is_identity_kind(&self) -> bool {
        matches!(self, Transform::Identity)
    }
}

/// Applies `t` to `raster`, moving whole pixels (all channels together).
pub fn apply<T: Copy>(t: &Transform, raster: &Raster<T>) -> Result<Raster<T>, GeometryError> {
    if t.is_identity_kind() {
        return Ok(raster.clone());
    }
    let (h, w, map) = t.source_map(raster.height(), raster.width())?;
    Ok(gather(raster, h, w, &map))
}

pub(crate) fn gather<T: Copy>(raster: &Raster<T>, h: usize, w: usize, map: &[usize]) -> Raster<T> {
    let c = raster.channels();
    let src = raster.data();
    let mut out = Vec::with_capacity(map.len() * c);
    for &i in map {
        out.extend_from_slice(&src[i * c..(i + 1) * c]);
    }
    Raster::new(h, w, c, out).expect("source map preserves element count")
}

pub fn invert(t: &Transform) -> Transform {
    t.invert()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Neighborhood {
    /// All 8 surrounding directions.
    #[default]
    Moore,
    /// The 4 axis-aligned directions.
    VonNeumann,
}

impl Neighborhood {
    /// Unit `(dx, dy)` directions in generation order.
    pub fn directions(self) -> &'static [(i32, i32)] {
        match self {
            Neighborhood::Moore => &[(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)],
            Neighborhood::VonNeumann => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
        }
    }
}

/// Serialized form of a [`TransformSet`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformSetDoc {
    pub stride: u32,
    pub neighborhood: Neighborhood,
    pub distances: Vec<u32>,
    pub flips: bool,
    #[serde(default)]
    pub extra: Vec<Transform>,
}

/// Ordered, duplicate-free list of transforms with the identity at index 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformSet {
    transforms: Vec<Transform>,
    doc: TransformSetDoc,
}

impl TransformSet {
    /// The `{identity}` set; upsampling with it reproduces plain strided features.
    pub fn identity(stride: u32) -> Self {
        Self::from_doc(&TransformSetDoc {
            stride,
            neighborhood: Neighborhood::Moore,
            distances: Vec::new(),
            flips: false,
            extra: Vec::new(),
        })
    }

    /// Shifts in every `neighborhood` direction at each distance, optionally
    /// combined with the four flip variants, with the identity prepended.
    pub fn standard(stride: u32, neighborhood: Neighborhood, distances: &[u32], flips: bool) -> Self {
        Self::from_doc(&TransformSetDoc {
            stride,
            neighborhood,
            distances: distances.to_vec(),
            flips,
            extra: Vec::new(),
        })
    }

    /// The default ensemble for a stride: shifts `1..=S/2`, Moore directions, flips.
    pub fn default_for_stride(stride: u32) -> Self {
        let distances: Vec<u32> = (1..=(stride / 2).max(1)).collect();
        Self::standard(stride, Neighborhood::Moore, &distances, true)
    }

    pub fn from_doc(doc: &TransformSetDoc) -> Self {
        let half = doc.stride / 2;
        let mut distances = Vec::new();
        for &d in &doc.distances {
            if d == 0 {
                log::warn!("shift distance 0 is the identity; skipped");
                continue;
            }
            if d > half {
                log::warn!("shift distance {d} outside [1, {half}] for stride {}; larger shifts add little", doc.stride);
            }
            distances.push(d as i32);
        }

        let flip_variants: Vec<Vec<Transform>> = if doc.flips {
            vec![
                vec![],
                vec![Transform::flip(Axis::Horizontal)],
                vec![Transform::flip(Axis::Vertical)],
                vec![Transform::flip(Axis::Horizontal), Transform::flip(Axis::Vertical)],
            ]
        } else {
            vec![vec![]]
        };

        let mut generated = vec![Transform::Identity];
        if distances.is_empty() {
            for flips in flip_variants.iter().skip(1) {
                generated.push(Transform::compose(flips.clone()));
            }
        } else {
            for flips in &flip_variants {
                for &(ux, uy) in doc.neighborhood.directions() {
                    for &d in &distances {
                        let shift = Transform::shift(ux * d, uy * d);
                        if flips.is_empty() {
                            generated.push(shift);
                        } else {
                            let mut parts = flips.clone();
                            parts.push(shift);
                            generated.push(Transform::compose(parts));
                        }
                    }
                }
            }
        }
        generated.extend(doc.extra.iter().cloned());

        let mut transforms: Vec<Transform> = Vec::with_capacity(generated.len());
        for t in generated {
            if !transforms.contains(&t) {
                transforms.push(t);
            }
        }
        Self {
            transforms,
            doc: doc.clone(),
        }
    }

    /// Appends explicit transforms (duplicates are dropped).
    pub fn with_extra(mut self, extra: impl IntoIterator<Item = Transform>) -> Self {
        self.doc.extra.extend(extra);
        Self::from_doc(&self.doc)
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    /// Count of transforms other than the leading identity.
    pub fn non_identity_len(&self) -> usize {
        self.transforms.len() - 1
    }

    pub fn doc(&self) -> &TransformSetDoc {
        &self.doc
    }

    pub fn stride(&self) -> u32 {
        self.doc.stride
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.doc).expect("transform set serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str::<TransformSetDoc>(json).map(|d| Self::from_doc(&d))
    }

    /// SHA-256 (hex) of the canonical JSON document.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(vals: &[u8]) -> Raster<u8> {
        Raster::new(1, vals.len(), 1, vals.to_vec()).unwrap()
    }

    #[test]
    fn identity_is_noop() {
        let r = Raster::from_fn(3, 4, 2, |y, x, k| (y * 8 + x * 2 + k) as u8);
        assert_eq!(apply(&Transform::Identity, &r).unwrap(), r);
    }

    #[test]
    fn shift_wraps_right() {
        let out = apply(&Transform::shift(1, 0), &row(&[1, 2, 3, 4])).unwrap();
        assert_eq!(out.data(), &[4, 1, 2, 3]);
    }

    #[test]
    fn flip_is_an_involution() {
        let r = Raster::from_fn(3, 5, 1, |y, x, _| (y * 5 + x) as u8);
        let f = Transform::flip(Axis::Horizontal);
        let once = apply(&f, &r).unwrap();
        assert_eq!(once.get(0, 0, 0), 4);
        assert_eq!(apply(&f, &once).unwrap(), r);
    }

    #[test]
    fn inverses() {
        assert_eq!(Transform::shift(2, -1).invert(), Transform::shift(-2, 1));
        assert_eq!(Transform::flip(Axis::Vertical).invert(), Transform::flip(Axis::Vertical));
        assert_eq!(Transform::rotation(1).invert(), Transform::rotation(3));
        let a = Transform::shift(1, 0);
        let b = Transform::rotation(1);
        assert_eq!(
            Transform::compose(vec![a.clone(), b.clone()]).invert(),
            Transform::compose(vec![b.invert(), a.invert()])
        );
    }

    #[test]
    fn rotation_swaps_dims_clockwise() {
        // 2x3: [[0,1,2],[3,4,5]] -> clockwise 3x2: [[3,0],[4,1],[5,2]]
        let r = Raster::from_fn(2, 3, 1, |y, x, _| (y * 3 + x) as u8);
        let out = apply(&Transform::rotation(1), &r).unwrap();
        assert_eq!(out.shape(), (3, 2, 1));
        assert_eq!(out.data(), &[3, 0, 4, 1, 5, 2]);
    }

    #[test]
    fn oversized_shift_rejected() {
        let err = apply(&Transform::shift(4, 0), &row(&[1, 2, 3, 4])).unwrap_err();
        assert!(matches!(err, GeometryError::ShiftTooLarge { .. }));
        assert!(apply(&Transform::shift(0, 1), &row(&[1, 2])).is_err());
    }

    #[test]
    fn bad_rotation_rejected() {
        assert_eq!(
            apply(&Transform::rotation(4), &row(&[1])).unwrap_err(),
            GeometryError::InvalidRotation(4)
        );
    }

    #[test]
    fn empty_compose_is_identity() {
        let r = Raster::from_fn(3, 3, 1, |y, x, _| (y * 3 + x) as u8);
        assert_eq!(apply(&Transform::compose(vec![]), &r).unwrap(), r);
    }

    #[test]
    fn standard_set_counts() {
        let s = TransformSet::standard(4, Neighborhood::Moore, &[1, 2], true);
        assert_eq!(s.non_identity_len(), 64);
        assert_eq!(s.transforms()[0], Transform::Identity);

        let s = TransformSet::standard(4, Neighborhood::Moore, &[], false);
        assert_eq!(s.transforms(), &[Transform::Identity]);

        let s = TransformSet::standard(4, Neighborhood::VonNeumann, &[1, 2], false);
        assert_eq!(s.non_identity_len(), 8);

        let s = TransformSet::standard(4, Neighborhood::Moore, &[], true);
        assert_eq!(s.non_identity_len(), 3);
    }

    #[test]
    fn zero_distance_is_skipped() {
        let s = TransformSet::standard(4, Neighborhood::VonNeumann, &[0, 1], false);
        assert_eq!(s.non_identity_len(), 4);
    }

    #[test]
    fn extra_transforms_are_deduplicated() {
        let s = TransformSet::standard(4, Neighborhood::VonNeumann, &[1], false)
            .with_extra([Transform::shift(1, 0), Transform::rotation(2)]);
        assert_eq!(s.non_identity_len(), 5);
    }

    #[test]
    fn json_round_trip() {
        let s = TransformSet::default_for_stride(4).with_extra([Transform::rotation(2)]);
        let json = s.to_json();
        assert!(json.contains("\"neighborhood\":\"moore\""));
        let back = TransformSet::from_json(&json).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.digest(), s.digest());
        assert_ne!(TransformSet::identity(4).digest(), s.digest());
    }

    fn arb_leaf() -> impl Strategy<Value = Transform> {
        prop_oneof![
            Just(Transform::Identity),
            (-3i32..=3, -3i32..=3).prop_map(|(dx, dy)| Transform::shift(dx, dy)),
            prop_oneof![Just(Axis::Horizontal), Just(Axis::Vertical)].prop_map(Transform::flip),
            (1u8..=3).prop_map(Transform::rotation),
        ]
    }

    fn arb_transform() -> impl Strategy<Value = Transform> {
        arb_leaf().prop_recursive(2, 8, 4, |inner| {
            prop::collection::vec(inner, 0..4).prop_map(Transform::compose)
        })
    }

    fn arb_raster() -> impl Strategy<Value = Raster<u16>> {
        (4usize..9, 4usize..9, 1usize..3).prop_flat_map(|(h, w, c)| {
            prop::collection::vec(any::<u16>(), h * w * c).prop_map(move |d| Raster::new(h, w, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(t in arb_transform(), r in arb_raster()) {
            let fwd = apply(&t, &r).unwrap();
            prop_assert_eq!(fwd.data().len(), r.data().len());
            prop_assert_eq!(apply(&t.invert(), &fwd).unwrap(), r);
        }

        #[test]
        fn compose_applies_in_order(a in arb_transform(), b in arb_transform(), r in arb_raster()) {
            let seq = apply(&b, &apply(&a, &r).unwrap()).unwrap();
            let composed = apply(&Transform::compose(vec![a, b]), &r).unwrap();
            prop_assert_eq!(composed, seq);
        }

        #[test]
        fn shifts_add_modulo_dims(d1 in (-3i32..=3, -3i32..=3), d2 in (-3i32..=3, -3i32..=3), r in arb_raster()) {
            let (h, w) = (r.height() as i32, r.width() as i32);
            let two = apply(&Transform::shift(d1.0, d1.1), &apply(&Transform::shift(d2.0, d2.1), &r).unwrap()).unwrap();
            let sum = Transform::shift((d1.0 + d2.0) % w, (d1.1 + d2.1) % h);
            prop_assert_eq!(apply(&sum, &r).unwrap(), two);
        }
    }
}
