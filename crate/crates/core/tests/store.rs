use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use featpipe_core::detect::BBox;
use featpipe_core::featurize::{AttentionMap, BackendDescriptor, FeatureMap};
use featpipe_core::fmap::Dtype;
use featpipe_core::geometry::{Neighborhood, TransformSet};
use featpipe_core::pixelclf::LabelMask;
use featpipe_core::store::{
    conform, ingest, rasterize_stroke, BrushStroke, CacheKey, FeatureCache, Layout, RunLengthLabels, StoreError,
};
use featpipe_core::{Image, Raster};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn png_bytes(h: u32, w: u32, seed: u8) -> Vec<u8> {
    let img = image::RgbImage::from_fn(w, h, |x, y| image::Rgb([x as u8 ^ seed, y as u8, seed]));
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

#[test]
fn empty_directory_gives_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let ds = ingest(dir.path(), Layout::Flat, true).unwrap();
    assert!(ds.is_empty());
    assert!(ds.warnings.is_empty());
}

#[test]
fn flat_layout_indexes_images_and_boxes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for (i, id) in ["a", "b", "c"].iter().enumerate() {
        fs::write(root.join(format!("{id}.png")), png_bytes(8, 10, i as u8)).unwrap();
    }
    fs::write(root.join("a.boxes.json"), r#"{"image": "a", "boxes": [[1, 2, 5, 6]]}"#).unwrap();
    fs::write(root.join("b.boxes.json"), r#"{"image": "b", "boxes": [[0, 0, 10, 8], [2, 2, 4, 4]]}"#).unwrap();
    fs::write(root.join("train.txt"), "a\nc\n").unwrap();

    let ds = ingest(root, Layout::Flat, true).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.entries.iter().filter(|e| e.boxes.is_some()).count(), 2);
    let b = ds.get("b").unwrap().ground_truth().unwrap().unwrap();
    assert_eq!(b.boxes, vec![BBox::new(0, 0, 10, 8), BBox::new(2, 2, 4, 4)]);
    assert!(ds.get("c").unwrap().ground_truth().unwrap().is_none());

    let again = ingest(root, Layout::Flat, true).unwrap();
    assert_eq!(again, ds);
}

#[test]
fn corrupt_image_is_fatal_only_when_strict() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("good.png"), png_bytes(4, 4, 1)).unwrap();
    fs::write(root.join("broken.png"), b"not a png at all").unwrap();

    match ingest(root, Layout::Flat, true) {
        Err(StoreError::Corrupt { path, .. }) => assert!(path.ends_with("broken.png")),
        other => panic!("expected a corrupt-file error, got {other:?}"),
    }
    let ds = ingest(root, Layout::Flat, false).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.entries[0].id, "good");
    assert_eq!(ds.warnings.len(), 1);
    assert!(ds.warnings[0].contains("broken.png"));
}

#[test]
fn voc_layout_reads_xml_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for sub in ["JPEGImages", "Annotations", "SegmentationClass", "ImageSets/Main"] {
        fs::create_dir_all(root.join(sub)).unwrap();
    }
    fs::write(root.join("JPEGImages/x1.png"), png_bytes(20, 20, 3)).unwrap();
    fs::write(root.join("JPEGImages/x2.png"), png_bytes(20, 20, 4)).unwrap();
    fs::write(
        root.join("Annotations/x1.xml"),
        "<annotation><object><bndbox><xmin>3</xmin><ymin>4</ymin><xmax>12</xmax><ymax>15</ymax></bndbox></object></annotation>",
    )
    .unwrap();
    fs::write(root.join("ImageSets/Main/train.txt"), "x2\n").unwrap();

    let ds = ingest(root, Layout::VocLike, true).unwrap();
    assert_eq!(ds.len(), 2);
    let gt = ds.get("x1").unwrap().ground_truth().unwrap().unwrap();
    assert_eq!(gt.boxes, vec![BBox::new(2, 3, 12, 15)]);
    assert_eq!(ds.get("x2").unwrap().split, featpipe_core::store::Split::Train);
    assert!(ingest(&root.join("missing"), Layout::VocLike, true).is_err());
}

fn vit14() -> BackendDescriptor {
    BackendDescriptor {
        name: "vit14".into(),
        patch_size: 14,
        stride: 14,
        hidden_dim: 8,
        input_multiple: 14,
    }
}

/// Rectangles and discs no thinner than `min` pixels.
fn feature_mask(rng: &mut ChaCha8Rng, size: usize, min: usize) -> LabelMask {
    let mut m = LabelMask::unlabeled(size, size);
    for _ in 0..40 {
        let class = rng.gen_range(1..4u32);
        let (cy, cx) = (rng.gen_range(0..size) as i64, rng.gen_range(0..size) as i64);
        if rng.gen_bool(0.5) {
            let (h, w) = (rng.gen_range(min..min * 40), rng.gen_range(min..min * 40));
            for y in cy..(cy + h as i64).min(size as i64) {
                for x in cx..(cx + w as i64).min(size as i64) {
                    m.labels[y as usize * size + x as usize] = class;
                }
            }
        } else {
            let r = rng.gen_range(min as i64..min as i64 * 20);
            for y in (cy - r).max(0)..(cy + r).min(size as i64) {
                for x in (cx - r).max(0)..(cx + r).min(size as i64) {
                    if (y - cy).pow(2) + (x - cx).pow(2) <= r * r {
                        m.labels[y as usize * size + x as usize] = class;
                    }
                }
            }
        }
    }
    m
}

#[test]
fn labels_survive_resize_to_working_resolution_and_back() {
    let img = Image::filled(1024, 1024, 3, 90);
    let c = conform(&img, &vit14(), Some((518, 518))).unwrap();
    assert_eq!(c.map.padded, (518, 518));
    assert_eq!((c.image.height(), c.image.width()), (518, 518));

    let mut rng = ChaCha8Rng::seed_from_u64(518);
    for case in 0..5 {
        let mask = feature_mask(&mut rng, 1024, 4);
        let small = c.map.forward_labels(&mask);
        assert_eq!((small.height, small.width), (518, 518));
        let back = c.map.restore_labels(&small);
        let kept = back.labels.iter().zip(&mask.labels).filter(|(a, b)| a == b).count();
        let frac = kept as f64 / mask.labels.len() as f64;
        assert!(frac >= 0.99, "case {case}: {frac}");
    }
}

#[test]
fn non_square_padding_is_recorded_and_undone() {
    let img = Image::from_fn(100, 150, 3, |y, x, k| (y * 7 + x * 3 + k) as u8);
    let c = conform(&img, &vit14(), None).unwrap();
    assert_eq!(c.map.padded, (112, 154));
    assert_eq!(c.map.padding(), (12, 4));
    let restored = c.map.restore(&c.image);
    assert_eq!(restored, img);
}

fn maps(seed: u64) -> (FeatureMap, AttentionMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = Raster::from_fn(64, 64, 16, |_, _, _| rng.gen::<f32>());
    let a = Raster::from_fn(64, 64, 1, |_, _, _| rng.gen::<f32>());
    (FeatureMap::new(f), AttentionMap::new(a))
}

#[test]
fn concurrent_readers_never_see_partial_entries() {
    let dir = tempfile::tempdir().unwrap();
    let cache = Arc::new(FeatureCache::new(dir.path()));
    let set = TransformSet::default_for_stride(4);
    let key = CacheKey::new(b"image", &vit14(), &set);
    let versions: Vec<_> = (0..2).map(maps).collect();
    let valid_f: Vec<Vec<u8>> = versions.iter().map(|v| v.0.to_fmap_bytes(Dtype::F32)).collect();
    let valid_a: Vec<Vec<u8>> = versions.iter().map(|v| v.1.to_fmap_bytes(Dtype::F32)).collect();

    let stop = Arc::new(AtomicBool::new(false));
    let readers: Vec<_> = (0..4)
        .map(|_| {
            let (cache, stop, key) = (cache.clone(), stop.clone(), key.clone());
            let (vf, va) = (valid_f.clone(), valid_a.clone());
            std::thread::spawn(move || {
                let mut seen = 0;
                while !stop.load(Ordering::Relaxed) {
                    if let Some((f, a)) = cache.lookup_bytes(&key).unwrap() {
                        assert!(vf.contains(&f), "partial feature file");
                        assert!(va.contains(&a), "partial attention file");
                        seen += 1;
                    }
                }
                seen
            })
        })
        .collect();
    for i in 0..60 {
        let (f, a) = &versions[i % 2];
        cache.put(&key, f, a).unwrap();
    }
    stop.store(true, Ordering::Relaxed);
    let seen: usize = readers.into_iter().map(|r| r.join().unwrap()).sum();
    assert!(seen > 0);

    let (f, a) = cache.lookup(&key).unwrap().unwrap();
    assert_eq!(f.to_fmap_bytes(Dtype::F32), valid_f[1]);
    assert_eq!(a.to_fmap_bytes(Dtype::F32), valid_a[1]);

    let other = TransformSet::standard(4, Neighborhood::VonNeumann, &[1], false);
    assert!(cache.lookup(&CacheKey::new(b"image", &vit14(), &other)).unwrap().is_none());
    let mut d = vit14();
    d.hidden_dim += 1;
    assert!(cache.lookup(&CacheKey::new(b"image", &d, &set)).unwrap().is_none());
    assert!(cache.lookup(&CacheKey::new(b"imagf", &vit14(), &set)).unwrap().is_none());
}

#[test]
fn tampered_cache_entry_is_recomputed() {
    let dir = tempfile::tempdir().unwrap();
    let cache = FeatureCache::new(dir.path());
    let key = CacheKey::new(b"x", &vit14(), &TransformSet::identity(14));
    let (f, a) = maps(3);
    cache.put(&key, &f, &a).unwrap();
    let mut bytes = fs::read(cache.feature_path(&key)).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(cache.feature_path(&key), bytes).unwrap();
    assert!(cache.lookup(&key).unwrap().is_none());
    let (_, hit) = cache
        .get_or_compute::<StoreError>(&key, || Ok(maps(3)))
        .unwrap();
    assert!(!hit);
    let (got, hit) = cache.get_or_compute::<StoreError>(&key, || unreachable!()).unwrap();
    assert!(hit);
    assert_eq!(got.0, f);
}

/// Pixels within the brush disc of any stamped position, computed directly.
fn disc_oracle(stroke: &BrushStroke, h: usize, w: usize) -> Vec<bool> {
    let mut centres = Vec::new();
    if let Some(&p) = stroke.points.first() {
        centres.push(p);
    }
    for seg in stroke.points.windows(2) {
        let ([x0, y0], [x1, y1]) = (seg[0], seg[1]);
        let n = (x1 - x0).abs().max((y1 - y0).abs());
        for i in 1..=n {
            let t = i as f64 / n as f64;
            let x = (x0 as f64 + t * (x1 - x0) as f64 + 0.5).floor() as i64;
            let y = (y0 as f64 + t * (y1 - y0) as f64 + 0.5).floor() as i64;
            centres.push([x, y]);
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = centres.iter().any(|&[cx, cy]| {
                let d = (((x as i64 - cx).pow(2) + (y as i64 - cy).pow(2)) as f64).sqrt();
                ((d + 0.5).floor() as i64) < stroke.radius as i64
            });
        }
    }
    out
}

fn rle_to_map(rle: &RunLengthLabels) -> BTreeMap<String, Vec<[u32; 3]>> {
    rle.0.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

#[test]
fn golden_strokes_match_recorded_fixtures() {
    #[derive(serde::Deserialize)]
    struct Case {
        stroke: BrushStroke,
        runs: BTreeMap<String, Vec<[u32; 3]>>,
    }
    #[derive(serde::Deserialize)]
    struct Golden {
        height: usize,
        width: usize,
        strokes: Vec<Case>,
    }
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/strokes.json");
    let golden: Golden = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(golden.strokes.len(), 25);
    for (i, case) in golden.strokes.iter().enumerate() {
        let rle = rasterize_stroke(&case.stroke, golden.height, golden.width);
        assert_eq!(rle_to_map(&rle), case.runs, "stroke {i}");
    }
}

#[test]
fn stroke_edge_cases() {
    let dot = BrushStroke {
        class: 2,
        radius: 1,
        points: vec![[3, 4]],
    };
    let rle = rasterize_stroke(&dot, 10, 10);
    assert_eq!(rle.0, BTreeMap::from([(2, vec![[4, 3, 1]])]));

    let outside = BrushStroke {
        class: 1,
        radius: 3,
        points: vec![[-50, -50], [-40, -60]],
    };
    assert!(rasterize_stroke(&outside, 10, 10).0.is_empty());

    let crossing = BrushStroke {
        class: 1,
        radius: 2,
        points: vec![[-5, 5], [20, 5]],
    };
    let m = rasterize_stroke(&crossing, 10, 10).decode(10, 10).unwrap();
    assert_eq!(m.labels[5 * 10..6 * 10], [1; 10]);
}

#[test]
fn later_runs_paint_over_earlier_labels() {
    let mut base = LabelMask::new(2, 4, vec![1, 1, 1, 1, 2, 2, 2, 2]).unwrap();
    let patch = RunLengthLabels(BTreeMap::from([(3, vec![[0, 1, 2]]), (0, vec![[1, 0, 1]])]));
    patch.paint(&mut base).unwrap();
    assert_eq!(base.labels, vec![1, 3, 3, 1, 0, 2, 2, 2]);
    let bad = RunLengthLabels(BTreeMap::from([(1, vec![[0, 3, 2]])]));
    assert!(bad.paint(&mut base).is_err());
}

fn mask_strategy() -> impl Strategy<Value = LabelMask> {
    (1usize..20, 1usize..20).prop_flat_map(|(h, w)| {
        proptest::collection::vec(prop_oneof![3 => Just(0u32), 1 => 1u32..6], h * w)
            .prop_map(move |labels| LabelMask::new(h, w, labels).unwrap())
    })
}

proptest! {
    #[test]
    fn run_length_round_trips(mask in mask_strategy()) {
        let rle = RunLengthLabels::encode(&mask);
        prop_assert_eq!(rle.decode(mask.height, mask.width).unwrap(), mask.clone());
        let json = serde_json::to_string(&rle).unwrap();
        let parsed: RunLengthLabels = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(parsed, rle);
    }

    #[test]
    fn stroke_matches_disc_oracle(
        class in 1u32..5,
        radius in 1u32..7,
        points in proptest::collection::vec((-6i64..26, -6i64..22), 1..5),
    ) {
        let (h, w) = (16, 20);
        let stroke = BrushStroke { class, radius, points: points.iter().map(|&(x, y)| [x, y]).collect() };
        let got = rasterize_stroke(&stroke, h, w).decode(h, w).unwrap();
        let want = disc_oracle(&stroke, h, w);
        for p in 0..h * w {
            prop_assert_eq!(got.labels[p] == class, want[p], "pixel {}", p);
            prop_assert!(got.labels[p] == class || got.labels[p] == 0);
        }
    }
}
