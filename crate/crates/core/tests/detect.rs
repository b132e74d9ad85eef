use std::collections::BTreeMap;

use featpipe_core::cas::{CasClass, CasMap};
use featpipe_core::detect::{boxes, corloc, label_components, mask_iou, miou, BBox, BoxOptions, Connectivity};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FRAME: u32 = 24;

/// IoU by rasterizing both boxes and counting pixels.
fn naive_iou(a: &BBox, b: &BBox) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for y in 0..FRAME {
        for x in 0..FRAME {
            let ia = x >= a.x0 && x < a.x1 && y >= a.y0 && y < a.y1;
            let ib = x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1;
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn naive_corloc(pred: &BTreeMap<String, Vec<BBox>>, gt: &BTreeMap<String, Vec<BBox>>) -> f64 {
    let mut hits = 0;
    for (id, g) in gt {
        let mut hit = false;
        for p in pred.get(id).map(Vec::as_slice).unwrap_or(&[]) {
            for b in g {
                if naive_iou(p, b) > 0.5 {
                    hit = true;
                }
            }
        }
        hits += hit as usize;
    }
    hits as f64 / gt.len() as f64
}

fn naive_miou(pred: &[u32], gt: &[u32], classes: &[u32]) -> f64 {
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut sum = 0.0;
    let mut n = 0;
    for c in sorted {
        let inter = pred.iter().zip(gt).filter(|(&p, &g)| p == c && g == c).count();
        let union = pred.iter().zip(gt).filter(|(&p, &g)| p == c || g == c).count();
        if union > 0 {
            sum += inter as f64 / union as f64;
            n += 1;
        }
    }
    sum / n as f64
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let (x0, y0) = (rng.gen_range(0..FRAME - 1), rng.gen_range(0..FRAME - 1));
    BBox::new(x0, y0, rng.gen_range(x0 + 1..=FRAME), rng.gen_range(y0 + 1..=FRAME))
}

#[test]
fn metrics_agree_with_naive_versions() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for case in 0..50 {
        let mut pred = BTreeMap::new();
        let mut gt = BTreeMap::new();
        for i in 0..rng.gen_range(1..6) {
            let id = format!("img{i}");
            let g: Vec<BBox> = (0..rng.gen_range(1..3)).map(|_| random_box(&mut rng)).collect();
            if rng.gen_bool(0.8) {
                let mut p: Vec<BBox> = (0..rng.gen_range(0..3)).map(|_| random_box(&mut rng)).collect();
                if rng.gen_bool(0.3) {
                    p.push(g[0]);
                }
                pred.insert(id.clone(), p);
            }
            gt.insert(id, g);
        }
        assert_eq!(corloc(&pred, &gt).unwrap(), naive_corloc(&pred, &gt), "case {case}");

        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        assert_eq!(a.iou(&b), naive_iou(&a, &b));

        let n = 64;
        let k = rng.gen_range(2..5u32);
        let p: Vec<u32> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let g: Vec<u32> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let classes: Vec<u32> = (0..=k).collect();
        assert_eq!(miou(&p, &g, &classes).unwrap(), naive_miou(&p, &g, &classes), "case {case}");

        let ma: Vec<bool> = p.iter().map(|&v| v == 0).collect();
        let mb: Vec<bool> = g.iter().map(|&v| v == 0).collect();
        let as_ids = |m: &[bool]| m.iter().map(|&b| b as u32).collect::<Vec<_>>();
        assert_eq!(mask_iou(&ma, &mb).unwrap(), naive_miou(&as_ids(&ma), &as_ids(&mb), &[1]));
    }
}

#[test]
fn iou_of_exactly_half_is_a_miss() {
    let g = BBox::new(0, 0, 10, 10);
    let p = BBox::new(0, 0, 10, 5);
    assert_eq!(naive_iou(&p, &g), 0.5);
    assert_eq!(p.iou(&g), 0.5);
    let pred = BTreeMap::from([("a".to_string(), vec![p])]);
    let gt = BTreeMap::from([("a".to_string(), vec![g])]);
    assert_eq!(corloc(&pred, &gt).unwrap(), 0.0);
    assert_eq!(naive_corloc(&pred, &gt), 0.0);
}

/// Recursive flood fill over 4-neighbours.
fn flood_count(mask: &[bool], h: usize, w: usize) -> usize {
    fn fill(mask: &[bool], seen: &mut [bool], h: usize, w: usize, y: usize, x: usize) {
        let p = y * w + x;
        if !mask[p] || seen[p] {
            return;
        }
        seen[p] = true;
        if y > 0 {
            fill(mask, seen, h, w, y - 1, x);
        }
        if y + 1 < h {
            fill(mask, seen, h, w, y + 1, x);
        }
        if x > 0 {
            fill(mask, seen, h, w, y, x - 1);
        }
        if x + 1 < w {
            fill(mask, seen, h, w, y, x + 1);
        }
    }
    let mut seen = vec![false; h * w];
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] && !seen[y * w + x] {
                n += 1;
                fill(mask, &mut seen, h, w, y, x);
            }
        }
    }
    n
}

#[test]
fn checkerboard_has_one_component_per_pixel_with_four_connectivity() {
    let (h, w) = (9, 7);
    let mask: Vec<bool> = (0..h * w).map(|p| (p / w + p % w) % 2 == 0).collect();
    let (_, comps) = label_components(&mask, h, w, Connectivity::Four);
    assert_eq!(comps.len(), mask.iter().filter(|&&m| m).count());
    assert_eq!(comps.len(), flood_count(&mask, h, w));
    let (_, eight) = label_components(&mask, h, w, Connectivity::Eight);
    assert_eq!(eight.len(), 1);
}

fn cas_from(labels: Vec<u32>, h: usize, w: usize, foreground: &[bool]) -> CasMap {
    let classes = foreground
        .iter()
        .enumerate()
        .map(|(id, &fg)| {
            let area = labels.iter().filter(|&&l| l == id as u32).count();
            CasClass {
                id: id as u32,
                area,
                attention_mass: 0.0,
                rho_a: 0.0,
                foreground: fg,
                clusters: vec![id as u32],
            }
        })
        .collect();
    CasMap {
        height: h,
        width: w,
        labels,
        classes,
        d_sem: 0.0,
        lambda: 1.0,
        seed: 0,
        degenerate_split: false,
    }
}

fn labels_strategy() -> impl Strategy<Value = (usize, usize, Vec<u32>, Vec<bool>)> {
    (2usize..14, 2usize..14, 2u32..4).prop_flat_map(|(h, w, k)| {
        (
            Just(h),
            Just(w),
            proptest::collection::vec(0..k, h * w),
            proptest::collection::vec(any::<bool>(), k as usize),
        )
    })
}

proptest! {
    #[test]
    fn boxes_are_tight_and_superbox_rule_holds((h, w, labels, fg) in labels_strategy()) {
        let cas = cas_from(labels, h, w, &fg);
        let opts = BoxOptions { min_area: Some(1), ..Default::default() };
        let result = boxes(&cas, &opts);
        let superboxes: Vec<_> = result.boxes.iter().filter(|b| b.is_superbox).collect();
        prop_assert!(superboxes.len() <= 1);
        for sb in &superboxes {
            for other in result.boxes.iter().filter(|b| !b.is_superbox) {
                prop_assert!(sb.bbox.iou(&other.bbox) <= 0.8);
            }
        }
        for b in result.boxes.iter().filter(|b| !b.is_superbox) {
            let class = b.class.unwrap();
            let inside = |y: u32, x: u32| cas.labels[y as usize * w + x as usize] == class;
            let bb = b.bbox;
            prop_assert!((bb.x0..bb.x1).any(|x| inside(bb.y0, x)));
            prop_assert!((bb.x0..bb.x1).any(|x| inside(bb.y1 - 1, x)));
            prop_assert!((bb.y0..bb.y1).any(|y| inside(y, bb.x0)));
            prop_assert!((bb.y0..bb.y1).any(|y| inside(y, bb.x1 - 1)));
        }
        let expect: Vec<bool> = cas.labels.iter().map(|&l| fg[l as usize]).collect();
        prop_assert_eq!(&result.saliency, &expect);
    }
}
