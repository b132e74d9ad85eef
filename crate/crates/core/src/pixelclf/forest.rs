//! Random forest of Gini-impurity CART trees.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PixelClfError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub trees: usize,
    pub seed: u64,
    /// Features tried per split; `None` means `⌈√D⌉`.
    pub max_features: Option<usize>,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 100,
            seed: 0,
            max_features: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left.
    Split { feature: u32, threshold: f64, left: u32, right: u32 },
    Leaf { distribution: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_distribution(&self, x: &[f32]) -> &[f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split { feature, threshold, left, right } => {
                    i = if (x[*feature as usize] as f64) <= *threshold { *left } else { *right } as usize;
                }
                Node::Leaf { distribution } => return distribution,
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Split { left, right, .. } => 1 + go(t, *left as usize).max(go(t, *right as usize)),
                Node::Leaf { .. } => 0,
            }
        }
        go(self, 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forest {
    pub dim: usize,
    pub classes: usize,
    pub trees: Vec<Tree>,
}

impl Forest {
    pub fn predict_proba(&self, x: &[f32]) -> Vec<f64> {
        let mut out = vec![0.0; self.classes];
        for t in &self.trees {
            out.iter_mut().zip(t.leaf_distribution(x)).for_each(|(o, p)| *o += p);
        }
        let n = self.trees.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

struct Data<'a> {
    rows: &'a [f32],
    y: &'a [usize],
    d: usize,
    k: usize,
}

impl Data<'_> {
    fn at(&self, i: usize, f: usize) -> f32 {
        self.rows[i * self.d + f]
    }
}

fn gini_sum(counts: &[usize], n: usize) -> f64 {
    // n * gini, so that weighted child impurities add directly
    if n == 0 {
        return 0.0;
    }
    let sq: f64 = counts.iter().map(|&c| (c * c) as f64).sum();
    n as f64 - sq / n as f64
}

struct Best {
    impurity: f64,
    feature: usize,
    threshold: f64,
}

fn best_split_on(data: &Data, idx: &mut [usize], f: usize, total: &[usize]) -> Option<Best> {
    idx.sort_by(|&a, &b| data.at(a, f).total_cmp(&data.at(b, f)));
    let n = idx.len();
    let mut left = vec![0usize; data.k];
    let mut best: Option<Best> = None;
    for i in 0..n - 1 {
        left[data.y[idx[i]]] += 1;
        let (lo, hi) = (data.at(idx[i], f), data.at(idx[i + 1], f));
        if lo == hi {
            continue;
        }
        let right: Vec<usize> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
        let imp = gini_sum(&left, i + 1) + gini_sum(&right, n - i - 1);
        if best.as_ref().map_or(true, |b| imp < b.impurity) {
            let mid = (lo as f64 + hi as f64) / 2.0;
            best = Some(Best {
                impurity: imp,
                feature: f,
                threshold: if mid < hi as f64 { mid } else { lo as f64 },
            });
        }
    }
    best
}

fn grow(data: &Data, sample: Vec<usize>, mtry: usize, rng: &mut ChaCha8Rng) -> Tree {
    let mut nodes: Vec<Node> = Vec::new();
    // (node slot, rows)
    let mut stack: Vec<(usize, Vec<usize>)> = vec![(0, sample)];
    nodes.push(Node::Leaf { distribution: vec![] });
    let mut features: Vec<usize> = (0..data.d).collect();
    while let Some((slot, mut idx)) = stack.pop() {
        let mut counts = vec![0usize; data.k];
        for &i in &idx {
            counts[data.y[i]] += 1;
        }
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let mut split: Option<Best> = None;
        if !pure && idx.len() > 1 {
            // keep drawing features until one of the first `mtry` draws, or
            // any later one, yields a valid split
            features.shuffle(rng);
            for (tried, &f) in features.iter().enumerate() {
                if tried >= mtry && split.is_some() {
                    break;
                }
                if let Some(b) = best_split_on(data, &mut idx, f, &counts) {
                    if split.as_ref().map_or(true, |s| b.impurity < s.impurity) {
                        split = Some(b);
                    }
                }
            }
        }
        match split {
            None => {
                let n = idx.len() as f64;
                nodes[slot] = Node::Leaf {
                    distribution: counts.iter().map(|&c| c as f64 / n).collect(),
                };
            }
            Some(b) => {
                let (l, r): (Vec<usize>, Vec<usize>) =
                    idx.iter().partition(|&&i| data.at(i, b.feature) as f64 <= b.threshold);
                let left = nodes.len();
                nodes.push(Node::Leaf { distribution: vec![] });
                nodes.push(Node::Leaf { distribution: vec![] });
                nodes[slot] = Node::Split {
                    feature: b.feature as u32,
                    threshold: b.threshold,
                    left: left as u32,
                    right: left as u32 + 1,
                };
                stack.push((left + 1, r));
                stack.push((left, l));
            }
        }
    }
    Tree { nodes }
}

/// Row order of `rows` sorted by feature bits then label.
fn canonical_order(rows: &[f32], y: &[usize], d: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&rows[a * d..(a + 1) * d], &rows[b * d..(b + 1) * d]);
        ra.iter()
            .zip(rb)
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(y[a].cmp(&y[b]))
    });
    order
}

/// Fits `cfg.trees` trees on bootstrap samples. Rows are put in a canonical
/// order first, so the result does not depend on the order they arrive in.
pub fn fit(rows: &[f32], y: &[usize], d: usize, k: usize, cfg: &ForestConfig) -> Result<Forest, PixelClfError> {
    if cfg.trees == 0 {
        return Err(PixelClfError::InvalidParameter("forest needs at least one tree".into()));
    }
    let order = canonical_order(rows, y, d);
    let sorted_rows: Vec<f32> = order.iter().flat_map(|&i| rows[i * d..(i + 1) * d].iter().copied()).collect();
    let sorted_y: Vec<usize> = order.iter().map(|&i| y[i]).collect();
    let data = Data {
        rows: &sorted_rows,
        y: &sorted_y,
        d,
        k,
    };
    let n = sorted_y.len();
    let mtry = cfg
        .max_features
        .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
        .clamp(1, d.max(1));
    let trees = (0..cfg.trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(t as u64);
            let sample: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            grow(&data, sample, mtry, &mut rng)
        })
        .collect();
    Ok(Forest { dim: d, classes: k, trees })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xor_is_learned() {
        let rows: Vec<f32> = vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0];
        let y = vec![0, 1, 1, 0];
        let f = fit(&rows, &y, 2, 2, &ForestConfig::default()).unwrap();
        let correct = rows
            .chunks(2)
            .zip(&y)
            .filter(|(r, &c)| {
                let p = f.predict_proba(r);
                (p[1] > p[0]) as usize == c
            })
            .count();
        assert_eq!(correct, 4);
    }

    #[test]
    fn row_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 60;
        let rows: Vec<f32> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<usize> = (0..n).map(|i| (rows[i * 3] + rows[i * 3 + 1] > 0.0) as usize).collect();
        let cfg = ForestConfig {
            trees: 10,
            ..Default::default()
        };
        let a = fit(&rows, &y, 3, 2, &cfg).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let prow: Vec<f32> = perm.iter().flat_map(|&i| rows[i * 3..i * 3 + 3].to_vec()).collect();
        let py: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
        let b = fit(&prow, &py, 3, 2, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn leaf_distributions_sum_to_one() {
        let rows = vec![0.0f32, 0.0, 0.0, 1.0];
        let y = vec![0, 1, 2, 2];
        let f = fit(&rows, &y, 1, 3, &ForestConfig::default()).unwrap();
        let p = f.predict_proba(&[0.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[0] > 0.0 && p[1] > 0.0, "identical rows with different labels share a leaf");
    }
}
