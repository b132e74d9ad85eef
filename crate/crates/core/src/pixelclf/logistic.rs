//! L2-regularized multinomial logistic regression fitted by L-BFGS.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PixelClfError;

const BLOCK: usize = 2048;
const MEMORY: usize = 10;
const ARMIJO: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    /// Inverse regularization strength.
    pub c_reg: f64,
    /// Stop once the gradient's Euclidean norm is at most this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            c_reg: 1.0,
            tol: 1e-4,
            max_iter: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub iterations: usize,
    /// Objective before the first step and after every accepted step.
    pub loss_history: Vec<f64>,
    pub grad_norm: f64,
    pub converged: bool,
}

/// Objective over standardized rows `x` (`n × d`) with labels in `0..k`.
///
/// Parameters are laid out as `W` (`k × d`, row-major) followed by `b` (`k`).
/// The objective is mean cross-entropy plus `‖W‖² / (2 · c_reg · n)`; the bias
/// is not penalized.
pub struct LogisticProblem<'a> {
    pub x: &'a [f64],
    pub y: &'a [usize],
    pub d: usize,
    pub k: usize,
    pub c_reg: f64,
}

impl LogisticProblem<'_> {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn param_len(&self) -> usize {
        self.k * (self.d + 1)
    }

    pub fn loss_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let (d, k, n) = (self.d, self.k, self.n());
        let plen = self.param_len();
        let partial: Vec<(f64, Vec<f64>)> = (0..n.div_ceil(BLOCK))
            .into_par_iter()
            .map(|b| {
                let mut loss = 0.0;
                let mut grad = vec![0.0; plen];
                let mut z = vec![0.0; k];
                for i in b * BLOCK..((b + 1) * BLOCK).min(n) {
                    let xi = &self.x[i * d..(i + 1) * d];
                    logits(theta, xi, d, k, &mut z);
                    let lse = log_sum_exp(&z);
                    loss += lse - z[self.y[i]];
                    for c in 0..k {
                        let r = (z[c] - lse).exp() - (c == self.y[i]) as u8 as f64;
                        let row = &mut grad[c * d..(c + 1) * d];
                        for (g, &v) in row.iter_mut().zip(xi) {
                            *g += r * v;
                        }
                        grad[k * d + c] += r;
                    }
                }
                (loss, grad)
            })
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; plen];
        for (l, g) in partial {
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let inv_n = 1.0 / n as f64;
        let reg = 1.0 / (self.c_reg * n as f64);
        loss *= inv_n;
        grad.iter_mut().for_each(|g| *g *= inv_n);
        let w = &theta[..k * d];
        loss += 0.5 * reg * w.iter().map(|v| v * v).sum::<f64>();
        for (g, v) in grad[..k * d].iter_mut().zip(w) {
            *g += reg * v;
        }
        (loss, grad)
    }
}

fn logits(theta: &[f64], x: &[f64], d: usize, k: usize, out: &mut [f64]) {
    for c in 0..k {
        out[c] = theta[k * d + c] + theta[c * d..(c + 1) * d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimizes `problem` from zero with L-BFGS and Armijo backtracking.
pub fn minimize(problem: &LogisticProblem, cfg: &LogisticConfig) -> (Vec<f64>, TrainReport) {
    let mut theta = vec![0.0; problem.param_len()];
    let (mut f, mut g) = problem.loss_grad(&theta);
    let mut history = vec![f];
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut iterations = 0;

    while iterations < cfg.max_iter && norm(&g) > cfg.tol {
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let a = dot(s, &q) / dot(y, s);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = match (s_hist.last(), y_hist.last()) {
            (Some(s), Some(y)) => dot(s, y) / dot(y, y),
            _ => 1.0 / norm(&g).max(1.0),
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y), a) in s_hist.iter().zip(&y_hist).zip(alphas.into_iter().rev()) {
            let b = dot(y, &q) / dot(y, s);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            s_hist.clear();
            y_hist.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }

        let mut step = 1.0;
        let accepted = loop {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(t, p)| t + step * p).collect();
            let (fc, gc) = problem.loss_grad(&cand);
            if fc.is_finite() && fc <= f + ARMIJO * step * slope {
                break Some((cand, fc, gc));
            }
            step *= 0.5;
            if step < 1e-20 {
                break None;
            }
        };
        let Some((cand, fc, gc)) = accepted else {
            log::warn!("line search failed at iteration {iterations}");
            break;
        };
        let s: Vec<f64> = cand.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gc.iter().zip(&g).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-12 * norm(&s) * norm(&y) {
            if s_hist.len() == MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
        theta = cand;
        f = fc;
        g = gc;
        history.push(f);
        iterations += 1;
    }
    let grad_norm = norm(&g);
    (theta, TrainReport {
        iterations,
        loss_history: history,
        grad_norm,
        converged: grad_norm <= cfg.tol,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticModel {
    pub mean: Vec<f64>,
    /// `1 / std`, or 0 for channels that were constant over the training rows.
    pub scale: Vec<f64>,
    /// `k × d`, row-major, acting on standardized inputs.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub report: TrainReport,
}

impl LogisticModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn standardize(&self, x: &[f32], out: &mut [f64]) {
        for j in 0..self.dim() {
            out[j] = (x[j] as f64 - self.mean[j]) * self.scale[j];
        }
    }

    pub fn predict_proba(&self, x: &[f32]) -> Vec<f64> {
        let (d, k) = (self.dim(), self.classes());
        let mut z = vec![0.0; d];
        self.standardize(x, &mut z);
        let mut out: Vec<f64> = (0..k)
            .map(|c| self.bias[c] + dot(&self.weights[c * d..(c + 1) * d], &z))
            .collect();
        let m = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        out.iter_mut().for_each(|v| *v = (*v - m).exp());
        let s: f64 = out.iter().sum();
        out.iter_mut().for_each(|v| *v /= s);
        out
    }
}

/// Per-channel mean and inverse standard deviation over `rows`.
pub fn standardization(rows: &[f32], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() / d;
    let mut mean = vec![0.0; d];
    for r in rows.chunks_exact(d) {
        mean.iter_mut().zip(r).for_each(|(m, &v)| *m += v as f64);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for r in rows.chunks_exact(d) {
        for j in 0..d {
            var[j] += (r[j] as f64 - mean[j]).powi(2);
        }
    }
    let scale = var
        .iter()
        .zip(&mean)
        .map(|(v, m)| {
            let sd = (v / n as f64).sqrt();
            if sd <= 1e-12 * m.abs().max(1.0) {
                0.0
            } else {
                1.0 / sd
            }
        })
        .collect();
    (mean, scale)
}

pub fn fit(rows: &[f32], y: &[usize], d: usize, k: usize, cfg: &LogisticConfig) -> Result<LogisticModel, PixelClfError> {
    if !(cfg.c_reg > 0.0) || !(cfg.tol > 0.0) {
        return Err(PixelClfError::InvalidParameter(format!(
            "c_reg and tol must be positive, got {} and {}",
            cfg.c_reg, cfg.tol
        )));
    }
    let (mean, scale) = standardization(rows, d);
    let x: Vec<f64> = rows
        .chunks_exact(d)
        .flat_map(|r| (0..d).map(|j| (r[j] as f64 - mean[j]) * scale[j]).collect::<Vec<_>>())
        .collect();
    let problem = LogisticProblem {
        x: &x,
        y,
        d,
        k,
        c_reg: cfg.c_reg,
    };
    let (theta, report) = minimize(&problem, cfg);
    if !report.converged {
        log::warn!(
            "logistic fit stopped after {} iterations with gradient norm {:.3e}",
            report.iterations,
            report.grad_norm
        );
    }
    Ok(LogisticModel {
        mean,
        scale,
        weights: theta[..k * d].to_vec(),
        bias: theta[k * d..].to_vec(),
        report,
    })
}
