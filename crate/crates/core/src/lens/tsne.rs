use std::io::Write;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{LensError, Result};
use crate::linalg::row_major;
use crate::rng::seeded;

pub const MAX_POINTS: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum_switch: usize,
    /// KL divergence is recorded every this many iterations.
    pub kl_every: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum_switch: 250,
            kl_every: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// N×2, centered.
    pub coords: DMatrix<f64>,
    /// `(iteration, KL(P‖Q))`, iterations counted from 1.
    pub kl_trace: Vec<(usize, f64)>,
}

impl Projection {
    pub fn kl_at(&self, iteration: usize) -> Option<f64> {
        self.kl_trace.iter().find(|(i, _)| *i == iteration).map(|&(_, k)| k)
    }
}

const PERPLEXITY_TOL: f64 = 1e-5;
const MAX_BISECTION: usize = 50;

/// Row-conditional affinities `p(j|i)` with per-row precision chosen by
/// bisection so that `exp(H(P_i))` matches the target perplexity.
fn conditional_p(sq: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let d = &sq[i * n..(i + 1) * n];
        let row = &mut p[i * n..(i + 1) * n];
        let (mut beta, mut lo, mut hi) = (1.0f64, f64::NEG_INFINITY, f64::INFINITY);
        // shift by the nearest distance so exp() cannot underflow for every j
        let dmin = d.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
        for _ in 0..MAX_BISECTION {
            let mut sum = 0.0;
            let mut dsum = 0.0;
            for j in 0..n {
                let v = if j == i { 0.0 } else { (-(d[j] - dmin) * beta).exp() };
                row[j] = v;
                sum += v;
                dsum += (d[j] - dmin) * v;
            }
            let h = sum.ln() + beta * dsum / sum;
            row.iter_mut().for_each(|v| *v /= sum);
            let diff = h - target;
            if diff.abs() < PERPLEXITY_TOL {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
            }
        }
    }
    p
}

fn squared_distances(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows();
    let d = x.ncols();
    let rows = row_major(x);
    let mut sq = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = rows[i * d..(i + 1) * d].iter().zip(&rows[j * d..(j + 1) * d]).map(|(a, b)| (a - b) * (a - b)).sum();
            sq[i * n + j] = v;
            sq[j * n + i] = v;
        }
    }
    sq
}

fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let mut z = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            z += 2.0 / (1.0 + dx * dx + dy * dy);
        }
    }
    let mut kl = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let pij = p[i * n + j];
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let q = (1.0 / (1.0 + dx * dx + dy * dy) / z).max(1e-300);
            kl += 2.0 * pij * (pij / q).ln();
        }
    }
    kl
}

/// Exact t-SNE into two dimensions. Sequential and fully determined by `cfg.seed`.
pub fn tsne(x: &DMatrix<f64>, cfg: &TsneConfig) -> Result<Projection> {
    let n = x.nrows();
    if n > MAX_POINTS {
        return Err(LensError::TooManyPoints { found: n, limit: MAX_POINTS });
    }
    let limit = n as f64 / 3.0;
    if !(cfg.perplexity >= 1.0 && cfg.perplexity < limit) {
        return Err(LensError::PerplexityTooLarge { perplexity: cfg.perplexity, limit });
    }
    if !(cfg.learning_rate > 0.0) || cfg.kl_every == 0 {
        return Err(LensError::InvalidConfig("learning_rate and kl_every must be positive".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(LensError::NonFinite("t-SNE input".into()));
    }

    let cond = conditional_p(&squared_distances(x), n, cfg.perplexity);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
            }
        }
    }
    drop(cond);

    let mut rng = seeded(cfg.seed);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            [1e-4 * a, 1e-4 * b]
        })
        .collect();
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut grad = vec![[0.0f64; 2]; n];
    let mut kl_trace = Vec::new();

    for it in 0..cfg.iterations {
        let exag = if it < cfg.exaggeration_iters { cfg.exaggeration } else { 1.0 };
        let momentum = if it < cfg.momentum_switch { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                z += 2.0 / (1.0 + dx * dx + dy * dy);
            }
        }
        for i in 0..n {
            let (mut gx, mut gy) = (0.0, 0.0);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                let m = (exag * p[i * n + j] - q / z) * q;
                gx += m * dx;
                gy += m * dy;
            }
            grad[i] = [4.0 * gx, 4.0 * gy];
        }
        for i in 0..n {
            for k in 0..2 {
                let g = grad[i][k];
                gains[i][k] = if (g > 0.0) != (update[i][k] > 0.0) { gains[i][k] + 0.2 } else { gains[i][k] * 0.8 };
                gains[i][k] = gains[i][k].max(0.01);
                update[i][k] = momentum * update[i][k] - cfg.learning_rate * gains[i][k] * g;
                y[i][k] += update[i][k];
            }
        }
        let mean = y.iter().fold([0.0, 0.0], |acc, v| [acc[0] + v[0], acc[1] + v[1]]);
        let mean = [mean[0] / n as f64, mean[1] / n as f64];
        y.iter_mut().for_each(|v| {
            v[0] -= mean[0];
            v[1] -= mean[1];
        });
        if (it + 1) % cfg.kl_every == 0 {
            let kl = kl_divergence(&p, &y);
            if !kl.is_finite() {
                return Err(LensError::NonFinite(format!("KL divergence at iteration {}", it + 1)));
            }
            kl_trace.push((it + 1, kl));
        }
    }
    let coords = DMatrix::from_fn(n, 2, |i, k| y[i][k]);
    Ok(Projection { coords, kl_trace })
}

pub fn write_projection_csv(p: &Projection, sample_ids: &[String], mut w: impl Write) -> Result<()> {
    if sample_ids.len() != p.coords.nrows() {
        return Err(LensError::LengthMismatch(sample_ids.len(), p.coords.nrows()));
    }
    writeln!(w, "sample_id,x,y")?;
    for (i, id) in sample_ids.iter().enumerate() {
        writeln!(w, "{id},{:?},{:?}", p.coords[(i, 0)], p.coords[(i, 1)])?;
    }
    Ok(())
}
