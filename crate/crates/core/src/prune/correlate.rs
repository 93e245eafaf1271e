use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::linalg::xt_y;

/// Centered, unit-norm columns so that Pearson r is a dot product.
pub struct ColumnCorrelator {
    z: DMatrix<f64>,
    constant: Vec<bool>,
}

impl ColumnCorrelator {
    pub fn new(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut z = x.clone();
        let mut constant = Vec::with_capacity(x.ncols());
        for mut col in z.column_iter_mut() {
            let mean = col.sum() / n;
            col.add_scalar_mut(-mean);
            let norm = col.norm();
            // relative test: a column of large identical values leaves rounding residue
            let scale = mean.abs().max(1.0) * n.sqrt() * 1e-13;
            if norm > scale {
                col /= norm;
                constant.push(false);
            } else {
                col.fill(0.0);
                constant.push(true);
            }
        }
        ColumnCorrelator { z, constant }
    }

    pub fn is_constant(&self, j: usize) -> bool {
        self.constant[j]
    }

    /// r between columns `a` and `b`, clamped to [-1, 1].
    pub fn lazy(&self, a: usize, b: usize) -> f64 {
        self.z.column(a).dot(&self.z.column(b)).clamp(-1.0, 1.0)
    }

    /// Full `D × D` correlation matrix.
    pub fn full(&self) -> DMatrix<f64> {
        let mut m = xt_y(&self.z, &self.z);
        m.apply(|v| *v = v.clamp(-1.0, 1.0));
        m
    }

    /// Rank-order screen: the top feature is kept; each later feature is
    /// kept iff its |r| with every higher-ranked non-constant feature is ≤ θ.
    /// Constant columns (r undefined) are dropped unless ranked first.
    pub(crate) fn screen(&self, order: &[usize], theta: f64, corr: impl Fn(usize, usize) -> f64 + Sync) -> Vec<usize> {
        let keep: Vec<bool> = order
            .par_iter()
            .enumerate()
            .map(|(rank, &c)| {
                rank == 0
                    || (!self.constant[c]
                        && order[..rank].iter().all(|&h| self.constant[h] || corr(c, h).abs() <= theta))
            })
            .collect();
        order.iter().zip(keep).filter(|(_, k)| *k).map(|(&c, _)| c).collect()
    }

    /// Per rank position, the largest |r| with any higher-ranked non-constant
    /// feature: 0 for the top feature, ∞ for a constant column below it. A
    /// feature survives threshold θ iff its entry is ≤ θ.
    pub(crate) fn redundancy(&self, order: &[usize], corr: impl Fn(usize, usize) -> f64 + Sync) -> Vec<f64> {
        order
            .par_iter()
            .enumerate()
            .map(|(rank, &c)| {
                if rank == 0 {
                    0.0
                } else if self.constant[c] {
                    f64::INFINITY
                } else {
                    order[..rank]
                        .iter()
                        .filter(|&&h| !self.constant[h])
                        .map(|&h| corr(c, h).abs())
                        .fold(0.0, f64::max)
                }
            })
            .collect()
    }
}
