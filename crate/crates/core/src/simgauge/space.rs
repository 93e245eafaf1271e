use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, Dyn};
use rayon::prelude::*;

use super::SimilarityError;
use crate::linalg::{as_faer, center_columns, gemm, row_major, xt_y, PrincipalBasis};
use crate::store::{standardize, EmbeddingMatrix};

/// One embedding space with lazily computed, cached derived quantities.
///
/// Building a report over `m` encoders prepares each space once and shares it
/// across the `m(m-1)/2` pairs; every cache is a `OnceLock`, so concurrent
/// pair evaluation is safe and deterministic.
pub struct PreparedSpace {
    id: String,
    sample_ids: Vec<String>,
    centered: DMatrix<f64>,
    gram_norm: OnceLock<f64>,
    basis: OnceLock<PrincipalBasis>,
    standardized: OnceLock<DMatrix<f64>>,
    knn: OnceLock<(usize, Vec<Vec<u32>>)>,
    ridge: OnceLock<(f64, Option<Cholesky<f64, Dyn>>)>,
}

impl PreparedSpace {
    pub fn new(m: &EmbeddingMatrix) -> Self {
        PreparedSpace {
            id: m.encoder_id().to_string(),
            sample_ids: m.sample_ids().to_vec(),
            centered: center_columns(m.values()),
            gram_norm: OnceLock::new(),
            basis: OnceLock::new(),
            standardized: OnceLock::new(),
            knn: OnceLock::new(),
            ridge: OnceLock::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn n_samples(&self) -> usize {
        self.centered.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centered.ncols()
    }

    pub fn centered(&self) -> &DMatrix<f64> {
        &self.centered
    }

    /// ‖XcᵀXc‖_F
    pub(crate) fn gram_norm(&self) -> f64 {
        *self.gram_norm.get_or_init(|| xt_y(&self.centered, &self.centered).norm())
    }

    pub(crate) fn basis(&self) -> &PrincipalBasis {
        self.basis.get_or_init(|| PrincipalBasis::of_centered(&self.centered))
    }

    pub(crate) fn standardized(&self) -> &DMatrix<f64> {
        self.standardized.get_or_init(|| {
            let m = EmbeddingMatrix::from_values(&self.id, self.centered.clone()).expect("validated on construction");
            let (z, _) = standardize(&m, None).expect("own statistics");
            z.values().clone()
        })
    }

    /// Cholesky factor of `ZᵀZ + λI` on the standardized matrix. Cached for the
    /// first λ requested; other λ values are factored on demand.
    pub(crate) fn with_ridge_factor<R>(&self, lambda: f64, f: impl FnOnce(Option<&Cholesky<f64, Dyn>>) -> R) -> R {
        let build = || {
            let z = self.standardized();
            let mut g = xt_y(z, z);
            for i in 0..g.nrows() {
                g[(i, i)] += lambda;
            }
            Cholesky::new(g)
        };
        let (cached_lambda, factor) = self.ridge.get_or_init(|| (lambda, build()));
        if *cached_lambda == lambda {
            f(factor.as_ref())
        } else {
            f(build().as_ref())
        }
    }

    /// Sorted index lists of each sample's `k` nearest neighbours (self excluded).
    pub(crate) fn neighbours(&self, k: usize) -> std::borrow::Cow<'_, [Vec<u32>]> {
        let (cached_k, lists) = self.knn.get_or_init(|| (k, exact_knn(&self.centered, k)));
        if *cached_k == k {
            std::borrow::Cow::Borrowed(lists)
        } else {
            std::borrow::Cow::Owned(exact_knn(&self.centered, k))
        }
    }

    pub(crate) fn check_paired(&self, other: &PreparedSpace) -> Result<(), SimilarityError> {
        if self.n_samples() != other.n_samples() {
            return Err(SimilarityError::SampleCountMismatch {
                left: self.n_samples(),
                right: other.n_samples(),
            });
        }
        if self.sample_ids != other.sample_ids {
            return Err(SimilarityError::UnpairedSamples { left: self.id.clone(), right: other.id.clone() });
        }
        Ok(())
    }
}

const KNN_BLOCK: usize = 256;

/// Exact Euclidean k-NN. Candidates come from the Gram expansion
/// `‖a‖² + ‖b‖² − 2a·b`; the best `k + 16` are re-ranked with directly
/// computed distances so the result does not depend on cancellation error.
/// Ties go to the lower sample index.
pub(crate) fn exact_knn(x: &DMatrix<f64>, k: usize) -> Vec<Vec<u32>> {
    let n = x.nrows();
    let d = x.ncols();
    let rows = row_major(x);
    let norms: Vec<f64> = rows.chunks_exact(d).map(|r| r.iter().map(|v| v * v).sum()).collect();
    let xf = as_faer(x);
    let margin = (k + 16).min(n - 1);
    let starts: Vec<usize> = (0..n).step_by(KNN_BLOCK).collect();
    starts
        .par_iter()
        .flat_map_iter(|&b0| {
            let len = KNN_BLOCK.min(n - b0);
            // column r holds the inner products of sample b0 + r with every sample
            let mut g = DMatrix::zeros(n, len);
            gemm(&mut g, xf, xf.subrows(b0, len).transpose());
            let mut out = Vec::with_capacity(len);
            let mut cand: Vec<(f64, u32)> = Vec::with_capacity(n);
            for r in 0..len {
                let i = b0 + r;
                cand.clear();
                cand.extend(
                    g.column(r).iter().enumerate().filter(|&(j, _)| j != i).map(|(j, &p)| (norms[i] + norms[j] - 2.0 * p, j as u32)),
                );
                let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
                if margin < cand.len() {
                    cand.select_nth_unstable_by(margin - 1, cmp);
                    cand.truncate(margin);
                }
                let ri = &rows[i * d..(i + 1) * d];
                for c in cand.iter_mut() {
                    let j = c.1 as usize;
                    let rj = &rows[j * d..(j + 1) * d];
                    c.0 = ri.iter().zip(rj).map(|(a, b)| (a - b) * (a - b)).sum();
                }
                cand.sort_by(cmp);
                let mut nn: Vec<u32> = cand[..k].iter().map(|c| c.1).collect();
                nn.sort_unstable();
                out.push(nn);
            }
            out
        })
        .collect()
}
