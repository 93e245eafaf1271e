//! Dense linear-algebra helpers over `nalgebra::DMatrix<f64>`. Eigen and
//! singular value decompositions run through `faer`.

use faer::linalg::matmul::matmul;
use faer::{Accum, MatMut, MatRef, Par, Side};
use nalgebra::{DMatrix, DVector};

pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

pub fn center_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let means = column_means(m);
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    out
}

/// `aᵀ b` through the blocked gemm path.
pub fn xt_y(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows(), "xt_y: row counts differ");
    let mut out = DMatrix::zeros(a.ncols(), b.ncols());
    gemm(&mut out, as_faer(a).transpose(), as_faer(b));
    out
}

/// `a b` through the same kernel as [`xt_y`].
pub fn mul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.nrows(), "mul: inner dimensions differ");
    let mut out = DMatrix::zeros(a.nrows(), b.ncols());
    gemm(&mut out, as_faer(a), as_faer(b));
    out
}

pub(crate) fn gemm(out: &mut DMatrix<f64>, lhs: MatRef<'_, f64>, rhs: MatRef<'_, f64>) {
    let (r, c) = out.shape();
    let dst = MatMut::from_column_major_slice_mut(out.as_mut_slice(), r, c);
    matmul(dst, Accum::Replace, lhs, rhs, 1.0, Par::Seq);
}

/// Row-major copy of `m`, one contiguous slice per sample.
pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Principal-axis representation of a column-centered matrix.
#[derive(Debug, Clone)]
pub struct PrincipalBasis {
    /// `N × r` projections onto the principal axes, ordered by decreasing variance.
    pub scores: DMatrix<f64>,
    /// Squared singular values (sum of squares along each axis), descending.
    pub energies: Vec<f64>,
}

impl PrincipalBasis {
    /// Eigen-decomposes whichever of `XᵀX` / `XXᵀ` is smaller. Directions with
    /// energy below `1e-12 · max(N, D) · λ_max` are dropped as numerical rank
    /// deficiency.
    pub fn of_centered(x: &DMatrix<f64>) -> Self {
        let (n, d) = x.shape();
        let (scores, energies) = if d <= n {
            let cov = xt_y(x, x);
            let (vecs, vals) = sorted_eigen(cov);
            let r = numeric_rank(&vals, n.max(d));
            let basis = vecs.columns(0, r).into_owned();
            (mul(x, &basis), vals[..r].to_vec())
        } else {
            let gram = x * x.transpose();
            let (vecs, vals) = sorted_eigen(gram);
            let r = numeric_rank(&vals, n.max(d));
            let mut scores = vecs.columns(0, r).into_owned();
            for (j, mut col) in scores.column_iter_mut().enumerate() {
                col *= vals[j].sqrt();
            }
            (scores, vals[..r].to_vec())
        };
        PrincipalBasis { scores, energies }
    }

    pub fn rank(&self) -> usize {
        self.energies.len()
    }

    /// Smallest leading count whose cumulative energy reaches `fraction` of the total.
    pub fn components_for_fraction(&self, fraction: f64) -> usize {
        let total: f64 = self.energies.iter().sum();
        if !(total > 0.0) {
            return 0;
        }
        let mut acc = 0.0;
        for (i, e) in self.energies.iter().enumerate() {
            acc += e;
            if acc >= fraction * total * (1.0 - 1e-12) {
                return i + 1;
            }
        }
        self.energies.len()
    }
}

fn numeric_rank(vals: &[f64], scale: usize) -> usize {
    let max = vals.first().copied().unwrap_or(0.0);
    if !(max > 0.0) {
        return 0;
    }
    let tol = max * 1e-12 * scale as f64;
    vals.iter().take_while(|&&v| v > tol).count()
}

pub(crate) fn as_faer(m: &DMatrix<f64>) -> MatRef<'_, f64> {
    MatRef::from_column_major_slice(m.as_slice(), m.nrows(), m.ncols())
}

fn from_faer(m: MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Eigenpairs of a symmetric matrix sorted by decreasing eigenvalue.
pub fn sorted_eigen(m: DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let eig = as_faer(&m).self_adjoint_eigen(Side::Lower).expect("symmetric eigendecomposition converges");
    let values = eig.S().column_vector();
    let vectors = eig.U();
    let mut order: Vec<usize> = (0..values.nrows()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let vals = order.iter().map(|&i| values[i]).collect();
    let vecs = DMatrix::from_fn(vectors.nrows(), order.len(), |r, c| vectors[(r, order[c])]);
    (vecs, vals)
}

/// Full SVD `m = U·diag(σ)·Vᵀ` with σ descending; returns `(U, σ, V)`.
pub fn svd(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let d = as_faer(m).svd().expect("SVD converges");
    let s = d.S().column_vector();
    let sv = (0..s.nrows()).map(|i| s[i]).collect();
    (from_faer(d.U()), sv, from_faer(d.V()))
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut sv = as_faer(m).singular_values().expect("SVD converges");
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Pearson correlation of two equal-length slices; `None` when either is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}
