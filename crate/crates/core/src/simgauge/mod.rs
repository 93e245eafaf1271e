//! Pairwise similarity between embedding spaces computed over the same samples.
//!
//! Five measures are provided: linear CKA, SVCCA, orthogonal Procrustes
//! distance, k-NN Jaccard overlap and ridge cross-prediction R². Each has a
//! standalone entry point taking two [`EmbeddingMatrix`] values; the
//! [`similarity_report`] driver shares per-space work across all pairs.

mod report;
mod space;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{mul, singular_values, svd, xt_y};
use crate::store::EmbeddingMatrix;

pub use report::{similarity_report, SimilarityReport, SimilarityRow};
pub use space::PreparedSpace;

#[derive(Debug, Error, PartialEq)]
pub enum SimilarityError {
    #[error("sample counts differ: {left} vs {right}")]
    SampleCountMismatch { left: usize, right: usize },
    #[error("rows of {left} and {right} are not the same samples")]
    UnpairedSamples { left: String, right: String },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("no singular directions retained")]
    RankCollapse,
    #[error("k = {k} needs more than {k} samples, have {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("ridge system is singular")]
    SingularSystem,
    #[error("need at least {needed} samples, have {n}")]
    TooFewSamples { needed: usize, n: usize },
    #[error("invalid metric config: {0}")]
    InvalidConfig(String),
    #[error("report needs at least two encoders")]
    TooFewEncoders,
}

pub type Result<T> = std::result::Result<T, SimilarityError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub knn_k: usize,
    pub ridge_lambda: f64,
    pub svcca_variance_fraction: f64,
    pub procrustes_dim_cap: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig { knn_k: 10, ridge_lambda: 1.0, svcca_variance_fraction: 0.99, procrustes_dim_cap: 256 }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.knn_k == 0 {
            return Err(SimilarityError::InvalidConfig("knn_k must be ≥ 1".into()));
        }
        if !(self.ridge_lambda > 0.0) || !self.ridge_lambda.is_finite() {
            return Err(SimilarityError::InvalidConfig("ridge_lambda must be a positive real".into()));
        }
        if !(self.svcca_variance_fraction > 0.0 && self.svcca_variance_fraction <= 1.0) {
            return Err(SimilarityError::InvalidConfig("svcca_variance_fraction must lie in (0, 1]".into()));
        }
        if self.procrustes_dim_cap == 0 {
            return Err(SimilarityError::InvalidConfig("procrustes_dim_cap must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// All five scores for one ordered pair `(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScores {
    pub cka: f64,
    pub svcca: f64,
    pub procrustes: f64,
    pub knn_jaccard: f64,
    /// R² of predicting `b` from `a`. Not clamped; may be negative.
    pub r2_x_to_y: f64,
    pub r2_y_to_x: f64,
}

/// Ridge added to each whitened covariance, relative to the mean retained energy.
const SVCCA_RIDGE: f64 = 1e-8;

pub fn linear_cka(x: &EmbeddingMatrix, y: &EmbeddingMatrix) -> Result<f64> {
    cka_prepared(&PreparedSpace::new(x), &PreparedSpace::new(y))
}

/// `‖YcᵀXc‖²_F / (‖XcᵀXc‖_F · ‖YcᵀYc‖_F)`, the feature-space form of linear CKA.
pub fn cka_prepared(x: &PreparedSpace, y: &PreparedSpace) -> Result<f64> {
    x.check_paired(y)?;
    if x.n_samples() < 3 {
        return Err(SimilarityError::TooFewSamples { needed: 3, n: x.n_samples() });
    }
    let (nx, ny) = (x.gram_norm(), y.gram_norm());
    if !(nx > 0.0) || !(ny > 0.0) {
        return Err(SimilarityError::DegenerateInput("centered matrix is all zeros".into()));
    }
    let cross = xt_y(x.centered(), y.centered()).norm_squared();
    Ok((cross / (nx * ny)).clamp(0.0, 1.0))
}

pub fn svcca(x: &EmbeddingMatrix, y: &EmbeddingMatrix, cfg: &MetricConfig) -> Result<f64> {
    svcca_prepared(&PreparedSpace::new(x), &PreparedSpace::new(y), cfg)
}

/// Mean canonical correlation between the leading singular subspaces.
///
/// Principal scores are mutually orthogonal, so whitening each retained set
/// reduces to dividing every score column by `sqrt(energy + ridge)`; the
/// canonical correlations are then the singular values of `WxᵀWy`.
pub fn svcca_prepared(x: &PreparedSpace, y: &PreparedSpace, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    x.check_paired(y)?;
    if x.n_samples() <= 2 {
        return Err(SimilarityError::TooFewSamples { needed: 3, n: x.n_samples() });
    }
    let wx = whitened_leading(x, cfg.svcca_variance_fraction)?;
    let wy = whitened_leading(y, cfg.svcca_variance_fraction)?;
    let m = xt_y(&wx, &wy);
    let k = m.nrows().min(m.ncols());
    let sv = singular_values(&m);
    let mean = sv.iter().take(k).map(|s| s.min(1.0)).sum::<f64>() / k as f64;
    Ok(mean.clamp(0.0, 1.0))
}

fn whitened_leading(s: &PreparedSpace, fraction: f64) -> Result<DMatrix<f64>> {
    let basis = s.basis();
    let k = basis.components_for_fraction(fraction);
    if k == 0 {
        return Err(SimilarityError::RankCollapse);
    }
    let ridge = SVCCA_RIDGE * basis.energies[..k].iter().sum::<f64>() / k as f64;
    let mut w = basis.scores.columns(0, k).into_owned();
    for (j, mut col) in w.column_iter_mut().enumerate() {
        col /= (basis.energies[j] + ridge).sqrt();
    }
    Ok(w)
}

pub fn procrustes_distance(x: &EmbeddingMatrix, y: &EmbeddingMatrix, cfg: &MetricConfig) -> Result<f64> {
    procrustes_prepared(&PreparedSpace::new(x), &PreparedSpace::new(y), cfg)
}

/// Residual `‖A − B·R‖_F` after optimal orthogonal alignment, where `A`, `B`
/// are the principal scores reduced to a common width and scaled to unit
/// Frobenius norm. Equals `√(2 − 2Σσᵢ)`; it is evaluated directly to avoid
/// the cancellation of that closed form near zero.
pub fn procrustes_prepared(x: &PreparedSpace, y: &PreparedSpace, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    x.check_paired(y)?;
    let d = x.dim().min(y.dim()).min(cfg.procrustes_dim_cap);
    let a = reduced_unit(x, d)?;
    let b = reduced_unit(y, d)?;
    let m = xt_y(&b, &a);
    let (u, _, v) = svd(&m);
    // maximise tr(Rᵀ BᵀA): R = U Vᵀ
    let r = u * v.transpose();
    let resid = (&a - mul(&b, &r)).norm();
    Ok(resid.clamp(0.0, std::f64::consts::SQRT_2))
}

fn reduced_unit(s: &PreparedSpace, d: usize) -> Result<DMatrix<f64>> {
    let basis = s.basis();
    let keep = d.min(basis.rank());
    let mut out = DMatrix::zeros(s.n_samples(), d);
    out.columns_mut(0, keep).copy_from(&basis.scores.columns(0, keep));
    let norm = out.norm();
    if !(norm > 0.0) {
        return Err(SimilarityError::DegenerateInput(format!("{} has no variance", s.id())));
    }
    Ok(out / norm)
}

pub fn knn_jaccard(x: &EmbeddingMatrix, y: &EmbeddingMatrix, cfg: &MetricConfig) -> Result<f64> {
    knn_prepared(&PreparedSpace::new(x), &PreparedSpace::new(y), cfg)
}

pub fn knn_prepared(x: &PreparedSpace, y: &PreparedSpace, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    x.check_paired(y)?;
    let (n, k) = (x.n_samples(), cfg.knn_k);
    if n <= k {
        return Err(SimilarityError::KTooLarge { k, n });
    }
    let nx = x.neighbours(k);
    let ny = y.neighbours(k);
    let total: f64 = nx.iter().zip(ny.iter()).map(|(a, b)| jaccard_sorted(a, b)).sum();
    Ok(total / n as f64)
}

fn jaccard_sorted(a: &[u32], b: &[u32]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// In-sample R² of ridge maps `x → y` and `y → x` on standardized features.
pub fn ridge_cross_r2(x: &EmbeddingMatrix, y: &EmbeddingMatrix, cfg: &MetricConfig) -> Result<(f64, f64)> {
    let (px, py) = (PreparedSpace::new(x), PreparedSpace::new(y));
    Ok((ridge_prepared(&px, &py, cfg)?, ridge_prepared(&py, &px, cfg)?))
}

/// `B = (XᵀX + λI)⁻¹XᵀY`, `R² = 1 − ‖Y − XB‖²_F / ‖Y − Ȳ‖²_F`.
pub fn ridge_prepared(x: &PreparedSpace, y: &PreparedSpace, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    x.check_paired(y)?;
    let zx = x.standardized();
    let zy = y.standardized();
    let ss_tot = zy.norm_squared();
    if !(ss_tot > 0.0) {
        return Err(SimilarityError::DegenerateInput(format!("{} has no variance", y.id())));
    }
    let rhs = xt_y(zx, zy);
    let coef = x.with_ridge_factor(cfg.ridge_lambda, |f| f.map(|c| c.solve(&rhs)));
    let coef = coef.ok_or(SimilarityError::SingularSystem)?;
    let ss_res = (zy - mul(zx, &coef)).norm_squared();
    Ok(1.0 - ss_res / ss_tot)
}

/// All five measures for one pair.
pub fn score_pair(x: &PreparedSpace, y: &PreparedSpace, cfg: &MetricConfig) -> Result<SimilarityScores> {
    Ok(SimilarityScores {
        cka: cka_prepared(x, y)?,
        svcca: svcca_prepared(x, y, cfg)?,
        procrustes: procrustes_prepared(x, y, cfg)?,
        knn_jaccard: knn_prepared(x, y, cfg)?,
        r2_x_to_y: ridge_prepared(x, y, cfg)?,
        r2_y_to_x: ridge_prepared(y, x, cfg)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut r = crate::rng::seeded(seed);
        DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut r))
    }

    fn orthogonal(d: usize, seed: u64) -> DMatrix<f64> {
        gaussian(d, d, seed).qr().q()
    }

    fn emb(v: DMatrix<f64>) -> EmbeddingMatrix {
        EmbeddingMatrix::from_values("e", v).unwrap()
    }

    #[test]
    fn cka_self_and_rotation() {
        let x = gaussian(200, 8, 1);
        let y = &x * orthogonal(8, 2) * 3.7;
        assert!((linear_cka(&emb(x.clone()), &emb(x.clone())).unwrap() - 1.0).abs() < 1e-12);
        assert!((linear_cka(&emb(x), &emb(y)).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn cka_symmetry() {
        let x = emb(gaussian(100, 5, 3));
        let y = emb(gaussian(100, 7, 4));
        let a = linear_cka(&x, &y).unwrap();
        let b = linear_cka(&y, &x).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn cka_degenerate_and_mismatch() {
        let zero = emb(DMatrix::from_element(5, 2, 1.0));
        let x = emb(gaussian(5, 2, 1));
        assert!(matches!(linear_cka(&zero, &x), Err(SimilarityError::DegenerateInput(_))));
        let short = emb(gaussian(4, 2, 1));
        assert!(matches!(linear_cka(&x, &short), Err(SimilarityError::SampleCountMismatch { .. })));
    }

    #[test]
    fn svcca_rotation_invariant() {
        let x = gaussian(300, 10, 5);
        let y = &x * orthogonal(10, 6);
        let cfg = MetricConfig::default();
        assert!((svcca(&emb(x), &emb(y), &cfg).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn procrustes_rotation_and_reflection() {
        let x = gaussian(150, 6, 7);
        let cfg = MetricConfig::default();
        let y = &x * orthogonal(6, 8);
        assert!(procrustes_distance(&emb(x.clone()), &emb(y), &cfg).unwrap() < 1e-8);
        assert!(procrustes_distance(&emb(x.clone()), &emb(-x), &cfg).unwrap() < 1e-8);
    }

    #[test]
    fn procrustes_matches_rotation_grid_in_2d() {
        // Independent oracle: scan all planar rotations and reflections on a
        // 2-feature toy set and take the smallest residual.
        let x = gaussian(40, 2, 9);
        let y = gaussian(40, 2, 10) * 0.3 + &x;
        let unit = |m: &DMatrix<f64>| {
            let c = crate::linalg::center_columns(m);
            let n = c.norm();
            c / n
        };
        let (a, b) = (unit(&x), unit(&y));
        let mut best = f64::INFINITY;
        for step in 0..=200_000 {
            let t = step as f64 / 200_000.0 * std::f64::consts::TAU;
            let (s, c) = t.sin_cos();
            for r in [
                DMatrix::from_row_slice(2, 2, &[c, -s, s, c]),
                DMatrix::from_row_slice(2, 2, &[c, s, s, -c]),
            ] {
                best = best.min((&a - &b * r).norm());
            }
        }
        let got = procrustes_distance(&emb(x), &emb(y), &MetricConfig::default()).unwrap();
        assert!(got <= best + 1e-12, "{got} vs grid {best}");
        assert!(best - got < 1e-8, "{got} vs grid {best}");
    }

    #[test]
    fn knn_self_and_isometry() {
        let x = gaussian(120, 4, 11);
        let cfg = MetricConfig::default();
        assert_eq!(knn_jaccard(&emb(x.clone()), &emb(x.clone()), &cfg).unwrap(), 1.0);
        let y = &x * orthogonal(4, 12) * 2.5;
        assert_eq!(knn_jaccard(&emb(x), &emb(y), &cfg).unwrap(), 1.0);
    }

    #[test]
    fn knn_k_too_large() {
        let x = emb(gaussian(10, 2, 1));
        assert!(matches!(knn_jaccard(&x, &x, &MetricConfig::default()), Err(SimilarityError::KTooLarge { .. })));
    }

    #[test]
    fn ridge_identity_and_linear_image() {
        let cfg = MetricConfig { ridge_lambda: 1e-8, ..Default::default() };
        let x = gaussian(200, 6, 13);
        let (a, b) = ridge_cross_r2(&emb(x.clone()), &emb(x.clone()), &cfg).unwrap();
        assert!((a - 1.0).abs() < 1e-6 && (b - 1.0).abs() < 1e-6);
        let y = &x * gaussian(6, 3, 14);
        let (xy, _) = ridge_cross_r2(&emb(x), &emb(y), &cfg).unwrap();
        assert!((xy - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ridge_decreases_with_lambda() {
        let x = emb(gaussian(100, 5, 15));
        let y = emb(gaussian(100, 5, 16) + x.values() * 0.5);
        let mut last = f64::INFINITY;
        for lambda in [1e-6, 1e-2, 1.0, 10.0, 1e3] {
            let cfg = MetricConfig { ridge_lambda: lambda, ..Default::default() };
            let (r2, _) = ridge_cross_r2(&x, &y, &cfg).unwrap();
            assert!(r2 <= last + 1e-12);
            last = r2;
        }
    }

    #[test]
    fn config_rejects_nonpositive_lambda() {
        let cfg = MetricConfig { ridge_lambda: 0.0, ..Default::default() };
        let x = emb(gaussian(20, 2, 1));
        assert!(matches!(ridge_cross_r2(&x, &x, &cfg), Err(SimilarityError::InvalidConfig(_))));
    }
}
