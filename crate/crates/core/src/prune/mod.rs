//! Class-separation ranking, rank-ordered correlation pruning and the three fusion
//! schemes (majority vote, naive concatenation, pruned "intelligent" fusion).

mod correlate;
mod signature;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::stats::rank_sum_test;
use crate::store::{ColumnOrigin, EmbeddingMatrix, StoreError};

pub use correlate::ColumnCorrelator;
pub use signature::{PrunedSignature, RetentionProfile, RetentionRow, SweepResult};

/// The θ grid used when none is given.
pub const DEFAULT_THETAS: [f64; 6] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.7];

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("sample counts differ: {left} vs {right}")]
    SampleCountMismatch { left: usize, right: usize },
    #[error("labels contain a single class")]
    SingleClass,
    #[error("label value {0} is not 0 or 1")]
    BadLabel(u8),
    #[error("need at least {needed} samples, have {n}")]
    TooFewSamples { needed: usize, n: usize },
    #[error("theta {0} is outside (0, 1]")]
    BadTheta(f64),
    #[error("no features to prune")]
    EmptyInput,
    #[error("matrix has {found} columns but the signature expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("prediction sequences have different lengths")]
    LengthMismatch,
    #[error("need at least {0} inputs")]
    TooFewInputs(usize),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, PruneError>;

/// Horizontal concatenation in the given order. Provenance of every input
/// column is preserved; the result is named by joining the encoder ids with `+`.
pub fn concat_encoders(encoders: &[&EmbeddingMatrix]) -> Result<EmbeddingMatrix> {
    let first = encoders.first().ok_or(PruneError::TooFewInputs(1))?;
    if encoders.len() == 1 {
        return Ok((*first).clone());
    }
    let n = first.n_samples();
    for m in encoders {
        if m.n_samples() != n {
            return Err(PruneError::SampleCountMismatch { left: n, right: m.n_samples() });
        }
        if m.sample_ids() != first.sample_ids() {
            return Err(StoreError::Invalid(format!("{} rows are not paired with {}", m.encoder_id(), first.encoder_id())).into());
        }
    }
    let d: usize = encoders.iter().map(|m| m.dim()).sum();
    let mut values = DMatrix::zeros(n, d);
    let mut provenance = Vec::with_capacity(d);
    let mut offset = 0;
    for m in encoders {
        values.columns_mut(offset, m.dim()).copy_from(m.values());
        provenance.extend_from_slice(m.provenance());
        offset += m.dim();
    }
    let id = encoders.iter().map(|m| m.encoder_id()).collect::<Vec<_>>().join("+");
    Ok(EmbeddingMatrix::with_provenance(id, first.sample_ids().to_vec(), values, provenance)?)
}

/// Columns ordered by ascending two-sided Mann–Whitney p-value.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedFeatures {
    pub order: Vec<usize>,
    pub p_values: Vec<f64>,
}

fn check_labels(labels: &[u8], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(PruneError::SampleCountMismatch { left: n, right: labels.len() });
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(PruneError::BadLabel(l));
    }
    if n < 4 {
        return Err(PruneError::TooFewSamples { needed: 4, n });
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == n {
        return Err(PruneError::SingleClass);
    }
    Ok(())
}

pub fn rank_features(x: &EmbeddingMatrix, labels: &[u8]) -> Result<RankedFeatures> {
    check_labels(labels, x.n_samples())?;
    let p_values: Vec<f64> = (0..x.dim())
        .into_par_iter()
        .map(|j| {
            let col = x.values().column(j);
            let (mut hi, mut lo) = (Vec::new(), Vec::new());
            for (v, &l) in col.iter().zip(labels) {
                if l == 1 {
                    hi.push(*v)
                } else {
                    lo.push(*v)
                }
            }
            rank_sum_test(&hi, &lo).p_value
        })
        .collect();
    let mut order: Vec<usize> = (0..x.dim()).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    Ok(RankedFeatures { order, p_values })
}

fn check_theta(theta: f64) -> Result<()> {
    if theta > 0.0 && theta <= 1.0 {
        Ok(())
    } else {
        Err(PruneError::BadTheta(theta))
    }
}

/// Scan in rank order: the top feature is kept; each later feature is kept
/// iff its |Pearson r| with every higher-ranked feature, kept or not, is ≤ θ.
/// Retained sets are therefore nested in θ. Constant columns (r undefined)
/// are dropped unless ranked first.
pub fn correlation_prune(x: &EmbeddingMatrix, ranked: &RankedFeatures, theta: f64) -> Result<PrunedSignature> {
    check_theta(theta)?;
    if x.dim() == 0 || ranked.order.is_empty() {
        return Err(PruneError::EmptyInput);
    }
    if ranked.order.len() != x.dim() {
        return Err(PruneError::DimensionMismatch { expected: ranked.order.len(), found: x.dim() });
    }
    let corr = ColumnCorrelator::new(x.values());
    let retained = corr.screen(&ranked.order, theta, |a, b| corr.lazy(a, b));
    Ok(PrunedSignature::new(theta, retained, x))
}

/// One signature per θ from a single ranking. Uses the full correlation
/// matrix when it fits (≤ 4096 columns), lazily computed pairs otherwise.
pub fn sweep_thetas(x: &EmbeddingMatrix, labels: &[u8], thetas: &[f64]) -> Result<SweepResult> {
    if thetas.is_empty() {
        return Err(PruneError::TooFewInputs(1));
    }
    for &t in thetas {
        check_theta(t)?;
    }
    let ranked = rank_features(x, labels)?;
    let corr = ColumnCorrelator::new(x.values());
    let redundancy = match (x.dim() <= 4096).then(|| corr.full()) {
        Some(m) => corr.redundancy(&ranked.order, |a, b| m[(a, b)]),
        None => corr.redundancy(&ranked.order, |a, b| corr.lazy(a, b)),
    };
    let signatures: Vec<PrunedSignature> = thetas
        .iter()
        .map(|&theta| {
            let retained = ranked.order.iter().zip(&redundancy).filter(|(_, &r)| r <= theta).map(|(&c, _)| c).collect();
            PrunedSignature::new(theta, retained, x)
        })
        .collect();
    let profile = RetentionProfile::from_signatures(&signatures, x.provenance());
    Ok(SweepResult { ranked, signatures, profile })
}

/// Column selection in signature order.
pub fn apply_signature(x: &EmbeddingMatrix, sig: &PrunedSignature) -> Result<EmbeddingMatrix> {
    if x.dim() != sig.source_dim {
        return Err(PruneError::DimensionMismatch { expected: sig.source_dim, found: x.dim() });
    }
    Ok(x.select_columns(&sig.retained)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteResult {
    pub labels: Vec<u8>,
    /// Sample had exactly as many positive as negative votes (resolved to 1).
    pub ties: Vec<bool>,
    /// Share of models voting positive; usable as a score for AUC.
    pub positive_share: Vec<f64>,
}

pub fn majority_vote(predictions: &[Vec<u8>]) -> Result<VoteResult> {
    if predictions.len() < 2 {
        return Err(PruneError::TooFewInputs(2));
    }
    let n = predictions[0].len();
    if predictions.iter().any(|p| p.len() != n) {
        return Err(PruneError::LengthMismatch);
    }
    let models = predictions.len();
    let mut out = VoteResult { labels: Vec::with_capacity(n), ties: Vec::with_capacity(n), positive_share: Vec::with_capacity(n) };
    for i in 0..n {
        let mut pos = 0;
        for p in predictions {
            match p[i] {
                0 => {}
                1 => pos += 1,
                other => return Err(PruneError::BadLabel(other)),
            }
        }
        let tie = 2 * pos == models;
        out.labels.push(u8::from(2 * pos >= models));
        out.ties.push(tie);
        out.positive_share.push(pos as f64 / models as f64);
    }
    Ok(out)
}

/// Features retained by every task's signature.
pub fn common_features(signatures: &BTreeMap<String, PrunedSignature>) -> Result<BTreeSet<ColumnOrigin>> {
    if signatures.len() < 2 {
        return Err(PruneError::TooFewInputs(2));
    }
    let mut iter = signatures.values();
    let first = iter.next().expect("len checked");
    let mut common: BTreeSet<ColumnOrigin> = first.provenance.iter().cloned().collect();
    for s in iter {
        if s.source_dim != first.source_dim {
            return Err(PruneError::DimensionMismatch { expected: first.source_dim, found: s.source_dim });
        }
        let set: BTreeSet<ColumnOrigin> = s.provenance.iter().cloned().collect();
        common = common.intersection(&set).cloned().collect();
    }
    Ok(common)
}
