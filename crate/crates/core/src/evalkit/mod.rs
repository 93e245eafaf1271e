//! Patient-stratified splits, binary classification metrics and paired
//! bootstrap comparison of two models on a shared holdout set.

mod split;

use std::fmt;
use std::io::Write;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use split::{make_splits, Fold, SplitConfig, SplitPlan};

use crate::rng::substream;
use crate::stats::rank_sum_test;
use crate::store::Label;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("class {label} has {found} patients, need at least {needed}")]
    TooFewPatients { label: Label, found: usize, needed: usize },
    #[error("patient `{0}` listed twice")]
    DuplicatePatient(String),
    #[error("label {0} is not 0 or 1")]
    BadLabel(Label),
    #[error("{probs} scores for {labels} labels")]
    LengthMismatch { probs: usize, labels: usize },
    #[error("score at position {0} is not finite")]
    NonFinite(usize),
    #[error("need at least {needed} samples, got {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("bootstrap iteration {0} drew a single class; {1} is undefined")]
    SingleClassResample(usize, Metric),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid split plan: {0}")]
    InvalidPlan(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    /// Absent when only one class is present.
    pub auc: Option<f64>,
    /// Absent without positive samples.
    pub sensitivity: Option<f64>,
    /// Absent without negative samples.
    pub specificity: Option<f64>,
    pub f1: f64,
    /// Set when nothing was predicted positive; `f1` is then 0.
    pub f1_degenerate: bool,
}

fn check(probs: &[f64], labels: &[Label]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(EvalError::LengthMismatch { probs: probs.len(), labels: labels.len() });
    }
    if let Some(i) = probs.iter().position(|p| !p.is_finite()) {
        return Err(EvalError::NonFinite(i));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(EvalError::BadLabel(l));
    }
    Ok(())
}

/// Mann–Whitney AUC with half credit for ties. Ranks are kept doubled so the
/// statistic is an exact integer and equals pair counting bit for bit.
pub fn auc(probs: &[f64], labels: &[Label]) -> Result<Option<f64>> {
    check(probs, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && probs[order[j + 1]] == probs[order[i]] {
            j += 1;
        }
        // positions i..=j share the doubled rank (i + 1) + (j + 1)
        let r2 = (i + j + 2) as u128;
        let pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank_sum2 += r2 * pos;
        i = j + 1;
    }
    let u2 = rank_sum2 - n_pos * (n_pos + 1);
    Ok(Some(u2 as f64 / (2 * n_pos * n_neg) as f64))
}

/// AUC, sensitivity, specificity and F1 with `label = 1 iff prob ≥ threshold`.
pub fn compute_metrics(probs: &[f64], labels: &[Label], threshold: f64) -> Result<ClassificationMetrics> {
    let auc = auc(probs, labels)?;
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in probs.iter().zip(labels) {
        match (p >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let ratio = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    let f1_degenerate = tp + fp == 0;
    let f1 = if f1_degenerate { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64 };
    Ok(ClassificationMetrics {
        auc,
        sensitivity: ratio(tp, fneg),
        specificity: ratio(tn, fp),
        f1,
        f1_degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Auc,
    Sensitivity,
    Specificity,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Auc, Metric::Sensitivity, Metric::Specificity, Metric::F1];

    pub fn of(self, m: &ClassificationMetrics) -> Option<f64> {
        match self {
            Metric::Auc => m.auc,
            Metric::Sensitivity => m.sensitivity,
            Metric::Specificity => m.specificity,
            Metric::F1 => Some(m.f1),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Auc => "auc",
            Metric::Sensitivity => "sensitivity",
            Metric::Specificity => "specificity",
            Metric::F1 => "f1",
        })
    }
}

impl std::str::FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Metric::ALL
            .into_iter()
            .find(|m| m.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown metric `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub iterations: usize,
    pub fraction: f64,
    pub threshold: f64,
    /// Number of comparisons for the Bonferroni correction.
    pub n_comparisons: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { iterations: 50, fraction: 0.8, threshold: 0.5, n_comparisons: 1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub metric: Metric,
    /// Per-iteration `[model_a, model_b]` metric values.
    pub values: Vec<[f64; 2]>,
    /// Sorted sample indices drawn in each iteration, shared by both models.
    pub index_log: Vec<Vec<usize>>,
    pub p_value: f64,
    pub adjusted_p: f64,
    pub n_comparisons: usize,
    pub tier: Tier,
}

/// Paired subsampling comparison: every iteration draws `⌊fraction·n⌋`
/// indices without replacement from its own derived stream, scores both
/// models on them, and the two resulting samples are compared with a
/// two-sided rank-sum test.
pub fn bootstrap_compare(a: &[f64], b: &[f64], labels: &[Label], metric: Metric, cfg: &BootstrapConfig) -> Result<ComparisonResult> {
    check(a, labels)?;
    check(b, labels)?;
    if cfg.iterations == 0 || cfg.n_comparisons == 0 {
        return Err(EvalError::InvalidConfig("iterations and n_comparisons must be positive".into()));
    }
    if !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
        return Err(EvalError::InvalidConfig("fraction must lie in (0, 1]".into()));
    }
    let n = labels.len();
    let m = (cfg.fraction * n as f64).floor() as usize;
    if m < 2 {
        return Err(EvalError::TooFewSamples { needed: (2.0 / cfg.fraction).ceil() as usize, found: n });
    }
    let rows = (0..cfg.iterations)
        .into_par_iter()
        .map(|it| {
            let mut rng = substream(cfg.seed, it as u64);
            let mut idx = index::sample(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            let ys: Vec<Label> = idx.iter().map(|&i| labels[i]).collect();
            let score = |p: &[f64]| -> Result<f64> {
                let ps: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
                let mm = compute_metrics(&ps, &ys, cfg.threshold)?;
                metric.of(&mm).ok_or(EvalError::SingleClassResample(it, metric))
            };
            Ok(([score(a)?, score(b)?], idx))
        })
        .collect::<Result<Vec<_>>>()?;
    let (values, index_log): (Vec<[f64; 2]>, Vec<Vec<usize>>) = rows.into_iter().unzip();
    let xa: Vec<f64> = values.iter().map(|v| v[0]).collect();
    let xb: Vec<f64> = values.iter().map(|v| v[1]).collect();
    let p_value = rank_sum_test(&xa, &xb).p_value;
    Ok(ComparisonResult {
        metric,
        values,
        index_log,
        p_value,
        adjusted_p: (p_value * cfg.n_comparisons as f64).min(1.0),
        n_comparisons: cfg.n_comparisons,
        tier: significance_tier(p_value, cfg.n_comparisons),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    #[serde(rename = "ns")]
    NotSignificant,
    #[serde(rename = "*")]
    One,
    #[serde(rename = "**")]
    Two,
    #[serde(rename = "***")]
    Three,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::NotSignificant => "ns",
            Tier::One => "*",
            Tier::Two => "**",
            Tier::Three => "***",
        })
    }
}

/// Bonferroni tiers on the unadjusted p: `*` below 0.05/n, `**` below 0.01/n, `***` below 0.001/n.
pub fn significance_tier(p: f64, n: usize) -> Tier {
    let n = n.max(1) as f64;
    if p < 0.001 / n {
        Tier::Three
    } else if p < 0.01 / n {
        Tier::Two
    } else if p < 0.05 / n {
        Tier::One
    } else {
        Tier::NotSignificant
    }
}

/// A named row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model_a: String,
    pub model_b: String,
    pub result: ComparisonResult,
}

pub fn write_comparisons_csv(rows: &[ComparisonRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "model_a,model_b,metric,mean_a,mean_b,p_value,adjusted_p,n_comparisons,tier")?;
    for r in rows {
        let c = &r.result;
        let k = c.values.len() as f64;
        let ma = c.values.iter().map(|v| v[0]).sum::<f64>() / k;
        let mb = c.values.iter().map(|v| v[1]).sum::<f64>() / k;
        writeln!(
            w,
            "{},{},{},{:?},{:?},{:?},{:?},{},{}",
            r.model_a, r.model_b, c.metric, ma, mb, c.p_value, c.adjusted_p, c.n_comparisons, c.tier
        )?;
    }
    Ok(())
}

/// One metrics row per named model.
pub fn write_metrics_csv(rows: &[(String, ClassificationMetrics)], mut w: impl Write) -> std::io::Result<()> {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:?}"));
    writeln!(w, "model,auc,sensitivity,specificity,f1,f1_degenerate")?;
    for (name, m) in rows {
        writeln!(
            w,
            "{name},{},{},{},{:?},{}",
            opt(m.auc),
            opt(m.sensitivity),
            opt(m.specificity),
            m.f1,
            m.f1_degenerate
        )?;
    }
    Ok(())
}
