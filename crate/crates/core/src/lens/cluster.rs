use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LensError, Result};
use crate::evalkit::{significance_tier, BootstrapConfig, Tier};
use crate::linalg::{center_columns, row_major};
use crate::rng::substream;
use crate::stats::{median, rank_sum_test};
use crate::store::Label;

const BLOCK: usize = 256;
/// Above this width distances come from the Gram expansion instead of explicit differences.
const DIRECT_MAX_DIM: usize = 64;

fn check_labels(n: usize, labels: &[Label]) -> Result<()> {
    if labels.len() != n {
        return Err(LensError::LengthMismatch(n, labels.len()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(LensError::SingleClass);
    }
    Ok(())
}

/// For every sample, the sums of Euclidean distances to all members of class 0 and class 1.
fn class_distance_sums(x: &DMatrix<f64>, labels: &[Label]) -> Vec<[f64; 2]> {
    let n = x.nrows();
    let d = x.ncols();
    let xc = center_columns(x);
    let rows = row_major(&xc);
    let norms: Vec<f64> = rows.chunks_exact(d.max(1)).map(|r| r.iter().map(|v| v * v).sum()).collect();
    let xt = (d > DIRECT_MAX_DIM).then(|| xc.transpose());
    let starts: Vec<usize> = (0..n).step_by(BLOCK).collect();
    starts
        .par_iter()
        .flat_map_iter(|&b0| {
            let len = BLOCK.min(n - b0);
            let gram = xt.as_ref().map(|t| xc.rows(b0, len) * t);
            (0..len)
                .map(|r| {
                    let i = b0 + r;
                    let ri = &rows[i * d..(i + 1) * d];
                    let mut sums = [0.0; 2];
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        let sq = match &gram {
                            Some(g) => (norms[i] + norms[j] - 2.0 * g[(r, j)]).max(0.0),
                            None => ri.iter().zip(&rows[j * d..(j + 1) * d]).map(|(a, b)| (a - b) * (a - b)).sum(),
                        };
                        sums[labels[j] as usize] += sq.sqrt();
                    }
                    sums
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Mean silhouette coefficient for a two-class labelling. A sample that is
/// alone in its class contributes 0.
pub fn silhouette(x: &DMatrix<f64>, labels: &[Label]) -> Result<f64> {
    let n = x.nrows();
    check_labels(n, labels)?;
    if n < 4 {
        return Err(LensError::TooFewSamples { needed: 4, found: n });
    }
    let counts = [labels.iter().filter(|&&l| l == 0).count(), labels.iter().filter(|&&l| l == 1).count()];
    if counts.contains(&0) {
        return Err(LensError::SingleClass);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(LensError::NonFinite("silhouette input".into()));
    }
    let sums = class_distance_sums(x, labels);
    let total: f64 = sums
        .iter()
        .zip(labels)
        .map(|(s, &l)| {
            let own = l as usize;
            if counts[own] == 1 {
                return 0.0;
            }
            let a = s[own] / (counts[own] - 1) as f64;
            let b = s[1 - own] / counts[1 - own] as f64;
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / n as f64)
}

/// Per class, the median Euclidean distance from members to the class mean;
/// absent for an empty class.
pub fn compactness(x: &DMatrix<f64>, labels: &[Label]) -> Result<[Option<f64>; 2]> {
    check_labels(x.nrows(), labels)?;
    let mut out = [None; 2];
    for (class, slot) in out.iter_mut().enumerate() {
        let idx: Vec<usize> = (0..x.nrows()).filter(|&i| labels[i] as usize == class).collect();
        if idx.is_empty() {
            continue;
        }
        let sub = x.select_rows(&idx);
        let centroid = sub.row_mean();
        let dists: Vec<f64> = sub.row_iter().map(|r| (r - &centroid).norm()).collect();
        *slot = median(&dists);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub silhouette: f64,
    pub compactness: [f64; 2],
}

impl ClusterStats {
    pub fn of(x: &DMatrix<f64>, labels: &[Label]) -> Result<Self> {
        let silhouette = silhouette(x, labels)?;
        let c = compactness(x, labels)?;
        Ok(ClusterStats {
            silhouette,
            compactness: [c[0].ok_or(LensError::SingleClass)?, c[1].ok_or(LensError::SingleClass)?],
        })
    }

    pub fn get(&self, s: ClusterStatistic) -> f64 {
        match s {
            ClusterStatistic::Silhouette => self.silhouette,
            ClusterStatistic::Compactness0 => self.compactness[0],
            ClusterStatistic::Compactness1 => self.compactness[1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterStatistic {
    #[serde(rename = "silhouette")]
    Silhouette,
    #[serde(rename = "compactness_0")]
    Compactness0,
    #[serde(rename = "compactness_1")]
    Compactness1,
}

impl ClusterStatistic {
    pub const ALL: [ClusterStatistic; 3] =
        [ClusterStatistic::Silhouette, ClusterStatistic::Compactness0, ClusterStatistic::Compactness1];
}

impl fmt::Display for ClusterStatistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClusterStatistic::Silhouette => "silhouette",
            ClusterStatistic::Compactness0 => "compactness_0",
            ClusterStatistic::Compactness1 => "compactness_1",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterComparison {
    pub set_a: String,
    pub set_b: String,
    pub statistic: ClusterStatistic,
    pub p_value: f64,
    pub adjusted_p: f64,
    pub tier: Tier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterBootstrap {
    /// Per feature set, one entry per iteration.
    pub stats: BTreeMap<String, Vec<ClusterStats>>,
    pub index_log: Vec<Vec<usize>>,
    pub comparisons: Vec<ClusterComparison>,
}

impl ClusterBootstrap {
    pub fn write_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "set_a,set_b,statistic,p_value,adjusted_p,tier")?;
        for c in &self.comparisons {
            writeln!(w, "{},{},{},{:?},{:?},{}", c.set_a, c.set_b, c.statistic, c.p_value, c.adjusted_p, c.tier)?;
        }
        Ok(())
    }
}

/// Paired subsampling of rows shared by every feature set; silhouette and
/// per-class compactness per iteration, rank-sum tests between every pair of sets.
pub fn clustering_bootstrap(
    xs: &BTreeMap<String, DMatrix<f64>>,
    labels: &[Label],
    cfg: &BootstrapConfig,
) -> Result<ClusterBootstrap> {
    let n = labels.len();
    for m in xs.values() {
        if m.nrows() != n {
            return Err(LensError::LengthMismatch(m.nrows(), n));
        }
    }
    if cfg.iterations == 0 || cfg.n_comparisons == 0 || !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
        return Err(LensError::InvalidConfig("iterations, n_comparisons > 0 and fraction in (0, 1] required".into()));
    }
    let m = (cfg.fraction * n as f64).floor() as usize;
    if m < 4 {
        return Err(LensError::TooFewSamples { needed: 4, found: m });
    }
    let per_iter = (0..cfg.iterations)
        .into_par_iter()
        .map(|it| {
            let mut rng = substream(cfg.seed, it as u64);
            let mut idx = index::sample(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            let ys: Vec<Label> = idx.iter().map(|&i| labels[i]).collect();
            let stats = xs
                .values()
                .map(|x| ClusterStats::of(&x.select_rows(&idx), &ys))
                .collect::<Result<Vec<_>>>()?;
            Ok((stats, idx))
        })
        .collect::<Result<Vec<_>>>()?;

    let names: Vec<&String> = xs.keys().collect();
    let mut stats: BTreeMap<String, Vec<ClusterStats>> = names.iter().map(|k| ((*k).clone(), Vec::new())).collect();
    let mut index_log = Vec::with_capacity(per_iter.len());
    for (row, idx) in per_iter {
        for (k, s) in names.iter().zip(row) {
            stats.get_mut(*k).expect("key present").push(s);
        }
        index_log.push(idx);
    }
    let mut comparisons = Vec::new();
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            for s in ClusterStatistic::ALL {
                let a: Vec<f64> = stats[names[i]].iter().map(|c| c.get(s)).collect();
                let b: Vec<f64> = stats[names[j]].iter().map(|c| c.get(s)).collect();
                let p = rank_sum_test(&a, &b).p_value;
                comparisons.push(ClusterComparison {
                    set_a: names[i].clone(),
                    set_b: names[j].clone(),
                    statistic: s,
                    p_value: p,
                    adjusted_p: (p * cfg.n_comparisons as f64).min(1.0),
                    tier: significance_tier(p, cfg.n_comparisons),
                });
            }
        }
    }
    Ok(ClusterBootstrap { stats, index_log, comparisons })
}
