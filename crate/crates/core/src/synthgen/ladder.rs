use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Result, SynthError};
use crate::rng::seeded;
use crate::store::EmbeddingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LadderConfig {
    /// Members per duplicate group, the original included; 1 leaves the matrix unchanged.
    pub duplication_factor: usize,
    /// `None` appends exact copies; `Some(r)` appends copies whose sample
    /// correlation with the original is exactly `r`.
    pub noisy_correlation: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderTruth {
    /// Each group lists the original column followed by its copies.
    pub groups: Vec<Vec<usize>>,
    /// One representative per group plus every column outside the groups.
    pub minimal_set: Vec<usize>,
}

fn centered_unit(v: DVector<f64>) -> Option<DVector<f64>> {
    let mean = v.mean();
    let c = v.add_scalar(-mean);
    let norm = c.norm();
    (norm > 0.0).then(|| c / norm)
}

/// Appends `duplication_factor - 1` copies of each listed column.
pub fn redundancy_ladder(x: &EmbeddingMatrix, columns: &[usize], cfg: &LadderConfig) -> Result<(EmbeddingMatrix, LadderTruth)> {
    if cfg.duplication_factor == 0 {
        return Err(SynthError::ConfigInvalid("duplication_factor must be at least 1".into()));
    }
    if let Some(r) = cfg.noisy_correlation {
        if !(r > -1.0 && r < 1.0) {
            return Err(SynthError::ConfigInvalid("noisy_correlation must lie in (-1, 1)".into()));
        }
    }
    let d = x.dim();
    if let Some(&c) = columns.iter().find(|&&c| c >= d) {
        return Err(SynthError::ConfigInvalid(format!("column {c} out of range for {d} columns")));
    }
    let mut uniq = columns.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    if uniq.len() != columns.len() {
        return Err(SynthError::ConfigInvalid("columns listed twice".into()));
    }

    let n = x.n_samples();
    let mut rng = seeded(cfg.seed);
    let mut extra: Vec<DVector<f64>> = Vec::new();
    let mut groups = Vec::new();
    for &c in columns {
        let mut group = vec![c];
        let orig = x.values().column(c).into_owned();
        for _ in 1..cfg.duplication_factor {
            let col = match cfg.noisy_correlation {
                None => orig.clone(),
                Some(r) => {
                    let u = centered_unit(orig.clone())
                        .ok_or_else(|| SynthError::ConfigInvalid(format!("column {c} is constant")))?;
                    let e = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
                    let e = centered_unit(e).expect("gaussian draw is not constant");
                    let e = centered_unit(&e - &u * u.dot(&e)).expect("independent of the original");
                    let scale = (n as f64).sqrt();
                    (u * r + e * (1.0 - r * r).sqrt()) * scale
                }
            };
            group.push(d + extra.len());
            extra.push(col);
        }
        groups.push(group);
    }
    let values = DMatrix::from_fn(n, d + extra.len(), |i, j| if j < d { x.values()[(i, j)] } else { extra[j - d][i] });
    let minimal_set: Vec<usize> = (0..d).collect();
    let out = EmbeddingMatrix::new(x.encoder_id(), x.sample_ids().to_vec(), values)?;
    Ok((out, LadderTruth { groups, minimal_set }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::pearson;

    fn base() -> EmbeddingMatrix {
        let mut r = seeded(1);
        EmbeddingMatrix::from_values("e", DMatrix::from_fn(500, 5, |_, _| StandardNormal.sample(&mut r))).unwrap()
    }

    #[test]
    fn factor_one_is_identity() {
        let x = base();
        let (y, t) = redundancy_ladder(&x, &[0, 2], &LadderConfig { duplication_factor: 1, noisy_correlation: None, seed: 0 }).unwrap();
        assert_eq!(y.values(), x.values());
        assert_eq!(t.groups, vec![vec![0], vec![2]]);
    }

    #[test]
    fn exact_copies() {
        let (y, t) = redundancy_ladder(&base(), &[1], &LadderConfig { duplication_factor: 3, noisy_correlation: None, seed: 0 }).unwrap();
        assert_eq!(y.dim(), 7);
        assert_eq!(t.groups, vec![vec![1, 5, 6]]);
        assert_eq!(y.values().column(1), y.values().column(6));
    }

    #[test]
    fn noisy_copies_hit_target_correlation() {
        let (y, t) = redundancy_ladder(&base(), &[0, 3], &LadderConfig { duplication_factor: 2, noisy_correlation: Some(0.8), seed: 4 }).unwrap();
        for g in &t.groups {
            let a: Vec<f64> = y.values().column(g[0]).iter().copied().collect();
            let b: Vec<f64> = y.values().column(g[1]).iter().copied().collect();
            assert!((pearson(&a, &b).unwrap() - 0.8).abs() < 1e-12);
        }
    }
}
