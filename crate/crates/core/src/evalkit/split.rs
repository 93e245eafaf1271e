use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::rng::seeded;
use crate::store::Label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Patient-level partition into a stratified holdout and `k` train/validation rotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub holdout_frac: f64,
    pub val_frac: f64,
    pub holdout: Vec<String>,
    pub folds: Vec<Fold>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub k: usize,
    pub holdout_frac: f64,
    pub val_frac: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { k: 3, holdout_frac: 0.10, val_frac: 0.10 }
    }
}

/// `round(frac · n)`, at least one when `frac > 0`.
fn share(frac: f64, n: usize) -> usize {
    let c = (frac * n as f64).round() as usize;
    if frac > 0.0 {
        c.max(1)
    } else {
        c
    }
}

/// Stratified holdout first, then each class's remaining patients are dealt
/// round-robin into `k` partitions. Rotation `i` validates on a stratified
/// `val_frac` of the non-holdout patients taken from partition `i` and
/// trains on the rest.
pub fn make_splits(patients: &[(String, Label)], cfg: &SplitConfig, seed: u64) -> Result<SplitPlan> {
    if cfg.k == 0 {
        return Err(EvalError::InvalidConfig("k must be at least 1".into()));
    }
    for (name, f) in [("holdout_frac", cfg.holdout_frac), ("val_frac", cfg.val_frac)] {
        if !(0.0..1.0).contains(&f) {
            return Err(EvalError::InvalidConfig(format!("{name} must lie in [0, 1)")));
        }
    }
    let mut by_class: BTreeMap<Label, Vec<&str>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for (id, label) in patients {
        if !seen.insert(id.as_str()) {
            return Err(EvalError::DuplicatePatient(id.clone()));
        }
        by_class.entry(*label).or_default().push(id);
    }
    for label in [0, 1] {
        let n = by_class.get(&label).map_or(0, Vec::len);
        if n < cfg.k + 1 {
            return Err(EvalError::TooFewPatients { label, found: n, needed: cfg.k + 1 });
        }
    }
    if by_class.len() > 2 {
        return Err(EvalError::BadLabel(*by_class.keys().last().expect("non-empty")));
    }

    let mut rng = seeded(seed);
    let mut holdout = Vec::new();
    let mut partitions: Vec<Vec<Vec<&str>>> = Vec::new();
    let mut val_counts = Vec::new();
    for ids in by_class.values_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let h = share(cfg.holdout_frac, ids.len()).min(ids.len() - cfg.k);
        holdout.extend(ids[..h].iter().map(|s| s.to_string()));
        let rest = &ids[h..];
        let mut parts = vec![Vec::new(); cfg.k];
        for (i, id) in rest.iter().enumerate() {
            parts[i % cfg.k].push(*id);
        }
        val_counts.push(share(cfg.val_frac, rest.len()));
        partitions.push(parts);
    }

    let folds = (0..cfg.k)
        .map(|i| {
            let mut train = Vec::new();
            let mut val = Vec::new();
            for (parts, &v) in partitions.iter().zip(&val_counts) {
                let v = v.min(parts[i].len());
                for (j, part) in parts.iter().enumerate() {
                    for (pos, id) in part.iter().enumerate() {
                        if j == i && pos < v {
                            val.push(id.to_string());
                        } else {
                            train.push(id.to_string());
                        }
                    }
                }
            }
            train.sort();
            val.sort();
            Fold { train, val }
        })
        .collect();
    holdout.sort();
    Ok(SplitPlan { seed, holdout_frac: cfg.holdout_frac, val_frac: cfg.val_frac, holdout, folds })
}

impl SplitPlan {
    /// Indices of the samples whose patient is in `ids`, in sample order.
    pub fn sample_indices(sample_patients: &[String], ids: &[String]) -> Vec<usize> {
        let set: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        sample_patients
            .iter()
            .enumerate()
            .filter(|(_, p)| set.contains(p.as_str()))
            .map(|(i, _)| i)
            .collect()
    }

    /// Checks patient-disjointness of holdout, train and validation in every rotation.
    pub fn validate(&self) -> Result<()> {
        let hold: BTreeSet<&String> = self.holdout.iter().collect();
        for (i, f) in self.folds.iter().enumerate() {
            let tr: BTreeSet<&String> = f.train.iter().collect();
            let va: BTreeSet<&String> = f.val.iter().collect();
            if tr.len() != f.train.len() || va.len() != f.val.len() {
                return Err(EvalError::InvalidPlan(format!("fold {i} repeats a patient")));
            }
            if !tr.is_disjoint(&va) || !tr.is_disjoint(&hold) || !va.is_disjoint(&hold) {
                return Err(EvalError::InvalidPlan(format!("fold {i} overlaps another partition")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cohort(pos: usize, neg: usize) -> Vec<(String, Label)> {
        (0..pos).map(|i| (format!("p{i:03}"), 1)).chain((0..neg).map(|i| (format!("n{i:03}"), 0))).collect()
    }

    fn count(ids: &[String], prefix: char) -> usize {
        ids.iter().filter(|s| s.starts_with(prefix)).count()
    }

    #[test]
    fn balanced_hundred() {
        let plan = make_splits(&cohort(50, 50), &SplitConfig::default(), 1).unwrap();
        assert_eq!(plan.holdout.len(), 10);
        assert_eq!(count(&plan.holdout, 'p'), 5);
        assert_eq!(plan.folds.len(), 3);
        plan.validate().unwrap();
    }

    #[test]
    fn kidney_sized_cohort() {
        let plan = make_splits(&cohort(120, 122), &SplitConfig::default(), 4).unwrap();
        assert_eq!(plan.holdout.len(), 24);
    }

    #[test]
    fn too_few() {
        let err = make_splits(&cohort(3, 10), &SplitConfig::default(), 1).unwrap_err();
        assert!(matches!(err, EvalError::TooFewPatients { label: 1, found: 3, needed: 4 }));
    }

    #[test]
    fn deterministic() {
        let a = make_splits(&cohort(30, 41), &SplitConfig::default(), 9).unwrap();
        let b = make_splits(&cohort(30, 41), &SplitConfig::default(), 9).unwrap();
        assert_eq!(a, b);
        let c = make_splits(&cohort(30, 41), &SplitConfig::default(), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn validation_rotates() {
        let plan = make_splits(&cohort(60, 60), &SplitConfig::default(), 2).unwrap();
        let vals: Vec<BTreeSet<&String>> = plan.folds.iter().map(|f| f.val.iter().collect()).collect();
        assert!(vals[0].is_disjoint(&vals[1]) && vals[1].is_disjoint(&vals[2]));
    }

    proptest! {
        #[test]
        fn invariants(pos in 4usize..80, neg in 4usize..80, seed in any::<u64>(), k in 2usize..4) {
            let cfg = SplitConfig { k, ..Default::default() };
            let plan = make_splits(&cohort(pos, neg), &cfg, seed).unwrap();
            plan.validate().unwrap();
            for f in &plan.folds {
                let all = plan.holdout.len() + f.train.len() + f.val.len();
                prop_assert_eq!(all, pos + neg);
                prop_assert!(!f.val.is_empty() && !f.train.is_empty());
                for (prefix, n) in [('p', pos), ('n', neg)] {
                    let rest = n - count(&plan.holdout, prefix);
                    let target = cfg.val_frac * rest as f64;
                    prop_assert!((count(&f.val, prefix) as f64 - target).abs() <= 1.0);
                }
            }
            for (prefix, n) in [('p', pos), ('n', neg)] {
                let target = cfg.holdout_frac * n as f64;
                prop_assert!((count(&plan.holdout, prefix) as f64 - target).abs() <= 1.0);
            }
        }
    }
}
