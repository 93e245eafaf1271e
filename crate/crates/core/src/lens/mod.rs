//! Interpretability and clustering analysis: attention percentile masks,
//! Dice overlap, region coverage, silhouette/compactness statistics and an
//! exact t-SNE projection.

mod cluster;
mod tsne;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use cluster::{
    clustering_bootstrap, compactness, silhouette, ClusterBootstrap, ClusterComparison, ClusterStatistic, ClusterStats,
};
pub use tsne::{tsne, write_projection_csv, Projection, TsneConfig};

use crate::stats::percentile;

/// Attention percentiles at which coverage and overlap are reported.
pub const PERCENTILE_GRID: [f64; 6] = [25.0, 50.0, 60.0, 70.0, 80.0, 90.0];

#[derive(Debug, thiserror::Error)]
pub enum LensError {
    #[error("attention map has no tiles")]
    EmptyMap,
    #[error("percentile {0} outside [0, 100)")]
    BadPercentile(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("maps are not aligned: {0}")]
    AlignmentMismatch(String),
    #[error("duplicate tile coordinate ({0}, {1})")]
    DuplicateCoord(i64, i64),
    #[error("attention value {value} at tile {index} must be finite and non-negative")]
    BadValue { index: usize, value: f64 },
    #[error("need exactly two non-empty classes")]
    SingleClass,
    #[error("need at least {needed} samples, got {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("perplexity {perplexity} must be at least 1 and below N/3 = {limit}")]
    PerplexityTooLarge { perplexity: f64, limit: f64 },
    #[error("exact t-SNE is limited to {limit} points, got {found}")]
    TooManyPoints { found: usize, limit: usize },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Eval(#[from] crate::evalkit::EvalError),
}

pub type Result<T> = std::result::Result<T, LensError>;

fn check_coords(coords: &[(i64, i64)]) -> Result<()> {
    let mut seen = HashSet::with_capacity(coords.len());
    for &(r, c) in coords {
        if !seen.insert((r, c)) {
            return Err(LensError::DuplicateCoord(r, c));
        }
    }
    Ok(())
}

/// Per-tile attention of one slide (or one tile image).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub slide_id: String,
    coords: Vec<(i64, i64)>,
    values: Vec<f64>,
}

impl AttentionMap {
    pub fn new(slide_id: impl Into<String>, coords: Vec<(i64, i64)>, values: Vec<f64>) -> Result<Self> {
        if coords.len() != values.len() {
            return Err(LensError::LengthMismatch(coords.len(), values.len()));
        }
        check_coords(&coords)?;
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(LensError::BadValue { index, value });
        }
        Ok(AttentionMap { slide_id: slide_id.into(), coords, values })
    }

    pub fn coords(&self) -> &[(i64, i64)] {
        &self.coords
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Reads `row,col,value` CSV.
    pub fn read_csv(r: impl Read, slide_id: impl Into<String>) -> Result<Self> {
        let mut coords = Vec::new();
        let mut values = Vec::new();
        for (i, rec) in csv::Reader::from_reader(r).records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let field = |k: usize| -> Result<&str> {
                rec.get(k).map(str::trim).ok_or_else(|| LensError::Parse { line, message: "expected 3 fields".into() })
            };
            let int = |k: usize| -> Result<i64> {
                field(k)?.parse().map_err(|e| LensError::Parse { line, message: format!("{e}") })
            };
            coords.push((int(0)?, int(1)?));
            values.push(field(2)?.parse().map_err(|e| LensError::Parse { line, message: format!("{e}") })?);
        }
        AttentionMap::new(slide_id, coords, values)
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "row,col,value")?;
        for (&(r, c), v) in self.coords.iter().zip(&self.values) {
            writeln!(w, "{r},{c},{v:?}")?;
        }
        Ok(())
    }

    /// Values reordered to follow `coords`.
    fn aligned_to(&self, coords: &[(i64, i64)]) -> Result<Vec<f64>> {
        if coords.len() != self.coords.len() {
            return Err(LensError::AlignmentMismatch(format!("{} vs {} tiles", coords.len(), self.coords.len())));
        }
        let index: HashMap<(i64, i64), usize> = self.coords.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        coords
            .iter()
            .map(|c| {
                index
                    .get(c)
                    .map(|&i| self.values[i])
                    .ok_or_else(|| LensError::AlignmentMismatch(format!("tile ({}, {}) missing", c.0, c.1)))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Tumor,
    Benign,
    Background,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Tumor => "tumor",
            Region::Benign => "benign",
            Region::Background => "background",
        })
    }
}

impl FromStr for Region {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tumor" | "tumour" => Ok(Region::Tumor),
            "benign" | "normal" => Ok(Region::Benign),
            "background" => Ok(Region::Background),
            other => Err(format!("unknown region `{other}`")),
        }
    }
}

/// Per-tile tissue annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMask {
    coords: Vec<(i64, i64)>,
    regions: Vec<Region>,
}

impl RegionMask {
    pub fn new(coords: Vec<(i64, i64)>, regions: Vec<Region>) -> Result<Self> {
        if coords.len() != regions.len() {
            return Err(LensError::LengthMismatch(coords.len(), regions.len()));
        }
        check_coords(&coords)?;
        Ok(RegionMask { coords, regions })
    }

    pub fn coords(&self) -> &[(i64, i64)] {
        &self.coords
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    /// Reads `row,col,region` CSV.
    pub fn read_csv(r: impl Read) -> Result<Self> {
        let mut coords = Vec::new();
        let mut regions = Vec::new();
        for (i, rec) in csv::Reader::from_reader(r).records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let bad = |message: String| LensError::Parse { line, message };
            if rec.len() != 3 {
                return Err(bad("expected 3 fields".into()));
            }
            let row = rec[0].trim().parse().map_err(|e| bad(format!("{e}")))?;
            let col = rec[1].trim().parse().map_err(|e| bad(format!("{e}")))?;
            coords.push((row, col));
            regions.push(rec[2].parse().map_err(bad)?);
        }
        RegionMask::new(coords, regions)
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "row,col,region")?;
        for (&(r, c), g) in self.coords.iter().zip(&self.regions) {
            writeln!(w, "{r},{c},{g}")?;
        }
        Ok(())
    }
}

/// Tiles whose attention strictly exceeds the map's own `p`-th percentile.
pub fn percentile_mask(a: &AttentionMap, p: f64) -> Result<Vec<bool>> {
    if !(0.0..100.0).contains(&p) {
        return Err(LensError::BadPercentile(p));
    }
    let thr = percentile(&a.values, p).ok_or(LensError::EmptyMap)?;
    Ok(a.values.iter().map(|&v| v > thr).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dice {
    pub value: f64,
    /// Both masks were empty; `value` is then 1 by convention.
    pub both_empty: bool,
}

pub fn dice(a: &[bool], b: &[bool]) -> Result<Dice> {
    if a.len() != b.len() {
        return Err(LensError::LengthMismatch(a.len(), b.len()));
    }
    let both = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    if total == 0 {
        return Ok(Dice { value: 1.0, both_empty: true });
    }
    Ok(Dice { value: 2.0 * both as f64 / total as f64, both_empty: false })
}

/// Dice overlap of two attention maps over the same tiles, each thresholded
/// at its own `p`-th percentile.
pub fn attention_dice(a: &AttentionMap, b: &AttentionMap, p: f64) -> Result<Dice> {
    let b_values = b.aligned_to(&a.coords)?;
    let b_aligned = AttentionMap { slide_id: b.slide_id.clone(), coords: a.coords.clone(), values: b_values };
    dice(&percentile_mask(a, p)?, &percentile_mask(&b_aligned, p)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub percentile: f64,
    /// Attended fraction of tumor tiles; absent when the slide has none.
    pub tumor: Option<f64>,
    pub benign: Option<f64>,
}

/// Fraction of each tissue region whose tiles are attended at percentile `p`.
/// Background tiles take part in thresholding but not in any denominator.
pub fn region_coverage(a: &AttentionMap, r: &RegionMask, p: f64) -> Result<Coverage> {
    let values = a.aligned_to(&r.coords)?;
    let aligned = AttentionMap { slide_id: a.slide_id.clone(), coords: r.coords.clone(), values };
    let mask = percentile_mask(&aligned, p)?;
    let frac = |region: Region| {
        let (hit, n) = mask
            .iter()
            .zip(&r.regions)
            .filter(|(_, g)| **g == region)
            .fold((0usize, 0usize), |(h, n), (m, _)| (h + usize::from(*m), n + 1));
        (n > 0).then(|| hit as f64 / n as f64)
    };
    Ok(Coverage { percentile: p, tumor: frac(Region::Tumor), benign: frac(Region::Benign) })
}

pub fn coverage_curve(a: &AttentionMap, r: &RegionMask, grid: &[f64]) -> Result<Vec<Coverage>> {
    grid.iter().map(|&p| region_coverage(a, r, p)).collect()
}
