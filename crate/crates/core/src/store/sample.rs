use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{BagDataset, EmbeddingMatrix, Label, Result, StoreError};
use crate::rng;

/// Paired tile subsample: row `i` of every encoder matrix is the same tile.
#[derive(Debug, Clone, PartialEq)]
pub struct TileSample {
    pub encoders: BTreeMap<String, EmbeddingMatrix>,
    /// Label inherited from the tile's slide.
    pub labels: Vec<Label>,
    /// `(slide index, tile index)` of each sampled row.
    pub origin: Vec<(usize, usize)>,
}

/// Draws `n` tiles without replacement across the whole dataset, using the
/// same tiles for every encoder. Sample ids are `slide_id#tile`.
pub fn subsample_tiles(d: &BagDataset, n: usize, seed: u64) -> Result<TileSample> {
    let total = d.total_tiles();
    if n > total || n == 0 {
        return Err(StoreError::NotEnoughTiles { requested: n, available: total });
    }
    let mut flat = Vec::with_capacity(total);
    for (si, s) in d.slides.iter().enumerate() {
        flat.extend((0..s.n_tiles()).map(|ti| (si, ti)));
    }
    let mut r = rng::seeded(seed);
    let picked = rand::seq::index::sample(&mut r, total, n);
    let origin: Vec<(usize, usize)> = picked.iter().map(|i| flat[i]).collect();
    let labels = origin.iter().map(|&(si, _)| d.slides[si].label).collect();
    let ids: Vec<String> = origin.iter().map(|&(si, ti)| format!("{}#{ti}", d.slides[si].slide_id)).collect();
    let mut encoders = BTreeMap::new();
    for enc in d.encoders() {
        let first = d.slides[0].tiles[&enc].clone();
        let dim = first.dim();
        let mut values = DMatrix::zeros(n, dim);
        for (row, &(si, ti)) in origin.iter().enumerate() {
            let m = d.slides[si].tiles[&enc].values();
            if m.ncols() != dim {
                return Err(StoreError::Invalid(format!(
                    "encoder {enc} width differs on slide {}",
                    d.slides[si].slide_id
                )));
            }
            values.row_mut(row).copy_from(&m.row(ti));
        }
        let m = EmbeddingMatrix::with_provenance(enc.clone(), ids.clone(), values, first.provenance().to_vec())?;
        encoders.insert(enc, m);
    }
    Ok(TileSample { encoders, labels, origin })
}

/// Per-slide mean tile vector for one encoder (one row per slide).
pub fn slide_mean_matrix(d: &BagDataset, encoder: &str) -> Result<EmbeddingMatrix> {
    let first = d
        .slides
        .first()
        .and_then(|s| s.encoder(encoder))
        .ok_or_else(|| StoreError::Invalid(format!("unknown encoder {encoder}")))?;
    let mut values = DMatrix::zeros(d.slides.len(), first.dim());
    for (i, s) in d.slides.iter().enumerate() {
        let m = s.tiles[encoder].values();
        values.row_mut(i).copy_from(&m.row_mean());
    }
    let ids = d.slides.iter().map(|s| s.slide_id.clone()).collect();
    EmbeddingMatrix::with_provenance(encoder, ids, values, first.provenance().to_vec())
}

/// Per-column mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ColumnStats {
    pub const DEGENERATE_STD: f64 = 1e-12;

    pub fn of(m: &DMatrix<f64>) -> Self {
        let n = m.nrows() as f64;
        let mut mean = Vec::with_capacity(m.ncols());
        let mut std = Vec::with_capacity(m.ncols());
        for col in m.column_iter() {
            let mu = col.sum() / n;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            mean.push(mu);
            std.push(var.sqrt());
        }
        ColumnStats { mean, std }
    }

    /// Columns whose std is below [`Self::DEGENERATE_STD`].
    pub fn degenerate(&self) -> Vec<bool> {
        self.std.iter().map(|&s| s < Self::DEGENERATE_STD).collect()
    }
}

/// Z-scores every column, using `stats` when given (e.g. training statistics
/// applied to a test matrix) and otherwise the matrix's own. Degenerate
/// columns become all-zero.
pub fn standardize(m: &EmbeddingMatrix, stats: Option<&ColumnStats>) -> Result<(EmbeddingMatrix, ColumnStats)> {
    let stats = match stats {
        Some(s) => {
            if s.mean.len() != m.dim() || s.std.len() != m.dim() {
                return Err(StoreError::StatsDimensionMismatch { expected: m.dim(), found: s.mean.len() });
            }
            s.clone()
        }
        None => ColumnStats::of(m.values()),
    };
    let mut values = m.values().clone();
    for (j, mut col) in values.column_iter_mut().enumerate() {
        if stats.std[j] < ColumnStats::DEGENERATE_STD {
            col.fill(0.0);
        } else {
            col.apply(|v| *v = (*v - stats.mean[j]) / stats.std[j]);
        }
    }
    Ok((m.with_values(values)?, stats))
}
