//! Data model for multi-encoder embedding datasets and their file formats.
//!
//! All types are immutable after construction; they are `Send + Sync` and can
//! be shared read-only across threads.

mod binary;
mod csvio;
mod manifest;
mod sample;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::PathBuf;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use binary::{decode_embedding, encode_embedding, load_embedding_binary, write_embedding_binary};
pub use csvio::{load_embedding_csv, read_embedding_csv, write_embedding_csv};
pub use manifest::{load_embedding_file, load_manifest, Dataset};
pub use sample::{slide_mean_matrix, standardize, subsample_tiles, ColumnStats, TileSample};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing or malformed header (expected `sample_id,f0,...`)")]
    MissingHeader,
    #[error("line {line}: expected {expected} cells, found {found}")]
    RaggedRow { line: u64, expected: usize, found: usize },
    #[error("line {line}, column {column}: non-finite value `{value}`")]
    NonFiniteValue { line: u64, column: usize, value: String },
    #[error("line {line}, column {column}: cannot parse `{value}` as a real")]
    BadNumber { line: u64, column: usize, value: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad magic bytes (not an EMBG file)")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("file truncated")]
    TruncatedFile,
    #[error("invalid UTF-8 in string table")]
    InvalidUtf8,
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("slide {slide_id}: encoder {encoder_a} has {count_a} tiles but {encoder_b} has {count_b}")]
    TileCountMismatch {
        slide_id: String,
        encoder_a: String,
        encoder_b: String,
        count_a: usize,
        count_b: usize,
    },
    #[error("slide {slide_id}: unknown label `{label}`")]
    UnknownLabel { slide_id: String, label: String },
    #[error("duplicate slide id `{0}`")]
    DuplicateSlide(String),
    #[error("patient {0} has slides with conflicting labels")]
    InconsistentPatientLabel(String),
    #[error("requested {requested} tiles but only {available} available")]
    NotEnoughTiles { requested: usize, available: usize },
    #[error("stats cover {found} columns but matrix has {expected}")]
    StatsDimensionMismatch { expected: usize, found: usize },
    #[error("invalid data: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// Where a column came from: the encoder that produced it and its index in
/// that encoder's native output.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ColumnOrigin {
    pub encoder: String,
    pub column: usize,
}

/// `N × D` features of one encoder over `N` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    encoder_id: String,
    sample_ids: Vec<String>,
    values: DMatrix<f64>,
    provenance: Vec<ColumnOrigin>,
}

impl EmbeddingMatrix {
    /// Builds a matrix whose provenance is `(encoder_id, j)` for column `j`.
    pub fn new(encoder_id: impl Into<String>, sample_ids: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        let encoder_id = encoder_id.into();
        let provenance = (0..values.ncols())
            .map(|column| ColumnOrigin { encoder: encoder_id.clone(), column })
            .collect();
        Self::with_provenance(encoder_id, sample_ids, values, provenance)
    }

    pub fn with_provenance(
        encoder_id: impl Into<String>,
        sample_ids: Vec<String>,
        values: DMatrix<f64>,
        provenance: Vec<ColumnOrigin>,
    ) -> Result<Self> {
        let (n, d) = values.shape();
        if n == 0 || d == 0 {
            return Err(StoreError::Invalid(format!("matrix must be non-empty, got {n}x{d}")));
        }
        if sample_ids.len() != n {
            return Err(StoreError::Invalid(format!(
                "{} sample ids for {n} rows",
                sample_ids.len()
            )));
        }
        if provenance.len() != d {
            return Err(StoreError::Invalid(format!("{} provenance entries for {d} columns", provenance.len())));
        }
        let mut seen = HashSet::with_capacity(d);
        if !provenance.iter().all(|p| seen.insert(p)) {
            return Err(StoreError::Invalid("duplicate provenance entry".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StoreError::Invalid("matrix contains NaN or infinite values".into()));
        }
        Ok(EmbeddingMatrix { encoder_id: encoder_id.into(), sample_ids, values, provenance })
    }

    /// Synthesizes sample ids `s0, s1, ...`.
    pub fn from_values(encoder_id: impl Into<String>, values: DMatrix<f64>) -> Result<Self> {
        let ids = (0..values.nrows()).map(|i| format!("s{i}")).collect();
        Self::new(encoder_id, ids, values)
    }

    pub fn encoder_id(&self) -> &str {
        &self.encoder_id
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn provenance(&self) -> &[ColumnOrigin] {
        &self.provenance
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Renames the matrix. Columns whose provenance pointed at the old id
    /// follow the rename.
    pub fn renamed(mut self, encoder_id: impl Into<String>) -> Self {
        let new = encoder_id.into();
        for p in &mut self.provenance {
            if p.encoder == self.encoder_id {
                p.encoder = new.clone();
            }
        }
        self.encoder_id = new;
        self
    }

    /// Same metadata, new values of identical shape.
    pub fn with_values(&self, values: DMatrix<f64>) -> Result<Self> {
        if values.shape() != self.values.shape() {
            return Err(StoreError::Invalid("replacement values change the shape".into()));
        }
        Self::with_provenance(self.encoder_id.clone(), self.sample_ids.clone(), values, self.provenance.clone())
    }

    /// Row subset in the order given.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let d = self.dim();
        let values = DMatrix::from_fn(rows.len(), d, |r, c| self.values[(rows[r], c)]);
        let ids = rows.iter().map(|&r| self.sample_ids[r].clone()).collect();
        Self::with_provenance(self.encoder_id.clone(), ids, values, self.provenance.clone())
    }

    /// Column subset in the order given, provenance carried along.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let values = self.values.select_columns(cols.iter());
        let prov = cols.iter().map(|&c| self.provenance[c].clone()).collect();
        Self::with_provenance(self.encoder_id.clone(), self.sample_ids.clone(), values, prov)
    }
}

/// Binary slide label: 0 = low, 1 = high.
pub type Label = u8;

/// Tile bags of one slide, one matrix per encoder, row `i` being the same
/// physical tile in every encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideBag {
    pub slide_id: String,
    pub patient_id: String,
    pub label: Label,
    pub tiles: BTreeMap<String, EmbeddingMatrix>,
    pub coords: Vec<(i64, i64)>,
}

impl SlideBag {
    pub fn new(
        slide_id: impl Into<String>,
        patient_id: impl Into<String>,
        label: Label,
        tiles: BTreeMap<String, EmbeddingMatrix>,
        coords: Option<Vec<(i64, i64)>>,
    ) -> Result<Self> {
        let slide_id = slide_id.into();
        if label > 1 {
            return Err(StoreError::UnknownLabel { slide_id, label: label.to_string() });
        }
        let mut iter = tiles.iter();
        let Some((first_enc, first)) = iter.next() else {
            return Err(StoreError::Invalid(format!("slide {slide_id} has no encoders")));
        };
        let t = first.n_samples();
        for (enc, m) in iter {
            if m.n_samples() != t {
                return Err(StoreError::TileCountMismatch {
                    slide_id,
                    encoder_a: first_enc.clone(),
                    encoder_b: enc.clone(),
                    count_a: t,
                    count_b: m.n_samples(),
                });
            }
        }
        let coords = coords.unwrap_or_else(|| default_grid(t));
        if coords.len() != t {
            return Err(StoreError::Invalid(format!(
                "slide {slide_id}: {} coords for {t} tiles",
                coords.len()
            )));
        }
        let unique: HashSet<_> = coords.iter().collect();
        if unique.len() != coords.len() {
            return Err(StoreError::Invalid(format!("slide {slide_id}: duplicate tile coordinates")));
        }
        Ok(SlideBag { slide_id, patient_id: patient_id.into(), label, tiles, coords })
    }

    pub fn n_tiles(&self) -> usize {
        self.coords.len()
    }

    pub fn encoder(&self, id: &str) -> Option<&EmbeddingMatrix> {
        self.tiles.get(id)
    }
}

/// Row-major square-ish grid positions for `t` tiles.
pub fn default_grid(t: usize) -> Vec<(i64, i64)> {
    let side = (t as f64).sqrt().ceil().max(1.0) as usize;
    (0..t).map(|i| ((i / side) as i64, (i % side) as i64)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagDataset {
    pub slides: Vec<SlideBag>,
    pub class_names: [String; 2],
}

impl BagDataset {
    pub fn new(slides: Vec<SlideBag>, class_names: [String; 2]) -> Result<Self> {
        let mut ids = HashSet::new();
        for s in &slides {
            if !ids.insert(s.slide_id.as_str()) {
                return Err(StoreError::DuplicateSlide(s.slide_id.clone()));
            }
        }
        if let Some(first) = slides.first() {
            let encs: BTreeSet<_> = first.tiles.keys().collect();
            for s in &slides[1..] {
                if s.tiles.keys().collect::<BTreeSet<_>>() != encs {
                    return Err(StoreError::Invalid(format!(
                        "slide {} has a different encoder set",
                        s.slide_id
                    )));
                }
            }
        }
        let ds = BagDataset { slides, class_names };
        ds.patients()?;
        Ok(ds)
    }

    pub fn encoders(&self) -> Vec<String> {
        self.slides.first().map(|s| s.tiles.keys().cloned().collect()).unwrap_or_default()
    }

    pub fn total_tiles(&self) -> usize {
        self.slides.iter().map(SlideBag::n_tiles).sum()
    }

    /// Unique `(patient_id, label)` pairs sorted by patient id.
    pub fn patients(&self) -> Result<Vec<(String, Label)>> {
        patient_labels(self.slides.iter().map(|s| (s.patient_id.as_str(), s.label)))
    }

    pub fn labels(&self) -> Vec<Label> {
        self.slides.iter().map(|s| s.label).collect()
    }
}

pub(crate) fn patient_labels<'a>(rows: impl Iterator<Item = (&'a str, Label)>) -> Result<Vec<(String, Label)>> {
    let mut map: BTreeMap<&str, Label> = BTreeMap::new();
    for (p, l) in rows {
        if let Some(prev) = map.insert(p, l) {
            if prev != l {
                return Err(StoreError::InconsistentPatientLabel(p.to_string()));
            }
        }
    }
    Ok(map.into_iter().map(|(p, l)| (p.to_string(), l)).collect())
}

/// One vector per slide per encoder; every matrix shares the same row order.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideVectorDataset {
    pub encoders: BTreeMap<String, EmbeddingMatrix>,
    pub patient_ids: Vec<String>,
    pub labels: Vec<Label>,
    pub class_names: [String; 2],
}

impl SlideVectorDataset {
    pub fn new(
        encoders: BTreeMap<String, EmbeddingMatrix>,
        patient_ids: Vec<String>,
        labels: Vec<Label>,
        class_names: [String; 2],
    ) -> Result<Self> {
        let Some(first) = encoders.values().next() else {
            return Err(StoreError::Invalid("no encoders".into()));
        };
        let ids = first.sample_ids();
        for m in encoders.values() {
            if m.sample_ids() != ids {
                return Err(StoreError::Invalid(format!(
                    "encoder {} rows are not aligned with {}",
                    m.encoder_id(),
                    first.encoder_id()
                )));
            }
        }
        if patient_ids.len() != ids.len() || labels.len() != ids.len() {
            return Err(StoreError::Invalid("patient ids / labels do not match the slide count".into()));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(StoreError::UnknownLabel { slide_id: String::new(), label: l.to_string() });
        }
        let ds = SlideVectorDataset { encoders, patient_ids, labels, class_names };
        ds.patients()?;
        Ok(ds)
    }

    pub fn slide_ids(&self) -> &[String] {
        self.encoders.values().next().map(|m| m.sample_ids()).unwrap_or(&[])
    }

    pub fn patients(&self) -> Result<Vec<(String, Label)>> {
        patient_labels(self.patient_ids.iter().map(String::as_str).zip(self.labels.iter().copied()))
    }
}
