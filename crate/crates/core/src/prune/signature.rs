use std::io::Write;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::RankedFeatures;
use crate::store::{ColumnOrigin, EmbeddingMatrix};

/// Retained columns of a concatenated matrix, in rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedSignature {
    pub theta: f64,
    pub retained: Vec<usize>,
    pub provenance: Vec<ColumnOrigin>,
    pub source_dim: usize,
}

impl PrunedSignature {
    pub fn new(theta: f64, retained: Vec<usize>, source: &EmbeddingMatrix) -> Self {
        let provenance = retained.iter().map(|&i| source.provenance()[i].clone()).collect();
        PrunedSignature { theta, retained, provenance, source_dim: source.dim() }
    }

    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct RetainedEntry {
    index: usize,
    encoder: String,
    original_index: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SignatureDoc {
    theta: f64,
    source_dim: usize,
    retained: Vec<RetainedEntry>,
}

impl Serialize for PrunedSignature {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        SignatureDoc {
            theta: self.theta,
            source_dim: self.source_dim,
            retained: self
                .retained
                .iter()
                .zip(&self.provenance)
                .map(|(&index, p)| RetainedEntry { index, encoder: p.encoder.clone(), original_index: p.column })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PrunedSignature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let doc = SignatureDoc::deserialize(d)?;
        if let Some(bad) = doc.retained.iter().find(|e| e.index >= doc.source_dim) {
            return Err(serde::de::Error::custom(format!("index {} ≥ source_dim {}", bad.index, doc.source_dim)));
        }
        let mut seen = std::collections::HashSet::new();
        if !doc.retained.iter().all(|e| seen.insert(e.index)) {
            return Err(serde::de::Error::custom("duplicate retained index"));
        }
        Ok(PrunedSignature {
            theta: doc.theta,
            source_dim: doc.source_dim,
            retained: doc.retained.iter().map(|e| e.index).collect(),
            provenance: doc
                .retained
                .into_iter()
                .map(|e| ColumnOrigin { encoder: e.encoder, column: e.original_index })
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionRow {
    pub theta: f64,
    pub encoder: String,
    pub retained: usize,
    pub total: usize,
    pub fraction: f64,
}

/// Per-θ, per-encoder retained counts. Each θ also has an `overall` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionProfile {
    pub rows: Vec<RetentionRow>,
}

impl RetentionProfile {
    pub const OVERALL: &'static str = "overall";

    pub fn from_signatures(sigs: &[PrunedSignature], source: &[ColumnOrigin]) -> Self {
        let mut encoders: Vec<&str> = Vec::new();
        for p in source {
            if !encoders.contains(&p.encoder.as_str()) {
                encoders.push(&p.encoder);
            }
        }
        let mut rows = Vec::new();
        for sig in sigs {
            for enc in &encoders {
                let total = source.iter().filter(|p| p.encoder == *enc).count();
                let retained = sig.provenance.iter().filter(|p| p.encoder == *enc).count();
                rows.push(RetentionRow {
                    theta: sig.theta,
                    encoder: enc.to_string(),
                    retained,
                    total,
                    fraction: retained as f64 / total as f64,
                });
            }
            rows.push(RetentionRow {
                theta: sig.theta,
                encoder: Self::OVERALL.into(),
                retained: sig.len(),
                total: source.len(),
                fraction: sig.len() as f64 / source.len() as f64,
            });
        }
        RetentionProfile { rows }
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "theta,encoder,retained,total,fraction")?;
        for r in &self.rows {
            writeln!(w, "{:?},{},{},{},{:?}", r.theta, r.encoder, r.retained, r.total, r.fraction)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub ranked: RankedFeatures,
    pub signatures: Vec<PrunedSignature>,
    pub profile: RetentionProfile,
}
