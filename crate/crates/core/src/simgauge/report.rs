use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{score_pair, MetricConfig, PreparedSpace, Result, SimilarityError, SimilarityScores};
use crate::store::EmbeddingMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub encoder_a: String,
    pub encoder_b: String,
    #[serde(flatten)]
    pub scores: SimilarityScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub config: MetricConfig,
    pub n_samples: usize,
    pub rows: Vec<SimilarityRow>,
}

/// Scores every unordered encoder pair. Rows are ordered lexicographically by
/// `(encoder_a, encoder_b)`; pairs are evaluated in parallel.
pub fn similarity_report(encoders: &BTreeMap<String, EmbeddingMatrix>, cfg: &MetricConfig) -> Result<SimilarityReport> {
    cfg.validate()?;
    if encoders.len() < 2 {
        return Err(SimilarityError::TooFewEncoders);
    }
    let spaces: Vec<(&String, PreparedSpace)> = encoders.iter().map(|(k, m)| (k, PreparedSpace::new(m))).collect();
    let n = spaces[0].1.n_samples();
    let pairs: Vec<(usize, usize)> =
        (0..spaces.len()).flat_map(|i| (i + 1..spaces.len()).map(move |j| (i, j))).collect();
    let rows = pairs
        .par_iter()
        .map(|&(i, j)| {
            let scores = score_pair(&spaces[i].1, &spaces[j].1, cfg)?;
            Ok(SimilarityRow { encoder_a: spaces[i].0.clone(), encoder_b: spaces[j].0.clone(), scores })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimilarityReport { config: *cfg, n_samples: n, rows })
}

impl SimilarityReport {
    pub const CSV_HEADER: &'static str = "encoder_a,encoder_b,cka,svcca,procrustes,knn_jaccard,r2_ab,r2_ba";

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            let s = &r.scores;
            writeln!(
                w,
                "{},{},{:?},{:?},{:?},{:?},{:?},{:?}",
                r.encoder_a, r.encoder_b, s.cka, s.svcca, s.procrustes, s.knn_jaccard, s.r2_x_to_y, s.r2_y_to_x
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec");
        String::from_utf8(buf).expect("ascii")
    }
}
