//! JSON manifest loading.
//!
//! Tile level (`"level": "tile"`, the default):
//!
//! ```json
//! { "class_names": ["low", "high"],
//!   "slides": [ { "slide_id": "s1", "patient_id": "p1", "label": "high",
//!                 "embeddings": { "conch": "s1_conch.csv", "musk": "s1_musk.embg" },
//!                 "coords_path": "s1_coords.csv" } ] }
//! ```
//!
//! Slide level (`"level": "slide"`) additionally accepts a top-level
//! `"embeddings": {encoder: path}` whose files hold one row per slide keyed by
//! slide id; otherwise each slide's files must hold exactly one row.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Deserialize;

use super::{
    load_embedding_binary, load_embedding_csv, BagDataset, EmbeddingMatrix, Label, Result, SlideBag,
    SlideVectorDataset, StoreError,
};

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Bags(BagDataset),
    SlideVectors(SlideVectorDataset),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    #[serde(default)]
    level: Option<String>,
    #[serde(default)]
    class_names: Option<[String; 2]>,
    #[serde(default)]
    embeddings: Option<BTreeMap<String, String>>,
    slides: Vec<SlideEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SlideEntry {
    slide_id: String,
    patient_id: String,
    label: serde_json::Value,
    #[serde(default)]
    embeddings: BTreeMap<String, String>,
    #[serde(default)]
    coords_path: Option<String>,
}

/// Loads `.csv` as CSV, anything else as `EMBG` binary; the result carries `encoder`.
pub fn load_embedding_file(path: &Path, encoder: &str) -> Result<EmbeddingMatrix> {
    let m = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        load_embedding_csv(path)?
    } else {
        load_embedding_binary(path)?
    };
    Ok(m.renamed(encoder))
}

fn parse_label(slide_id: &str, v: &serde_json::Value, names: &[String; 2]) -> Result<Label> {
    let unknown = || StoreError::UnknownLabel { slide_id: slide_id.to_string(), label: v.to_string() };
    match v {
        serde_json::Value::Number(n) => match n.as_u64() {
            Some(0) => Ok(0),
            Some(1) => Ok(1),
            _ => Err(unknown()),
        },
        serde_json::Value::String(s) => {
            let s = s.trim();
            if s == "0" || s.eq_ignore_ascii_case("low") || s == names[0] {
                Ok(0)
            } else if s == "1" || s.eq_ignore_ascii_case("high") || s == names[1] {
                Ok(1)
            } else {
                Err(unknown())
            }
        }
        _ => Err(unknown()),
    }
}

fn read_coords(path: &Path) -> Result<Vec<(i64, i64)>> {
    let io = |source| StoreError::Io { path: path.to_path_buf(), source };
    let text = std::fs::read_to_string(path).map_err(io)?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() < 2 {
            return Err(StoreError::RaggedRow { line, expected: 2, found: rec.len() });
        }
        let parse = |i: usize| {
            rec[i].trim().parse::<i64>().map_err(|_| StoreError::BadNumber {
                line,
                column: i,
                value: rec[i].to_string(),
            })
        };
        out.push((parse(0)?, parse(1)?));
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })?;
    let doc: ManifestDoc = serde_json::from_str(&text).map_err(|e| StoreError::Manifest(e.to_string()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let class_names = doc.class_names.clone().unwrap_or_else(|| ["low".to_string(), "high".to_string()]);

    let mut seen = HashSet::new();
    for s in &doc.slides {
        if !seen.insert(s.slide_id.as_str()) {
            return Err(StoreError::DuplicateSlide(s.slide_id.clone()));
        }
    }
    let labels = doc
        .slides
        .iter()
        .map(|s| parse_label(&s.slide_id, &s.label, &class_names))
        .collect::<Result<Vec<_>>>()?;

    match doc.level.as_deref().unwrap_or("tile") {
        "tile" => load_bags(&doc, &base, labels, class_names).map(Dataset::Bags),
        "slide" => load_slide_vectors(&doc, &base, labels, class_names).map(Dataset::SlideVectors),
        other => Err(StoreError::Manifest(format!("unknown level `{other}`"))),
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_bags(doc: &ManifestDoc, base: &Path, labels: Vec<Label>, class_names: [String; 2]) -> Result<BagDataset> {
    let slides = doc
        .slides
        .par_iter()
        .zip(labels)
        .map(|(s, label)| {
            if s.embeddings.is_empty() {
                return Err(StoreError::Manifest(format!("slide {} lists no embeddings", s.slide_id)));
            }
            let tiles = s
                .embeddings
                .iter()
                .map(|(enc, p)| Ok((enc.clone(), load_embedding_file(&resolve(base, p), enc)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            let coords = s.coords_path.as_deref().map(|p| read_coords(&resolve(base, p))).transpose()?;
            SlideBag::new(s.slide_id.clone(), s.patient_id.clone(), label, tiles, coords)
        })
        .collect::<Result<Vec<_>>>()?;
    BagDataset::new(slides, class_names)
}

fn load_slide_vectors(
    doc: &ManifestDoc,
    base: &Path,
    labels: Vec<Label>,
    class_names: [String; 2],
) -> Result<SlideVectorDataset> {
    let slide_ids: Vec<String> = doc.slides.iter().map(|s| s.slide_id.clone()).collect();
    let patients: Vec<String> = doc.slides.iter().map(|s| s.patient_id.clone()).collect();
    let mut encoders = BTreeMap::new();
    if let Some(shared) = &doc.embeddings {
        for (enc, p) in shared {
            let m = load_embedding_file(&resolve(base, p), enc)?;
            let index: BTreeMap<&str, usize> =
                m.sample_ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
            let rows = slide_ids
                .iter()
                .map(|id| {
                    index.get(id.as_str()).copied().ok_or_else(|| {
                        StoreError::Invalid(format!("encoder {enc}: no row for slide {id}"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            encoders.insert(enc.clone(), m.select_rows(&rows)?);
        }
    } else {
        let names: Vec<&String> = doc.slides.first().map(|s| s.embeddings.keys().collect()).unwrap_or_default();
        for enc in names {
            let mut rows = Vec::with_capacity(slide_ids.len());
            let mut prov = None;
            for s in &doc.slides {
                let p = s.embeddings.get(enc).ok_or_else(|| {
                    StoreError::Manifest(format!("slide {} lacks encoder {enc}", s.slide_id))
                })?;
                let m = load_embedding_file(&resolve(base, p), enc)?;
                if m.n_samples() != 1 {
                    return Err(StoreError::Invalid(format!(
                        "slide {}: slide-level file for {enc} has {} rows",
                        s.slide_id,
                        m.n_samples()
                    )));
                }
                rows.push(m.values().row(0).iter().copied().collect::<Vec<_>>());
                prov.get_or_insert_with(|| m.provenance().to_vec());
            }
            let d = rows[0].len();
            if let Some(r) = rows.iter().position(|r| r.len() != d) {
                return Err(StoreError::Invalid(format!("slide {}: width differs for {enc}", slide_ids[r])));
            }
            let values = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
            let m = EmbeddingMatrix::with_provenance(enc.clone(), slide_ids.clone(), values, prov.unwrap_or_default())?;
            encoders.insert(enc.clone(), m);
        }
    }
    SlideVectorDataset::new(encoders, patients, labels, class_names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::write_embedding_csv;

    fn write_matrix(dir: &Path, name: &str, rows: usize, d: usize) -> String {
        let v = DMatrix::from_fn(rows, d, |r, c| (r * d + c) as f64);
        let m = EmbeddingMatrix::from_values("x", v).unwrap();
        write_embedding_csv(&m, dir.join(name)).unwrap();
        name.to_string()
    }

    fn manifest(dir: &Path, body: serde_json::Value) -> PathBuf {
        let p = dir.join("manifest.json");
        std::fs::write(&p, body.to_string()).unwrap();
        p
    }

    #[test]
    fn two_slides_two_encoders() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let body = serde_json::json!({"slides": [
            {"slide_id": "s1", "patient_id": "p1", "label": 0,
             "embeddings": {"a": write_matrix(d, "s1a.csv", 4, 3), "b": write_matrix(d, "s1b.csv", 4, 2)}},
            {"slide_id": "s2", "patient_id": "p2", "label": "high",
             "embeddings": {"a": write_matrix(d, "s2a.csv", 5, 3), "b": write_matrix(d, "s2b.csv", 5, 2)}}
        ]});
        let Dataset::Bags(ds) = load_manifest(manifest(d, body)).unwrap() else { panic!() };
        assert_eq!(ds.slides.len(), 2);
        assert_eq!(ds.encoders(), ["a", "b"]);
        assert_eq!(ds.slides[1].label, 1);
        assert_eq!(ds.slides[0].tiles["a"].encoder_id(), "a");
        assert_eq!(ds.total_tiles(), 9);
    }

    #[test]
    fn tile_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let body = serde_json::json!({"slides": [
            {"slide_id": "s1", "patient_id": "p1", "label": 0,
             "embeddings": {"a": write_matrix(d, "a.csv", 10, 3), "b": write_matrix(d, "b.csv", 9, 3)}}
        ]});
        let err = load_manifest(manifest(d, body)).unwrap_err();
        assert!(matches!(err, StoreError::TileCountMismatch { count_a: 10, count_b: 9, .. }), "{err}");
    }

    #[test]
    fn unknown_label() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let body = serde_json::json!({"slides": [
            {"slide_id": "s1", "patient_id": "p1", "label": "medium", "embeddings": {"a": write_matrix(d, "a.csv", 2, 2)}}
        ]});
        assert!(matches!(load_manifest(manifest(d, body)), Err(StoreError::UnknownLabel { .. })));
    }

    #[test]
    fn duplicate_slide() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let a = write_matrix(d, "a.csv", 2, 2);
        let body = serde_json::json!({"slides": [
            {"slide_id": "s1", "patient_id": "p1", "label": 0, "embeddings": {"a": a}},
            {"slide_id": "s1", "patient_id": "p2", "label": 1, "embeddings": {"a": a}}
        ]});
        assert!(matches!(load_manifest(manifest(d, body)), Err(StoreError::DuplicateSlide(_))));
    }

    #[test]
    fn missing_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let body = serde_json::json!({"slides": [
            {"slide_id": "s1", "patient_id": "p1", "label": 0, "embeddings": {"a": "nope.csv"}}
        ]});
        let err = load_manifest(manifest(dir.path(), body)).unwrap_err();
        assert!(err.to_string().contains("nope.csv"));
    }

    #[test]
    fn slide_level_shared_files() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let m = EmbeddingMatrix::new("t", vec!["s2".into(), "s1".into()], v).unwrap();
        write_embedding_csv(&m, d.join("titan.csv")).unwrap();
        let body = serde_json::json!({"level": "slide", "embeddings": {"titan": "titan.csv"}, "slides": [
            {"slide_id": "s1", "patient_id": "p1", "label": 0},
            {"slide_id": "s2", "patient_id": "p2", "label": 1}
        ]});
        let Dataset::SlideVectors(ds) = load_manifest(manifest(d, body)).unwrap() else { panic!() };
        assert_eq!(ds.slide_ids(), ["s1", "s2"]);
        assert_eq!(ds.encoders["titan"].values()[(0, 0)], 3.0);
    }
}
