use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;

use super::{Result, SynthBags, SynthError, SynthOutput, SynthTruth};
use crate::store::write_embedding_csv;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.display().to_string(), source }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("serializable");
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))?;
    f.write_all(b"\n").map_err(io_err(path))
}

fn write_truth(dir: &Path, truth: &SynthTruth) -> Result<PathBuf> {
    let p = dir.join("truth.json");
    write_json(&p, truth)?;
    Ok(p)
}

/// Writes `<encoder>.csv`, a slide-level `manifest.json` and `truth.json`
/// into `dir`; returns the manifest path.
pub fn write_slide_dataset(dir: &Path, out: &SynthOutput) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files = BTreeMap::new();
    for (id, m) in &out.encoders {
        let name = format!("{id}.csv");
        write_embedding_csv(m, dir.join(&name))?;
        files.insert(id.clone(), name);
    }
    let ids = out.encoders.values().next().map(|m| m.sample_ids().to_vec()).unwrap_or_default();
    let slides: Vec<_> = ids
        .iter()
        .zip(&out.labels)
        .map(|(id, l)| json!({"slide_id": id, "patient_id": id, "label": l}))
        .collect();
    let manifest = json!({"level": "slide", "class_names": ["low", "high"], "embeddings": files, "slides": slides});
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    write_truth(dir, &out.truth)?;
    Ok(path)
}

/// Writes one CSV per slide and encoder plus coordinates, a tile-level
/// `manifest.json` and `truth.json`; returns the manifest path.
pub fn write_bag_dataset(dir: &Path, bags: &SynthBags) -> Result<PathBuf> {
    let tiles = dir.join("tiles");
    std::fs::create_dir_all(&tiles).map_err(io_err(&tiles))?;
    let mut slides = Vec::new();
    for s in &bags.dataset.slides {
        let mut emb = BTreeMap::new();
        for (enc, m) in &s.tiles {
            let name = format!("tiles/{}_{enc}.csv", s.slide_id);
            write_embedding_csv(m, dir.join(&name))?;
            emb.insert(enc.clone(), name);
        }
        let coords_name = format!("tiles/{}_coords.csv", s.slide_id);
        let cp = dir.join(&coords_name);
        let mut text = String::from("row,col\n");
        for (r, c) in &s.coords {
            text.push_str(&format!("{r},{c}\n"));
        }
        std::fs::write(&cp, text).map_err(io_err(&cp))?;
        slides.push(json!({
            "slide_id": s.slide_id, "patient_id": s.patient_id, "label": s.label,
            "embeddings": emb, "coords_path": coords_name
        }));
    }
    let manifest = json!({"class_names": bags.dataset.class_names, "slides": slides});
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    write_truth(dir, &bags.truth)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::super::{generate, generate_bags, BagMode, GeneratorConfig};
    use super::*;
    use crate::store::{load_manifest, Dataset};

    #[test]
    fn slide_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let out = generate(&GeneratorConfig::complementary(40, 2)).unwrap();
        let p = write_slide_dataset(dir.path(), &out).unwrap();
        let Dataset::SlideVectors(ds) = load_manifest(p).unwrap() else { panic!() };
        assert_eq!(ds.labels, out.labels);
        assert_eq!(ds.encoders["enc_a"].values(), out.encoders["enc_a"].values());
        let truth: SynthTruth = serde_json::from_str(&std::fs::read_to_string(dir.path().join("truth.json")).unwrap()).unwrap();
        assert_eq!(truth, out.truth);
    }

    #[test]
    fn bag_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = GeneratorConfig::complementary(6, 2);
        cfg.bag_mode = Some(BagMode { tiles_per_bag: 5, signal_fraction: 0.2, signal_margin: 1.0 });
        let bags = generate_bags(&cfg).unwrap();
        let p = write_bag_dataset(dir.path(), &bags).unwrap();
        let Dataset::Bags(ds) = load_manifest(p).unwrap() else { panic!() };
        assert_eq!(ds, bags.dataset);
    }
}
