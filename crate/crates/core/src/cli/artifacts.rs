use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CliError;

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: String,
    pub config: serde_json::Value,
    /// Input path (relative to the output root when inside it) → sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the output root → sha256.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_bytes(b: &[u8]) -> String {
    hex::encode(Sha256::digest(b))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(sha256_bytes(&bytes))
}

fn display_key(path: &Path, root: &Path) -> String {
    match path.strip_prefix(root) {
        Ok(rel) => rel.to_string_lossy().replace('\\', "/"),
        Err(_) => path.to_string_lossy().into_owned(),
    }
}

/// Every regular file under `dir`, sorted, excluding run manifests.
pub fn files_under(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| CliError::data(format!("{}: {e}", d.display())))?;
        for entry in entries {
            let p = entry.map_err(|e| CliError::data(format!("{}: {e}", d.display())))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != RUN_MANIFEST) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Manifest file plus every embedding and coordinate file it references.
pub fn dataset_files(manifest: &Path) -> Result<Vec<PathBuf>, CliError> {
    let text = std::fs::read_to_string(manifest).map_err(|e| CliError::data(format!("{}: {e}", manifest.display())))?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", manifest.display())))?;
    let base = manifest.parent().unwrap_or(Path::new(""));
    let mut files = vec![manifest.to_path_buf()];
    let push_map = |files: &mut Vec<PathBuf>, v: &serde_json::Value| {
        if let Some(m) = v.as_object() {
            for p in m.values().filter_map(|p| p.as_str()) {
                files.push(base.join(p));
            }
        }
    };
    push_map(&mut files, &doc["embeddings"]);
    if let Some(slides) = doc["slides"].as_array() {
        for s in slides {
            push_map(&mut files, &s["embeddings"]);
            if let Some(c) = s["coords_path"].as_str() {
                files.push(base.join(c));
            }
        }
    }
    files.sort();
    files.dedup();
    Ok(files)
}

/// Hashes inputs and everything under `step_dir`, then writes the run manifest there.
pub fn write_run_manifest(
    root: &Path,
    step_dir: &Path,
    command: &str,
    config: serde_json::Value,
    inputs: &[PathBuf],
) -> Result<RunManifest, CliError> {
    let config_bytes = serde_json::to_vec(&config).expect("json value serializes");
    let mut ins = BTreeMap::new();
    for p in inputs {
        ins.insert(display_key(p, root), sha256_file(p)?);
    }
    let mut outs = BTreeMap::new();
    for p in files_under(step_dir)? {
        outs.insert(display_key(&p, root), sha256_file(&p)?);
    }
    let m = RunManifest {
        command: command.to_string(),
        config_sha256: sha256_bytes(&config_bytes),
        config,
        inputs: ins,
        outputs: outs,
    };
    write_json(&step_dir.join(RUN_MANIFEST), &m)?;
    Ok(m)
}

pub fn write_json(path: &Path, v: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(v).expect("serializable");
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::data(format!("{}: {e}", parent.display())))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    f.write_all(bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// Runs a CSV writer into memory and stores the result.
pub fn write_csv_with(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<(), CliError> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    write_file(path, &buf)
}
