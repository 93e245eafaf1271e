use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use super::{EmbeddingMatrix, Result, StoreError};

/// Reads `sample_id,f0,f1,...` CSV. The encoder id is the file stem.
pub fn load_embedding_csv(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })?;
    let encoder = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    read_embedding_csv(file, &encoder)
}

pub fn read_embedding_csv(reader: impl Read, encoder_id: &str) -> Result<EmbeddingMatrix> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r?,
        None => return Err(StoreError::MissingHeader),
    };
    if header.len() < 2 || header.get(0).map(str::trim) != Some("sample_id") {
        return Err(StoreError::MissingHeader);
    }
    let d = header.len() - 1;
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for rec in records {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() == 1 && rec.get(0).is_some_and(|s| s.trim().is_empty()) {
            continue;
        }
        if rec.len() != d + 1 {
            return Err(StoreError::RaggedRow { line, expected: d + 1, found: rec.len() });
        }
        ids.push(rec[0].to_string());
        for (j, cell) in rec.iter().skip(1).enumerate() {
            let cell = cell.trim();
            let v: f64 = cell.parse().map_err(|_| StoreError::BadNumber {
                line,
                column: j + 1,
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(StoreError::NonFiniteValue { line, column: j + 1, value: cell.to_string() });
            }
            data.push(v);
        }
    }
    if ids.is_empty() {
        return Err(StoreError::Invalid("CSV has a header but no rows".into()));
    }
    let values = DMatrix::from_row_slice(ids.len(), d, &data);
    EmbeddingMatrix::new(encoder_id, ids, values)
}

/// Writes the matrix as CSV using the shortest round-trip representation of
/// each value, so reading it back is exact.
pub fn write_embedding_csv(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| StoreError::Io { path: path.to_path_buf(), source };
    let mut out = std::io::BufWriter::new(File::create(path).map_err(io)?);
    let mut header = String::from("sample_id");
    for j in 0..m.dim() {
        header.push_str(&format!(",f{j}"));
    }
    writeln!(out, "{header}").map_err(io)?;
    for (i, id) in m.sample_ids().iter().enumerate() {
        let mut line = id.clone();
        for j in 0..m.dim() {
            line.push(',');
            line.push_str(&format!("{:?}", m.values()[(i, j)]));
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_small_file() {
        let m = read_embedding_csv("sample_id,f0,f1,f2\na,1,0,0\nb,0,1,0\n".as_bytes(), "enc").unwrap();
        assert_eq!((m.n_samples(), m.dim()), (2, 3));
        assert_eq!(m.sample_ids(), ["a", "b"]);
        assert_eq!(m.values()[(1, 1)], 1.0);
    }

    #[test]
    fn ragged_row_reports_line() {
        let err = read_embedding_csv("sample_id,f0,f1,f2\na,1,0,0\nb,0,1\n".as_bytes(), "e").unwrap_err();
        assert!(matches!(err, StoreError::RaggedRow { line: 3, expected: 4, found: 3 }), "{err:?}");
    }

    #[test]
    fn nan_is_rejected() {
        let err = read_embedding_csv("sample_id,f0\na,NaN\n".as_bytes(), "e").unwrap_err();
        assert!(matches!(err, StoreError::NonFiniteValue { line: 2, .. }));
        let err = read_embedding_csv("sample_id,f0\na,inf\n".as_bytes(), "e").unwrap_err();
        assert!(matches!(err, StoreError::NonFiniteValue { .. }));
    }

    #[test]
    fn missing_header() {
        assert!(matches!(read_embedding_csv("".as_bytes(), "e"), Err(StoreError::MissingHeader)));
        assert!(matches!(read_embedding_csv("a,1,2\n".as_bytes(), "e"), Err(StoreError::MissingHeader)));
    }

    #[test]
    fn write_then_read_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        let v = DMatrix::from_row_slice(2, 2, &[0.1 + 0.2, -1e-300, std::f64::consts::PI, 12345.678901234567]);
        let m = EmbeddingMatrix::from_values("x", v).unwrap();
        write_embedding_csv(&m, &path).unwrap();
        let back = load_embedding_csv(&path).unwrap();
        assert_eq!(back, m);
    }
}
