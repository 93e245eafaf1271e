//! `EMBG` binary layout, all integers and reals little-endian:
//!
//! ```text
//! magic "EMBG" | version u16 | N u64 | D u64
//! N*D f64 values, row-major
//! encoder_id            (u32 byte length + UTF-8)
//! N sample ids          (u32 byte length + UTF-8 each)
//! D provenance entries  (u32 byte length + UTF-8 encoder, u64 original column)
//! ```

use std::path::Path;

use nalgebra::DMatrix;

use super::{ColumnOrigin, EmbeddingMatrix, Result, StoreError};

pub const MAGIC: &[u8; 4] = b"EMBG";
pub const VERSION: u16 = 1;

pub fn encode_embedding(m: &EmbeddingMatrix) -> Vec<u8> {
    let (n, d) = (m.n_samples(), m.dim());
    let mut out = Vec::with_capacity(22 + n * d * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for i in 0..n {
        for j in 0..d {
            out.extend_from_slice(&m.values()[(i, j)].to_le_bytes());
        }
    }
    put_str(&mut out, m.encoder_id());
    for id in m.sample_ids() {
        put_str(&mut out, id);
    }
    for p in m.provenance() {
        put_str(&mut out, &p.encoder);
        out.extend_from_slice(&(p.column as u64).to_le_bytes());
    }
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(StoreError::TruncatedFile)?;
        let s = self.buf.get(self.pos..end).ok_or(StoreError::TruncatedFile)?;
        self.pos = end;
        Ok(s)
    }

    fn array<const K: usize>(&mut self) -> Result<[u8; K]> {
        Ok(self.take(K)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| StoreError::InvalidUtf8)
    }
}

pub fn decode_embedding(buf: &[u8]) -> Result<EmbeddingMatrix> {
    let mut cur = Cursor { buf, pos: 0 };
    let magic = cur.take(4).map_err(|_| StoreError::BadMagic)?;
    if magic != MAGIC {
        return Err(StoreError::BadMagic);
    }
    let version = u16::from_le_bytes(cur.array()?);
    if version != VERSION {
        return Err(StoreError::VersionMismatch { found: version, expected: VERSION });
    }
    let n = cur.u64()? as usize;
    let d = cur.u64()? as usize;
    let count = n.checked_mul(d).ok_or(StoreError::TruncatedFile)?;
    let payload = cur.take(count.checked_mul(8).ok_or(StoreError::TruncatedFile)?)?;
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let encoder = cur.string()?;
    let ids = (0..n).map(|_| cur.string()).collect::<Result<Vec<_>>>()?;
    let mut prov = Vec::with_capacity(d);
    for _ in 0..d {
        let encoder = cur.string()?;
        let column = cur.u64()? as usize;
        prov.push(ColumnOrigin { encoder, column });
    }
    let values = DMatrix::from_row_slice(n, d, &data);
    EmbeddingMatrix::with_provenance(encoder, ids, values, prov)
}

pub fn write_embedding_binary(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_embedding(m)).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })
}

pub fn load_embedding_binary(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })?;
    decode_embedding(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> EmbeddingMatrix {
        let v = DMatrix::from_row_slice(2, 3, &[1.0, -0.0, 1e-310, 3.5, f64::MAX, -2.25]);
        EmbeddingMatrix::new("enc", vec!["a".into(), "ß-ü".into()], v).unwrap()
    }

    #[test]
    fn bad_magic() {
        let mut b = encode_embedding(&sample());
        b[0] = b'X';
        assert!(matches!(decode_embedding(&b), Err(StoreError::BadMagic)));
        assert!(matches!(decode_embedding(b"EM"), Err(StoreError::BadMagic)));
    }

    #[test]
    fn version_mismatch() {
        let mut b = encode_embedding(&sample());
        b[4] = 9;
        assert!(matches!(decode_embedding(&b), Err(StoreError::VersionMismatch { found: 9, .. })));
    }

    #[test]
    fn truncated_mid_payload() {
        let b = encode_embedding(&sample());
        assert!(matches!(decode_embedding(&b[..30]), Err(StoreError::TruncatedFile)));
        assert!(matches!(decode_embedding(&b[..b.len() - 1]), Err(StoreError::TruncatedFile)));
    }

    #[test]
    fn header_layout() {
        let b = encode_embedding(&sample());
        assert_eq!(&b[..4], b"EMBG");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(u64::from_le_bytes(b[6..14].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[14..22].try_into().unwrap()), 3);
        // first value row-major is (0,0), second is (0,1) = -0.0
        assert_eq!(f64::from_le_bytes(b[30..38].try_into().unwrap()).to_bits(), (-0.0f64).to_bits());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(n in 1usize..6, d in 1usize..6, seed in any::<u64>(), enc in "[a-z]{1,8}") {
            use rand::Rng;
            let mut rng = crate::rng::seeded(seed);
            let v = DMatrix::from_fn(n, d, |_, _| f64::from_bits(rng.random::<u64>() >> 2));
            let ids = (0..n).map(|i| format!("id-{i}-{seed}")).collect();
            let m = EmbeddingMatrix::new(enc, ids, v).unwrap();
            let back = decode_embedding(&encode_embedding(&m)).unwrap();
            prop_assert_eq!(back.sample_ids(), m.sample_ids());
            prop_assert_eq!(back.provenance(), m.provenance());
            prop_assert_eq!(back.encoder_id(), m.encoder_id());
            let bits = |x: &EmbeddingMatrix| x.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&m));
        }
    }
}
