//! Binary checkpoint layout (little-endian):
//!
//! ```text
//! "EMBH" | u16 version | u8 kind (0 = MIL, 1 = MLP) | f64 dropout | u64 input_dim
//! | u32 n_widths | n_widths × u64 | u64 n_params | n_params × f64
//! | u64 seed | u128 shuffle_word_pos | u128 dropout_word_pos | u64 best_epoch (0 = none)
//! ```
//! MIL widths are `[hidden, attention]`; MLP widths are the hidden layers.

use std::path::Path;

use super::{GatedAttentionMil, HeadError, MilArch, MlpArch, Result, RngRecord, SlideMlp};

const MAGIC: &[u8; 4] = b"EMBH";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum AnyHead {
    Mil(GatedAttentionMil),
    Mlp(SlideMlp),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub head: AnyHead,
    pub best_epoch: Option<usize>,
    pub rng: RngRecord,
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let (kind, dropout, input_dim, widths, params): (u8, f64, usize, Vec<usize>, &[f64]) = match &c.head {
        AnyHead::Mil(m) => (0, m.arch().dropout, m.input_dim(), vec![m.arch().hidden, m.arch().attention], m.params()),
        AnyHead::Mlp(m) => (1, m.arch().dropout, m.input_dim(), m.arch().hidden.clone(), m.params()),
    };
    let mut out = Vec::with_capacity(64 + params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&dropout.to_le_bytes());
    out.extend_from_slice(&(input_dim as u64).to_le_bytes());
    out.extend_from_slice(&(widths.len() as u32).to_le_bytes());
    for w in widths {
        out.extend_from_slice(&(w as u64).to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out.extend_from_slice(&c.rng.seed.to_le_bytes());
    out.extend_from_slice(&c.rng.shuffle_word_pos.to_le_bytes());
    out.extend_from_slice(&c.rng.dropout_word_pos.to_le_bytes());
    out.extend_from_slice(&(c.best_epoch.unwrap_or(0) as u64).to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(HeadError::Checkpoint("truncated".into()));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| HeadError::Checkpoint("size overflow".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes };
    if r.take(4)? != MAGIC {
        return Err(HeadError::Checkpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(HeadError::Checkpoint(format!("version {version}, expected {VERSION}")));
    }
    let kind = r.take(1)?[0];
    let dropout = f64::from_le_bytes(r.array()?);
    let input_dim = r.usize()?;
    let n_widths = u32::from_le_bytes(r.array()?) as usize;
    if n_widths > r.buf.len() / 8 {
        return Err(HeadError::Checkpoint("truncated".into()));
    }
    let widths = (0..n_widths).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let mut head = match (kind, widths.as_slice()) {
        (0, &[hidden, attention]) => AnyHead::Mil(GatedAttentionMil::zeroed(input_dim, MilArch { hidden, attention, dropout })?),
        (0, _) => return Err(HeadError::Checkpoint("MIL descriptor needs two widths".into())),
        (1, _) => AnyHead::Mlp(SlideMlp::zeroed(input_dim, MlpArch { hidden: widths, dropout })?),
        (k, _) => return Err(HeadError::Checkpoint(format!("unknown model kind {k}"))),
    };
    let params = match &mut head {
        AnyHead::Mil(m) => m.params_mut(),
        AnyHead::Mlp(m) => m.params_mut(),
    };
    let n = r.usize()?;
    if n != params.len() {
        return Err(HeadError::Checkpoint(format!("{n} parameters, architecture needs {}", params.len())));
    }
    let blob = r.take(n * 8)?;
    for (p, chunk) in params.iter_mut().zip(blob.chunks_exact(8)) {
        *p = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
    }
    let seed = r.u64()?;
    let shuffle_word_pos = u128::from_le_bytes(r.array()?);
    let dropout_word_pos = u128::from_le_bytes(r.array()?);
    let best = r.usize()?;
    if !r.buf.is_empty() {
        return Err(HeadError::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint {
        head,
        best_epoch: (best > 0).then_some(best),
        rng: RngRecord { seed, shuffle_word_pos, dropout_word_pos },
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(c)).map_err(|source| HeadError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| HeadError::Io { path: path.display().to_string(), source })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec() -> RngRecord {
        RngRecord { seed: 7, shuffle_word_pos: 123, dropout_word_pos: u128::MAX - 5 }
    }

    #[test]
    fn roundtrip_both_kinds() {
        let mil = GatedAttentionMil::new(5, MilArch { hidden: 6, attention: 3, dropout: 0.25 }, 1).unwrap();
        let mlp = SlideMlp::new(4, MlpArch { hidden: vec![3, 2], dropout: 0.5 }, 2).unwrap();
        for (head, best) in [(AnyHead::Mil(mil), Some(12)), (AnyHead::Mlp(mlp), None)] {
            let c = Checkpoint { head, best_epoch: best, rng: rec() };
            let bytes = encode_checkpoint(&c);
            assert_eq!(&bytes[..4], b"EMBH");
            assert_eq!(decode_checkpoint(&bytes).unwrap(), c);
        }
    }

    #[test]
    fn rejects_corruption() {
        let mlp = SlideMlp::new(4, MlpArch { hidden: vec![3], dropout: 0.5 }, 2).unwrap();
        let bytes = encode_checkpoint(&Checkpoint { head: AnyHead::Mlp(mlp), best_epoch: None, rng: rec() });
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode_checkpoint(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode_checkpoint(&long).is_err());
    }
}
