//! Binary parameter checkpoints.
//!
//! Layout, all little-endian:
//!
//! | bytes | field                         |
//! |-------|-------------------------------|
//! | 4     | magic `A2PO`                  |
//! | 4     | format version (u32)          |
//! | 4     | vocabulary size (u32)         |
//! | 4     | window W (u32)                |
//! | 4     | embedding dim d (u32)         |
//! | 8·n   | weights (f64), parameter order |
//!
//! Weights follow the in-memory order `E | P_1..P_W | b | U`, so
//! `n = 2·|V|·d + W·d² + d`.

use std::io::{Read, Write};

use super::{param_count, PolicyParams};
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"A2PO";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(params: &PolicyParams, mut out: W) -> Result<()> {
    out.write_all(&CHECKPOINT_MAGIC)?;
    for v in [
        CHECKPOINT_VERSION,
        params.vocab().size() as u32,
        params.window() as u32,
        params.embed_dim() as u32,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    for w in params.weights() {
        out.write_all(&w.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a checkpoint scored over `vocab`; the stored vocabulary size must match.
pub fn read_checkpoint<R: Read>(vocab: &Vocabulary, mut input: R) -> Result<PolicyParams> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut word = || -> Result<u32> {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    };
    let version = word()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let (size, window, dim) = (word()? as usize, word()? as usize, word()? as usize);
    if size != vocab.size() {
        return Err(Error::Checkpoint(format!(
            "vocabulary mismatch: checkpoint has {size} tokens, task suite has {}",
            vocab.size()
        )));
    }
    let n = param_count(size, window, dim);
    let mut weights = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        input.read_exact(&mut b)?;
        weights.push(f64::from_le_bytes(b));
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    PolicyParams::from_weights(vocab, window, dim, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::init_params;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bitwise(seed in any::<u64>(), window in 2usize..6, dim in 4usize..10) {
            let vocab = Vocabulary::standard(20).unwrap();
            let p = init_params(&vocab, window, dim, seed).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&p, &mut buf).unwrap();
            prop_assert_eq!(buf.len(), 20 + 8 * p.len());
            let q = read_checkpoint(&vocab, buf.as_slice()).unwrap();
            let bits = |x: &PolicyParams| x.weights().iter().map(|w| w.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&p), bits(&q));
            prop_assert_eq!(q.window(), window);
        }
    }

    #[test]
    fn header_layout() {
        let vocab = Vocabulary::standard(16).unwrap();
        let p = init_params(&vocab, 2, 4, 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"A2PO");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &16u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(&buf[16..20], &4u32.to_le_bytes());
        assert_eq!(&buf[20..28], &p.weights()[0].to_le_bytes());
    }

    #[test]
    fn rejects_mismatched_vocab_and_corruption() {
        let vocab = Vocabulary::standard(16).unwrap();
        let p = init_params(&vocab, 2, 4, 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let other = Vocabulary::standard(17).unwrap();
        assert!(matches!(read_checkpoint(&other, buf.as_slice()), Err(Error::Checkpoint(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&vocab, bad.as_slice()).is_err());
        assert!(read_checkpoint(&vocab, &buf[..buf.len() - 1]).is_err());
    }
}
