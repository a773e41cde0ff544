//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "XLM1"
//! u64 vocab_size, context_len, dim, ffn_hidden, layers
//! u8  sublayer kind (0 attention, 1 she, 2 ishe), u64 heads (0 unless attention)
//! u8  has_pad, u64 pad_token (0 when absent)
//! u64 matrix count
//! per matrix in declaration order: u64 rows, u64 cols, rows*cols f64
//! ```

use std::io::Write;
use std::path::Path;

use crate::binio::{write_atomic, Reader};
use crate::error::Result;
use crate::model::config::{ModelConfig, Sublayer1};
use crate::model::weights::CoreWeights;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XLM1";

pub fn encode_checkpoint(weights: &CoreWeights, w: &mut dyn Write) -> Result<()> {
    let cfg = &weights.config;
    w.write_all(CHECKPOINT_MAGIC)?;
    for v in [
        cfg.vocab_size,
        cfg.context_len,
        cfg.dim,
        cfg.ffn_hidden,
        cfg.layers,
    ] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    let (kind, heads) = match cfg.sublayer1 {
        Sublayer1::Attention { heads } => (0u8, heads),
        Sublayer1::She => (1, 0),
        Sublayer1::Ishe => (2, 0),
    };
    w.write_all(&[kind])?;
    w.write_all(&(heads as u64).to_le_bytes())?;
    w.write_all(&[cfg.pad_token.is_some() as u8])?;
    w.write_all(&(cfg.pad_token.unwrap_or(0) as u64).to_le_bytes())?;
    let named = weights.named();
    w.write_all(&(named.len() as u64).to_le_bytes())?;
    for (_, m) in named {
        w.write_all(&(m.rows() as u64).to_le_bytes())?;
        w.write_all(&(m.cols() as u64).to_le_bytes())?;
        for v in m.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(weights: &CoreWeights, path: &Path) -> Result<()> {
    weights.validate()?;
    write_atomic(path, |w| encode_checkpoint(weights, w))
}

pub fn load_checkpoint(path: &Path) -> Result<CoreWeights> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(path, &bytes)
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<CoreWeights> {
    let mut r = Reader::new(path, bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let vocab_size = r.count("vocab_size")?;
    let context_len = r.count("context_len")?;
    let dim = r.count("dim")?;
    let ffn_hidden = r.count("ffn_hidden")?;
    let layers = r.count("layers")?;
    let kind = r.u8("sublayer kind")?;
    let heads = r.count("heads")?;
    let sublayer1 = match kind {
        0 => Sublayer1::Attention { heads },
        1 => Sublayer1::She,
        2 => Sublayer1::Ishe,
        k => return Err(r.malformed(format!("unknown sublayer kind {k}"))),
    };
    let has_pad = r.u8("pad flag")?;
    let pad = r.count("pad token")?;
    let pad_token = match has_pad {
        0 => None,
        1 => Some(pad),
        f => return Err(r.malformed(format!("pad flag {f} is not 0 or 1"))),
    };
    let config = ModelConfig {
        vocab_size,
        context_len,
        dim,
        ffn_hidden,
        layers,
        sublayer1,
        pad_token,
    };
    config
        .validate()
        .map_err(|e| r.malformed(e.to_string()))?;
    // shapes come from the config; the stored ones are only checked
    let mut weights = CoreWeights::zeros(&config)?;
    let names: Vec<String> = weights.named().into_iter().map(|(n, _)| n).collect();
    let count = r.count("matrix count")?;
    if count != names.len() {
        return Err(r.malformed(format!(
            "{count} matrices stored, configuration implies {}",
            names.len()
        )));
    }
    for (m, name) in weights.matrices_mut().into_iter().zip(&names) {
        let rows = r.count("matrix rows")?;
        let cols = r.count("matrix cols")?;
        if (rows, cols) != m.shape() {
            return Err(r.malformed(format!(
                "{name} stored as {rows}x{cols}, expected {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        let raw = r.take(8 * m.len(), name)?;
        for (dst, chunk) in m.as_mut_slice().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if r.remaining() != 0 {
        return Err(r.malformed(format!("{} trailing bytes", r.remaining())));
    }
    Ok(weights)
}
