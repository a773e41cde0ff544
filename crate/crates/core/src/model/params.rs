use crate::error::Result;
use crate::model::config::{ModelConfig, Sublayer1};

/// Trainable parameter counts by component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub embedding: usize,
    pub pos_embedding: usize,
    /// Token-mixing sublayer, per layer.
    pub mixer: usize,
    /// Feed-forward sublayer, per layer.
    pub ffn: usize,
    pub layers: usize,
    pub head: usize,
    pub total: usize,
}

pub fn count_params(cfg: &ModelConfig) -> Result<ParamCounts> {
    cfg.validate()?;
    let (v, l, d, h, m) = (
        cfg.vocab_size,
        cfg.context_len,
        cfg.dim,
        cfg.ffn_hidden,
        cfg.layers,
    );
    let (pos_embedding, mixer) = match cfg.sublayer1 {
        Sublayer1::Attention { .. } => (l * d, 4 * d * d),
        Sublayer1::She | Sublayer1::Ishe => (0, l * d * d + d * d),
    };
    let ffn = 2 * d * h;
    let layers = m * (mixer + ffn);
    let embedding = v * d;
    let head = d * v;
    Ok(ParamCounts {
        embedding,
        pos_embedding,
        mixer,
        ffn,
        layers,
        head,
        total: embedding + pos_embedding + layers + head,
    })
}
