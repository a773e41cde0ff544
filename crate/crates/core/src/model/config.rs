use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Token-mixing mechanism of the first sublayer of every layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sublayer1 {
    /// Causal multi-head self-attention with learned positional embeddings.
    Attention { heads: usize },
    /// Extractor whose extraction sum is left unscaled.
    She,
    /// Extractor whose extraction output at position `i` is scaled by `1/sqrt(i)`.
    Ishe,
}

impl Sublayer1 {
    pub fn is_attention(&self) -> bool {
        matches!(self, Sublayer1::Attention { .. })
    }

    pub fn is_extractor(&self) -> bool {
        !self.is_attention()
    }
}

impl fmt::Display for Sublayer1 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sublayer1::Attention { heads } => write!(f, "attention:{heads}"),
            Sublayer1::She => f.write_str("she"),
            Sublayer1::Ishe => f.write_str("ishe"),
        }
    }
}

impl FromStr for Sublayer1 {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "she" => Ok(Sublayer1::She),
            "ishe" => Ok(Sublayer1::Ishe),
            other => {
                let heads = other
                    .strip_prefix("attention:")
                    .and_then(|h| h.parse::<usize>().ok())
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "sublayer1 must be attention:<heads>, she or ishe, got {other:?}"
                        ))
                    })?;
                Ok(Sublayer1::Attention { heads })
            }
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub dim: usize,
    pub ffn_hidden: usize,
    pub layers: usize,
    pub sublayer1: Sublayer1,
    /// Token whose embedding is pinned to the zero vector.
    pub pad_token: Option<usize>,
}

impl ModelConfig {
    /// Validation-experiment architecture: 3 tokens, l = 64, d = 2, h = 8, m = 4.
    pub fn table1(sublayer1: Sublayer1) -> Self {
        Self {
            vocab_size: 3,
            context_len: 64,
            dim: 2,
            ffn_hidden: 8,
            layers: 4,
            sublayer1,
            pad_token: None,
        }
    }

    /// Text-generation architecture: V = 5000, l = 128, d = 128, h = 512, m = 12.
    pub fn table2(sublayer1: Sublayer1) -> Self {
        Self {
            vocab_size: 5000,
            context_len: 128,
            dim: 128,
            ffn_hidden: 512,
            layers: 12,
            sublayer1,
            pad_token: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < 2 {
            return fail(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        for (name, v) in [
            ("context_len", self.context_len),
            ("dim", self.dim),
            ("ffn_hidden", self.ffn_hidden),
            ("layers", self.layers),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if let Sublayer1::Attention { heads } = self.sublayer1 {
            if heads == 0 || self.dim % heads != 0 {
                return fail(format!(
                    "dim {} is not divisible by {heads} attention heads",
                    self.dim
                ));
            }
        }
        if let Some(pad) = self.pad_token {
            if pad >= self.vocab_size {
                return fail(format!(
                    "pad token {pad} outside vocabulary of {}",
                    self.vocab_size
                ));
            }
        }
        Ok(())
    }
}
