use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, Sublayer1};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub heads: usize,
}

impl AttentionWeights {
    pub fn zeros(dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "dim {dim} is not divisible by {heads} attention heads"
            )));
        }
        Ok(Self {
            wq: Matrix::zeros(dim, dim),
            wk: Matrix::zeros(dim, dim),
            wv: Matrix::zeros(dim, dim),
            wo: Matrix::zeros(dim, dim),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorWeights {
    /// `ext[k]` weighs the input `k` positions back.
    pub ext: Vec<Matrix>,
    pub adj: Matrix,
}

impl ExtractorWeights {
    pub fn zeros(context_len: usize, dim: usize) -> Self {
        Self {
            ext: vec![Matrix::zeros(dim, dim); context_len],
            adj: Matrix::zeros(dim, dim),
        }
    }

    pub fn context_len(&self) -> usize {
        self.ext.len()
    }

    pub fn dim(&self) -> usize {
        self.adj.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MixerWeights {
    Attention(AttentionWeights),
    Extractor(ExtractorWeights),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub mixer: MixerWeights,
    pub w1: Matrix,
    pub w2: Matrix,
}

/// All trainable matrices of a model together with its configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct CoreWeights {
    pub config: ModelConfig,
    pub embedding: Matrix,
    pub pos_embedding: Option<Matrix>,
    pub layers: Vec<LayerWeights>,
    pub head: Matrix,
}

impl CoreWeights {
    /// All-zero weights with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let ModelConfig {
            vocab_size: v,
            context_len: l,
            dim: d,
            ffn_hidden: h,
            layers: m,
            sublayer1,
            ..
        } = *config;
        let mut layers = Vec::with_capacity(m);
        for _ in 0..m {
            let mixer = match sublayer1 {
                Sublayer1::Attention { heads } => {
                    MixerWeights::Attention(AttentionWeights::zeros(d, heads)?)
                }
                Sublayer1::She | Sublayer1::Ishe => {
                    MixerWeights::Extractor(ExtractorWeights::zeros(l, d))
                }
            };
            layers.push(LayerWeights {
                mixer,
                w1: Matrix::zeros(d, h),
                w2: Matrix::zeros(h, d),
            });
        }
        Ok(Self {
            config: config.clone(),
            embedding: Matrix::zeros(v, d),
            pos_embedding: sublayer1.is_attention().then(|| Matrix::zeros(l, d)),
            layers,
            head: Matrix::zeros(d, v),
        })
    }

    /// Every matrix with a stable name, in declaration order.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        if let Some(p) = &self.pos_embedding {
            out.push(("pos_embedding".to_string(), p));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            match &layer.mixer {
                MixerWeights::Attention(a) => {
                    for (n, w) in [("wq", &a.wq), ("wk", &a.wk), ("wv", &a.wv), ("wo", &a.wo)] {
                        out.push((format!("layer{k}.{n}"), w));
                    }
                }
                MixerWeights::Extractor(e) => {
                    for (j, w) in e.ext.iter().enumerate() {
                        out.push((format!("layer{k}.ext{}", j + 1), w));
                    }
                    out.push((format!("layer{k}.adj"), &e.adj));
                }
            }
            out.push((format!("layer{k}.w1"), &layer.w1));
            out.push((format!("layer{k}.w2"), &layer.w2));
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    /// Mutable counterpart of [`CoreWeights::named`] without names.
    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embedding];
        if let Some(p) = &mut self.pos_embedding {
            out.push(p);
        }
        for layer in &mut self.layers {
            match &mut layer.mixer {
                MixerWeights::Attention(a) => {
                    out.extend([&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo]);
                }
                MixerWeights::Extractor(e) => {
                    out.extend(e.ext.iter_mut());
                    out.push(&mut e.adj);
                }
            }
            out.push(&mut layer.w1);
            out.push(&mut layer.w2);
        }
        out.push(&mut self.head);
        out
    }

    pub fn matrices(&self) -> Vec<&Matrix> {
        self.named().into_iter().map(|(_, m)| m).collect()
    }

    pub fn param_count(&self) -> usize {
        self.matrices().iter().map(|m| m.len()).sum()
    }

    /// Zeroes the embedding row of the padding token, if any.
    pub fn clear_pad_row(&mut self) {
        if let Some(pad) = self.config.pad_token {
            self.embedding.row_mut(pad).fill(0.0);
        }
    }

    /// Checks every matrix shape against the configuration.
    pub fn validate(&self) -> Result<()> {
        let expected = CoreWeights::zeros(&self.config)?;
        let ours = self.named();
        let theirs = expected.named();
        if ours.len() != theirs.len() {
            return Err(Error::Shape(format!(
                "{} weight matrices, configuration implies {}",
                ours.len(),
                theirs.len()
            )));
        }
        for ((name, m), (_, e)) in ours.iter().zip(&theirs) {
            if m.shape() != e.shape() {
                return Err(Error::Shape(format!(
                    "{name} is {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    e.rows(),
                    e.cols()
                )));
            }
        }
        for layer in &self.layers {
            if let MixerWeights::Attention(a) = &layer.mixer {
                if (Sublayer1::Attention { heads: a.heads }) != self.config.sublayer1 {
                    return Err(Error::Config(format!(
                        "layer has {} heads, configuration says {}",
                        a.heads, self.config.sublayer1
                    )));
                }
            }
        }
        Ok(())
    }
}
