use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, Sublayer1};
use crate::model::weights::{AttentionWeights, CoreWeights, ExtractorWeights};
use crate::tensor::{ExtractMethod, Graph, Matrix, NodeId, SeqLayout, LN_EPS};

#[derive(Clone, Debug)]
pub enum BoundMixer {
    Attention {
        wq: NodeId,
        wk: NodeId,
        wv: NodeId,
        wo: NodeId,
        heads: usize,
    },
    Extractor {
        ext: Vec<NodeId>,
        adj: NodeId,
        scaled: bool,
    },
}

#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub mixer: BoundMixer,
    pub w1: NodeId,
    pub w2: NodeId,
}

/// Nodes produced by running the core over one input.
#[derive(Clone, Debug)]
pub struct CoreNodes {
    pub output: NodeId,
    /// The input followed by the output of every sublayer (`2m + 1` nodes).
    pub stages: Vec<NodeId>,
    /// Inner-branch output of every sublayer, before the residual addition.
    pub branches: Vec<NodeId>,
}

/// Model weights registered as parameters of a [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub config: ModelConfig,
    pub embedding: NodeId,
    pub pos_embedding: Option<NodeId>,
    pub layers: Vec<BoundLayer>,
    pub head: NodeId,
    pub extract_method: ExtractMethod,
}

impl BoundModel {
    pub fn bind(g: &mut Graph, weights: &CoreWeights) -> Result<Self> {
        weights.validate()?;
        let ids: Vec<NodeId> = weights.matrices().into_iter().map(|m| g.param(m.clone())).collect();
        Self::from_params(&weights.config, &ids)
    }

    /// Reassembles the model from parameter nodes given in declaration order
    /// (the order of [`CoreWeights::named`] and [`BoundModel::params`]).
    pub fn from_params(config: &ModelConfig, ids: &[NodeId]) -> Result<Self> {
        config.validate()?;
        let per_layer = match config.sublayer1 {
            Sublayer1::Attention { .. } => 4 + 2,
            Sublayer1::She | Sublayer1::Ishe => config.context_len + 1 + 2,
        };
        let pos = usize::from(config.sublayer1.is_attention());
        let expected = 2 + pos + config.layers * per_layer;
        if ids.len() != expected {
            return Err(Error::Shape(format!(
                "{} parameter nodes, configuration implies {expected}",
                ids.len()
            )));
        }
        let mut it = ids.iter().copied();
        let mut next = || it.next().expect("count checked above");
        let embedding = next();
        let pos_embedding = (pos == 1).then(&mut next);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let mixer = match config.sublayer1 {
                Sublayer1::Attention { heads } => BoundMixer::Attention {
                    wq: next(),
                    wk: next(),
                    wv: next(),
                    wo: next(),
                    heads,
                },
                kind => BoundMixer::Extractor {
                    ext: (0..config.context_len).map(|_| next()).collect(),
                    adj: next(),
                    scaled: kind == Sublayer1::Ishe,
                },
            };
            layers.push(BoundLayer {
                mixer,
                w1: next(),
                w2: next(),
            });
        }
        let head = next();
        Ok(Self {
            config: config.clone(),
            embedding,
            pos_embedding,
            layers,
            head,
            extract_method: ExtractMethod::Auto,
        })
    }

    /// Parameter nodes in declaration order.
    pub fn params(&self) -> Vec<NodeId> {
        let mut out = vec![self.embedding];
        out.extend(self.pos_embedding);
        for layer in &self.layers {
            match &layer.mixer {
                BoundMixer::Attention { wq, wk, wv, wo, .. } => out.extend([*wq, *wk, *wv, *wo]),
                BoundMixer::Extractor { ext, adj, .. } => {
                    out.extend(ext);
                    out.push(*adj);
                }
            }
            out.push(layer.w1);
            out.push(layer.w2);
        }
        out.push(self.head);
        out
    }

    /// Embeds `tokens`, given time-major (`tokens[layout.row(i, b)]`).
    pub fn embed(&self, g: &mut Graph, tokens: &[usize], layout: SeqLayout) -> Result<NodeId> {
        let cfg = &self.config;
        check_tokens(tokens, layout, cfg)?;
        let mut x = g.gather(self.embedding, tokens.to_vec())?;
        if let Some(pad) = cfg.pad_token {
            if tokens.contains(&pad) {
                let mask = Matrix::from_fn(tokens.len(), cfg.dim, |r, _| {
                    if tokens[r] == pad {
                        0.0
                    } else {
                        1.0
                    }
                });
                let mask = g.input(mask);
                x = g.mul(x, mask)?;
            }
        }
        if let Some(pos) = self.pos_embedding {
            let positions = (0..layout.rows()).map(|r| r / layout.batch).collect();
            let p = g.gather(pos, positions)?;
            x = g.add(x, p)?;
        }
        Ok(x)
    }

    /// Token-mixing sublayer body applied to already normalized rows.
    pub fn mixer(&self, g: &mut Graph, k: usize, x: NodeId, layout: SeqLayout) -> Result<NodeId> {
        match &self.layers[k].mixer {
            BoundMixer::Attention { wq, wk, wv, wo, heads } => {
                attention_nodes(g, x, [*wq, *wk, *wv, *wo], *heads, layout)
            }
            BoundMixer::Extractor { ext, adj, scaled } => {
                extractor_nodes(g, x, ext, *adj, *scaled, layout, self.extract_method)
            }
        }
    }

    /// Runs layer `k`; returns (output, [mixer branch, ffn branch], mid-layer value).
    pub fn layer(
        &self,
        g: &mut Graph,
        k: usize,
        x: NodeId,
        layout: SeqLayout,
    ) -> Result<(NodeId, [NodeId; 2], NodeId)> {
        let (mid, b1) = residual(g, x, |g, n| self.mixer(g, k, n, layout))?;
        let layer = &self.layers[k];
        let (out, b2) = residual(g, mid, |g, n| ffn_nodes(g, n, layer.w1, layer.w2))?;
        Ok((out, [b1, b2], mid))
    }

    pub fn core(&self, g: &mut Graph, x: NodeId, layout: SeqLayout) -> Result<CoreNodes> {
        let mut stages = vec![x];
        let mut branches = Vec::with_capacity(2 * self.layers.len());
        let mut cur = x;
        for k in 0..self.layers.len() {
            let (out, b, mid) = self.layer(g, k, cur, layout)?;
            stages.extend([mid, out]);
            branches.extend(b);
            cur = out;
        }
        Ok(CoreNodes {
            output: cur,
            stages,
            branches,
        })
    }

    pub fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        g.matmul(x, self.head)
    }

    /// Mean next-token cross entropy of the full model.
    pub fn loss(
        &self,
        g: &mut Graph,
        inputs: &[usize],
        targets: &[usize],
        layout: SeqLayout,
    ) -> Result<NodeId> {
        let x = self.embed(g, inputs, layout)?;
        let core = self.core(g, x, layout)?;
        let logits = self.logits(g, core.output)?;
        g.cross_entropy(logits, targets.to_vec())
    }
}

fn check_tokens(tokens: &[usize], layout: SeqLayout, cfg: &ModelConfig) -> Result<()> {
    if layout.seq_len == 0 || layout.batch == 0 {
        return Err(Error::EmptySequence);
    }
    if layout.seq_len > cfg.context_len {
        return Err(Error::SequenceTooLong {
            len: layout.seq_len,
            context_len: cfg.context_len,
        });
    }
    if tokens.len() != layout.rows() {
        return Err(Error::Shape(format!(
            "{} tokens for a layout of {} rows",
            tokens.len(),
            layout.rows()
        )));
    }
    if let Some((offset, &id)) = tokens.iter().enumerate().find(|(_, &t)| t >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id: id as u64,
            offset,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// `x + inner(layer_norm(x))`; returns the sum and the inner branch.
pub fn residual(
    g: &mut Graph,
    x: NodeId,
    inner: impl FnOnce(&mut Graph, NodeId) -> Result<NodeId>,
) -> Result<(NodeId, NodeId)> {
    let n = g.layer_norm(x, LN_EPS);
    let branch = inner(g, n)?;
    let out = g.add(x, branch)?;
    Ok((out, branch))
}

pub fn attention_nodes(
    g: &mut Graph,
    x: NodeId,
    [wq, wk, wv, wo]: [NodeId; 4],
    heads: usize,
    layout: SeqLayout,
) -> Result<NodeId> {
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let a = g.causal_attention(q, k, v, layout, heads)?;
    g.matmul(a, wo)
}

pub fn extractor_nodes(
    g: &mut Graph,
    x: NodeId,
    ext: &[NodeId],
    adj: NodeId,
    scaled: bool,
    layout: SeqLayout,
    method: ExtractMethod,
) -> Result<NodeId> {
    let e = g.extract_with(x, ext, layout, scaled, method)?;
    adjustment_nodes(g, x, e, adj)
}

/// `x_ext ⊙ sigmoid(x_in · w_adj)`.
pub fn adjustment_nodes(g: &mut Graph, x_in: NodeId, x_ext: NodeId, adj: NodeId) -> Result<NodeId> {
    let z = g.matmul(x_in, adj)?;
    let gate = g.sigmoid(z);
    g.mul(x_ext, gate)
}

pub fn ffn_nodes(g: &mut Graph, x: NodeId, w1: NodeId, w2: NodeId) -> Result<NodeId> {
    let hidden = g.matmul(x, w1)?;
    let hidden = g.relu(hidden);
    g.matmul(hidden, w2)
}

// -------------------------------------------------------------------------
// single-sequence evaluation

/// Embedding of one token sequence (`t × d`).
pub fn embed(tokens: &[usize], weights: &CoreWeights) -> Result<Matrix> {
    let mut g = Graph::new();
    let model = BoundModel::bind(&mut g, weights)?;
    let x = model.embed(&mut g, tokens, SeqLayout::single(tokens.len()))?;
    Ok(g.value(x).clone())
}

/// Causal multi-head self-attention followed by the output projection.
pub fn mhsa_forward(x: &Matrix, w: &AttentionWeights) -> Result<Matrix> {
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let ids = [&w.wq, &w.wk, &w.wv, &w.wo].map(|m| g.input(m.clone()));
    let out = attention_nodes(&mut g, xi, ids, w.heads, SeqLayout::single(x.rows()))?;
    Ok(g.value(out).clone())
}

/// Row `i` is `s_i * sum_{j<=i} x_j W_{i-j+1}` with `s_i = 1/sqrt(i)` when
/// `scaled`, else 1.
pub fn extractor_extraction(x: &Matrix, w: &ExtractorWeights, scaled: bool) -> Result<Matrix> {
    extraction_with(x, w, scaled, ExtractMethod::Auto)
}

pub fn extraction_with(
    x: &Matrix,
    w: &ExtractorWeights,
    scaled: bool,
    method: ExtractMethod,
) -> Result<Matrix> {
    if x.rows() == 0 {
        return Err(Error::EmptySequence);
    }
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let taps: Vec<NodeId> = w.ext.iter().map(|m| g.input(m.clone())).collect();
    let out = g.extract_with(xi, &taps, SeqLayout::single(x.rows()), scaled, method)?;
    Ok(g.value(out).clone())
}

pub fn extractor_adjustment(x_in: &Matrix, x_ext: &Matrix, w_adj: &Matrix) -> Result<Matrix> {
    x_in.check_same_shape(x_ext, "adjustment inputs")?;
    let mut g = Graph::new();
    let a = g.input(x_in.clone());
    let e = g.input(x_ext.clone());
    let w = g.input(w_adj.clone());
    let out = adjustment_nodes(&mut g, a, e, w)?;
    Ok(g.value(out).clone())
}

pub fn ffn_forward(x: &Matrix, w1: &Matrix, w2: &Matrix) -> Result<Matrix> {
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let a = g.input(w1.clone());
    let b = g.input(w2.clone());
    let out = ffn_nodes(&mut g, xi, a, b)?;
    Ok(g.value(out).clone())
}

/// Pre-LN residual sublayer `x + inner(layer_norm_pf(x))`.
pub fn sublayer_apply(x: &Matrix, inner: impl FnOnce(&Matrix) -> Result<Matrix>) -> Result<Matrix> {
    let normed = crate::tensor::layer_norm_pf(x, LN_EPS);
    let branch = inner(&normed)?;
    if branch.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "sublayer maps {}x{} to {}x{}",
            x.rows(),
            x.cols(),
            branch.rows(),
            branch.cols()
        )));
    }
    x.add(&branch)
}

/// Layer `k` (0-based) of the core applied to one sequence.
pub fn layer_forward(x: &Matrix, weights: &CoreWeights, k: usize) -> Result<Matrix> {
    if k >= weights.layers.len() {
        return Err(Error::Config(format!(
            "layer {k} requested from a {}-layer model",
            weights.layers.len()
        )));
    }
    let (mut g, model, xi, layout) = core_graph(x, weights)?;
    let (out, _, _) = model.layer(&mut g, k, xi, layout)?;
    Ok(g.value(out).clone())
}

/// All `m` layers applied to one sequence, without a final normalization.
pub fn transformer_core_forward(x: &Matrix, weights: &CoreWeights) -> Result<Matrix> {
    Ok(core_trace(x, weights)?.output)
}

/// Values recorded while running the core on one sequence.
#[derive(Clone, Debug)]
pub struct CoreTrace {
    pub output: Matrix,
    /// The input followed by the output of every sublayer.
    pub stages: Vec<Matrix>,
    /// Inner-branch output of every sublayer.
    pub branches: Vec<Matrix>,
}

pub fn core_trace(x: &Matrix, weights: &CoreWeights) -> Result<CoreTrace> {
    let (mut g, model, xi, layout) = core_graph(x, weights)?;
    let nodes = model.core(&mut g, xi, layout)?;
    Ok(CoreTrace {
        output: g.value(nodes.output).clone(),
        stages: nodes.stages.iter().map(|&n| g.value(n).clone()).collect(),
        branches: nodes.branches.iter().map(|&n| g.value(n).clone()).collect(),
    })
}

fn core_graph(x: &Matrix, weights: &CoreWeights) -> Result<(Graph, BoundModel, NodeId, SeqLayout)> {
    let cfg = &weights.config;
    if x.rows() == 0 {
        return Err(Error::EmptySequence);
    }
    if x.rows() > cfg.context_len {
        return Err(Error::SequenceTooLong {
            len: x.rows(),
            context_len: cfg.context_len,
        });
    }
    if x.cols() != cfg.dim {
        return Err(Error::Shape(format!(
            "core input has {} columns, model dimension is {}",
            x.cols(),
            cfg.dim
        )));
    }
    let mut g = Graph::new();
    let model = BoundModel::bind(&mut g, weights)?;
    let xi = g.input(x.clone());
    Ok((g, model, xi, SeqLayout::single(x.rows())))
}

/// Next-token probabilities `row_softmax(x · head)`.
pub fn lm_head(x: &Matrix, head: &Matrix) -> Result<Matrix> {
    Ok(crate::tensor::row_softmax(&x.matmul(head)?))
}

/// Full model on one sequence; returns `t × V` next-token probabilities.
pub fn predict_probs(tokens: &[usize], weights: &CoreWeights) -> Result<Matrix> {
    let mut g = Graph::new();
    let model = BoundModel::bind(&mut g, weights)?;
    let layout = SeqLayout::single(tokens.len());
    let x = model.embed(&mut g, tokens, layout)?;
    let core = model.core(&mut g, x, layout)?;
    lm_head(g.value(core.output), &weights.head)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Most probable next token after `tokens`, read from the last row.
pub fn predict_next(tokens: &[usize], weights: &CoreWeights) -> Result<usize> {
    let probs = predict_probs(tokens, weights)?;
    Ok(argmax(probs.row(probs.rows() - 1)))
}
