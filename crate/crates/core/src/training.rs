//! Seeded initialization, AdamW and the training loop.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::binio::write_atomic;
use crate::data::{sample_batch, Corpus};
use crate::error::{Error, Result};
use crate::model::{BoundModel, CoreWeights, ModelConfig};
use crate::tensor::{Graph, Matrix, SeqLayout};

/// Added to the root of the second moment.
pub const ADAM_EPS: f64 = 1e-8;

/// Generator stream used for weight initialization.
pub const INIT_STREAM: u64 = 0;
/// Generator stream used for batch sampling.
pub const DATA_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub n_batches: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            n_batches: 0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            init_std: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return fail(format!("init_std must be positive, got {}", self.init_std));
        }
        Ok(())
    }
}

/// Independent generator `stream` of `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fills every matrix i.i.d. `N(0, std^2)` in declaration order, row-major
/// within each matrix, then zeroes the padding row.
pub fn init_weights(weights: &mut CoreWeights, std: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    let normal = Normal::new(0.0, std)
        .ok()
        .filter(|_| std > 0.0)
        .ok_or_else(|| Error::Config(format!("init std must be positive, got {std}")))?;
    for m in weights.matrices_mut() {
        for v in m.as_mut_slice() {
            *v = normal.sample(rng);
        }
    }
    weights.clear_pad_row();
    Ok(())
}

/// Freshly initialized weights for `config` from the init stream of `seed`.
pub fn initialized(config: &ModelConfig, std: f64, seed: u64) -> Result<CoreWeights> {
    let mut w = CoreWeights::zeros(config)?;
    init_weights(&mut w, std, &mut rng_stream(seed, INIT_STREAM))?;
    Ok(w)
}

/// Adam moments for a list of named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub names: Vec<String>,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl OptState {
    pub fn new<'a>(params: impl IntoIterator<Item = (String, &'a Matrix)>) -> Self {
        let mut s = Self {
            names: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        };
        for (name, p) in params {
            s.names.push(name);
            s.m.push(Matrix::zeros(p.rows(), p.cols()));
            s.v.push(Matrix::zeros(p.rows(), p.cols()));
        }
        s
    }

    pub fn for_weights(weights: &CoreWeights) -> Self {
        Self::new(weights.named())
    }
}

/// One AdamW update with bias correction and decoupled weight decay:
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)`.
///
/// Every gradient is checked before anything is modified, so a non-finite
/// gradient leaves parameters and state untouched.
pub fn adamw_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    state: &mut OptState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        p.check_same_shape(g, &state.names[k])?;
        state.m[k].check_same_shape(g, &state.names[k])?;
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(state.names[k].clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let g = grads[k].as_slice();
        let m = state.m[k].as_mut_slice();
        let v = state.v[k].as_mut_slice();
        for (i, p) in p.as_mut_slice().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *p -= cfg.lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + cfg.weight_decay * *p);
        }
    }
    Ok(())
}

/// Training cost of every batch, indexed from 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CostLog {
    pub entries: Vec<(usize, f64)>,
}

impl CostLog {
    pub fn costs(&self) -> Vec<f64> {
        self.entries.iter().map(|&(_, c)| c).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn encode_csv(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "batch,cost")?;
        for (b, c) in &self.entries {
            writeln!(w, "{b},{c}")?;
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, |w| self.encode_csv(w))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let malformed = |detail: String| Error::Malformed {
            path: path.to_path_buf(),
            detail,
        };
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "batch,cost" => {}
            other => {
                return Err(malformed(format!(
                    "expected header batch,cost, found {:?}",
                    other.unwrap_or("")
                )))
            }
        }
        let mut log = CostLog::default();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || malformed(format!("line {}: {line:?}", n + 2));
            let (b, c) = line.split_once(',').ok_or_else(bad)?;
            let b: usize = b.trim().parse().map_err(|_| bad())?;
            let c: f64 = c.trim().parse().map_err(|_| bad())?;
            log.entries.push((b, c));
        }
        Ok(log)
    }
}

/// Training state that can be advanced one batch at a time.
pub struct Trainer<'a> {
    pub weights: CoreWeights,
    pub state: OptState,
    pub log: CostLog,
    cfg: TrainConfig,
    corpus: &'a Corpus,
    data_rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig, corpus: &'a Corpus) -> Result<Self> {
        model_cfg.validate()?;
        cfg.validate()?;
        if corpus.vocab_size() > model_cfg.vocab_size {
            return Err(Error::Config(format!(
                "corpus vocabulary {} exceeds model vocabulary {}",
                corpus.vocab_size(),
                model_cfg.vocab_size
            )));
        }
        corpus.check_window(model_cfg.context_len)?;
        let weights = initialized(model_cfg, cfg.init_std, cfg.seed)?;
        Ok(Self {
            state: OptState::for_weights(&weights),
            weights,
            log: CostLog::default(),
            cfg: cfg.clone(),
            corpus,
            data_rng: rng_stream(cfg.seed, DATA_STREAM),
        })
    }

    /// Number of batches trained so far.
    pub fn batches(&self) -> usize {
        self.log.len()
    }

    /// Samples a batch, takes one optimizer step and returns its cost.
    pub fn step(&mut self) -> Result<f64> {
        let batch_index = self.log.len() + 1;
        let l = self.weights.config.context_len;
        let batch = sample_batch(self.corpus, l, self.cfg.batch_size, &mut self.data_rng)?;
        let (inputs, targets) = batch.time_major();
        let layout = SeqLayout::new(l, self.cfg.batch_size);

        let mut g = Graph::new();
        let model = BoundModel::bind(&mut g, &self.weights)?;
        let loss = model.loss(&mut g, &inputs, &targets, layout)?;
        let cost = g.value(loss).get(0, 0);
        if !cost.is_finite() {
            return Err(Error::Diverged {
                batch: batch_index,
                last_good: batch_index - 1,
            });
        }
        g.backward_release(loss)?;
        let mut grads: Vec<Matrix> = model.params().into_iter().map(|id| g.take_grad(id)).collect();
        if let Some(pad) = self.weights.config.pad_token {
            grads[0].row_mut(pad).fill(0.0);
        }
        adamw_step(
            &mut self.weights.matrices_mut(),
            &grads,
            &mut self.state,
            &self.cfg,
        )?;
        self.weights.clear_pad_row();
        self.log.entries.push((batch_index, cost));
        Ok(cost)
    }
}

/// Trains for `cfg.n_batches` batches, calling `progress(batch, cost)` after
/// each one.
pub fn train_with(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    corpus: &Corpus,
    mut progress: impl FnMut(usize, f64),
) -> Result<(CoreWeights, CostLog)> {
    let mut trainer = Trainer::new(model_cfg, cfg, corpus)?;
    for _ in 0..cfg.n_batches {
        let cost = trainer.step()?;
        progress(trainer.batches(), cost);
    }
    Ok((trainer.weights, trainer.log))
}

pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    corpus: &Corpus,
) -> Result<(CoreWeights, CostLog)> {
    train_with(model_cfg, cfg, corpus, |_, _| {})
}
