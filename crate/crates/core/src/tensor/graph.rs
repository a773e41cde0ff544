//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node to the [`Graph`]; node ids are therefore a
//! topological order and [`Graph::backward`] simply walks the tape in reverse.
//! Gradients persist on the nodes and accumulate across `backward` calls until
//! [`Graph::zero_grad`] is called.
//!
//! Sequence-shaped operands (attention, extraction) use a time-major layout:
//! for `seq_len` positions and `batch` sequences the matrix has
//! `seq_len * batch` rows and row `i * batch + b` holds position `i` of
//! sequence `b`. Position-wise operations do not care about row order, so the
//! whole model runs on this layout and a single sequence is just `batch = 1`.

use super::matrix::{gemm, gemm_strided, GemmOperand, Matrix};
use super::spectral::{Form, SpectralPlan, Spectrum};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Parameter,
    Intermediate,
    Input,
}

/// Shape of a batch of equal-length sequences stored time-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub seq_len: usize,
    pub batch: usize,
}

impl SeqLayout {
    pub fn new(seq_len: usize, batch: usize) -> Self {
        Self { seq_len, batch }
    }

    pub fn single(seq_len: usize) -> Self {
        Self { seq_len, batch: 1 }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.seq_len * self.batch
    }

    #[inline]
    pub fn row(&self, position: usize, seq: usize) -> usize {
        position * self.batch + seq
    }
}

/// Evaluation strategy for [`Graph::extract_with`]. Both give the same
/// result up to rounding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractMethod {
    /// Spectral for long sequences with wide rows, direct otherwise.
    Auto,
    /// One GEMM per tap; cost grows with `t^2`.
    Direct,
    /// DFT along positions with a complex GEMM per frequency bin.
    Spectral,
}

impl ExtractMethod {
    fn spectral(self, seq_len: usize, dim: usize) -> bool {
        match self {
            ExtractMethod::Auto => seq_len >= 32 && dim >= 16,
            ExtractMethod::Direct => false,
            ExtractMethod::Spectral => true,
        }
    }
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Relu(NodeId),
    Sum(NodeId),
    RowSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        inv_std: Vec<f64>,
    },
    Gather {
        table: NodeId,
        indices: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
    Extract {
        x: NodeId,
        taps: Vec<NodeId>,
        layout: SeqLayout,
        scaled: bool,
        spectral: Option<Box<SpectralCache>>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: SeqLayout,
        heads: usize,
        probs: Vec<f64>,
    },
}

/// Forward-pass spectra reused by the extraction backward pass.
struct SpectralCache {
    plan: SpectralPlan,
    x: Spectrum,
    taps: Spectrum,
}

struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    role: Role,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(value, Role::Parameter, Op::Leaf)
    }

    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(value, Role::Input, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn role(&self, id: NodeId) -> Role {
        self.nodes[id.0].role
    }

    /// Accumulated gradient of the last loss(es) w.r.t. parameter or input
    /// `id`; zeros if no gradient has reached the node. Intermediate nodes
    /// keep no gradient.
    pub fn grad(&self, id: NodeId) -> Matrix {
        let node = &self.nodes[id.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()))
    }

    pub fn take_grad(&mut self, id: NodeId) -> Matrix {
        let node = &mut self.nodes[id.0];
        node.grad
            .take()
            .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Matrix, role: Role, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            role,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn intermediate(&mut self, value: Matrix, op: Op) -> NodeId {
        self.push(value, Role::Intermediate, op)
    }

    // ---------------------------------------------------------------------
    // forward operations

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.intermediate(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.intermediate(value, Op::Add(a, b)))
    }

    /// Entrywise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.intermediate(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.value(a).scale(s);
        self.intermediate(value, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid);
        self.intermediate(value, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.max(0.0));
        self.intermediate(value, Op::Relu(a))
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        self.intermediate(value, Op::Sum(a))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let value = row_softmax(self.value(a));
        self.intermediate(value, Op::RowSoftmax(a))
    }

    /// Parameter-free row normalization: `(x - mean) / sqrt(var + eps)` with
    /// the population variance of each row.
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let (value, inv_std) = layer_norm_rows(self.value(x), eps);
        self.intermediate(value, Op::LayerNorm { x, inv_std })
    }

    /// Row `r` of the output is row `indices[r]` of `table`.
    pub fn gather(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let t = self.value(table);
        let mut out = Matrix::zeros(indices.len(), t.cols());
        for (r, &ix) in indices.iter().enumerate() {
            if ix >= t.rows() {
                return Err(Error::TokenOutOfRange {
                    id: ix as u64,
                    offset: r,
                    vocab_size: t.rows(),
                });
            }
            out.row_mut(r).copy_from_slice(t.row(ix));
        }
        Ok(self.intermediate(out, Op::Gather { table, indices }))
    }

    /// Mean over rows of `-ln softmax(row)[target]`, as a 1×1 node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        let z = self.value(logits);
        if z.rows() != targets.len() {
            return Err(Error::Shape(format!(
                "cross entropy over {} rows with {} targets",
                z.rows(),
                targets.len()
            )));
        }
        if let Some((offset, &id)) = targets.iter().enumerate().find(|(_, &t)| t >= z.cols()) {
            return Err(Error::TokenOutOfRange {
                id: id as u64,
                offset,
                vocab_size: z.cols(),
            });
        }
        let loss = cross_entropy_mean(z, &targets);
        Ok(self.intermediate(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy { logits, targets },
        ))
    }

    /// Causal matrix-valued convolution over positions:
    /// `y_i = s_i * sum_{j<=i} x_j W_{i-j+1}` with `s_i = 1/sqrt(i)` (1-based `i`)
    /// when `scaled`, else `s_i = 1`. `taps[k]` holds `W_{k+1}`.
    pub fn extract(
        &mut self,
        x: NodeId,
        taps: &[NodeId],
        layout: SeqLayout,
        scaled: bool,
    ) -> Result<NodeId> {
        self.extract_with(x, taps, layout, scaled, ExtractMethod::Auto)
    }

    pub fn extract_with(
        &mut self,
        x: NodeId,
        taps: &[NodeId],
        layout: SeqLayout,
        scaled: bool,
        method: ExtractMethod,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let d = xv.cols();
        if xv.rows() != layout.rows() {
            return Err(Error::Shape(format!(
                "extraction input has {} rows, layout needs {}",
                xv.rows(),
                layout.rows()
            )));
        }
        if layout.seq_len > taps.len() {
            return Err(Error::SequenceTooLong {
                len: layout.seq_len,
                context_len: taps.len(),
            });
        }
        let taps = &taps[..layout.seq_len];
        for &tap in taps {
            let w = self.value(tap);
            if w.shape() != (d, d) {
                return Err(Error::Shape(format!(
                    "extraction tap is {}x{}, expected {d}x{d}",
                    w.rows(),
                    w.cols()
                )));
            }
        }
        let mut out = Matrix::zeros(layout.rows(), d);
        let mut spectral = None;
        if method.spectral(layout.seq_len, d) {
            let plan = SpectralPlan::new(layout.seq_len);
            let xs = plan.analyze(xv.as_slice(), layout.batch, d);
            let ws = plan.analyze(&self.pack_taps(taps), d, d);
            let ys = plan.product(&xs, Form::Plain, &ws, Form::Plain);
            plan.synthesize_into(&ys, out.as_mut_slice());
            spectral = Some(Box::new(SpectralCache {
                plan,
                x: xs,
                taps: ws,
            }));
        } else {
            let b = layout.batch;
            for (k, &tap) in taps.iter().enumerate() {
                // rows at positions k.. receive x from positions ..seq_len-k through W_{k+1}
                let span = (layout.seq_len - k) * b;
                gemm(
                    span,
                    d,
                    d,
                    1.0,
                    GemmOperand::new(&xv.as_slice()[..span * d], d, false),
                    GemmOperand::new(self.value(tap).as_slice(), d, false),
                    1.0,
                    &mut out.as_mut_slice()[k * b * d..],
                    d,
                );
            }
        }
        if scaled {
            scale_positions(&mut out, layout);
        }
        Ok(self.intermediate(
            out,
            Op::Extract {
                x,
                taps: taps.to_vec(),
                layout,
                scaled,
                spectral,
            },
        ))
    }

    fn pack_taps(&self, taps: &[NodeId]) -> Vec<f64> {
        let mut packed = Vec::new();
        for &tap in taps {
            packed.extend_from_slice(self.value(tap).as_slice());
        }
        packed
    }

    /// Causal multi-head scaled dot-product attention over already projected
    /// queries, keys and values (each `layout.rows() × d`).
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: SeqLayout,
        heads: usize,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        qv.check_same_shape(kv, "attention keys")?;
        qv.check_same_shape(vv, "attention values")?;
        let d = qv.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model dimension {d} is not divisible by {heads} heads"
            )));
        }
        if qv.rows() != layout.rows() {
            return Err(Error::Shape(format!(
                "attention input has {} rows, layout needs {}",
                qv.rows(),
                layout.rows()
            )));
        }
        let dh = d / heads;
        let t = layout.seq_len;
        let stride = layout.batch * d;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(layout.rows(), d);
        let mut probs = vec![0.0; layout.batch * heads * t * t];
        for b in 0..layout.batch {
            for h in 0..heads {
                let off = b * d + h * dh;
                let p = &mut probs[(b * heads + h) * t * t..][..t * t];
                // S = Q·Kᵀ / sqrt(dh), then a causal softmax per row
                gemm(
                    t,
                    dh,
                    t,
                    scale,
                    GemmOperand::strided(&qv.as_slice()[off..], stride, 1),
                    GemmOperand::strided(&kv.as_slice()[off..], 1, stride),
                    0.0,
                    p,
                    t,
                );
                for (i, row) in p.chunks_exact_mut(t).enumerate() {
                    let (live, masked) = row.split_at_mut(i + 1);
                    let max = live.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for s in live.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    for s in live.iter_mut() {
                        *s /= total;
                    }
                    masked.fill(0.0);
                }
                // O = P·V
                gemm_strided(
                    t,
                    t,
                    dh,
                    1.0,
                    GemmOperand::new(p, t, false),
                    GemmOperand::strided(&vv.as_slice()[off..], stride, 1),
                    0.0,
                    &mut out.as_mut_slice()[off..],
                    (stride, 1),
                );
            }
        }
        Ok(self.intermediate(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            },
        ))
    }

    // ---------------------------------------------------------------------
    // reverse pass

    /// Propagates d(loss)/d(node) to every node on the tape and adds it to the
    /// stored gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.run_backward(loss, false)
    }

    /// [`Graph::backward`] that drops every intermediate value and cached
    /// operand as soon as its gradient has been propagated. Parameter and
    /// input gradients are kept; the graph cannot be differentiated again.
    pub fn backward_release(&mut self, loss: NodeId) -> Result<()> {
        self.run_backward(loss, true)
    }

    fn run_backward(&mut self, loss: NodeId, release: bool) -> Result<()> {
        let (rows, cols) = self.value(loss).shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        let mut adj: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(idx, &g, &mut adj);
            let node = &mut self.nodes[idx];
            if node.role == Role::Intermediate {
                if release {
                    node.value = Matrix::zeros(0, 0);
                    node.op = Op::Leaf;
                }
                continue;
            }
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g)?,
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                // dA += G·Bᵀ
                let da = slot(adj, *a, av);
                gemm(
                    m,
                    n,
                    k,
                    1.0,
                    GemmOperand::new(g.as_slice(), n, false),
                    GemmOperand::new(bv.as_slice(), n, true),
                    1.0,
                    da.as_mut_slice(),
                    k,
                );
                // dB += Aᵀ·G
                let db = slot(adj, *b, bv);
                gemm(
                    k,
                    m,
                    n,
                    1.0,
                    GemmOperand::new(av.as_slice(), k, true),
                    GemmOperand::new(g.as_slice(), n, false),
                    1.0,
                    db.as_mut_slice(),
                    n,
                );
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    let acc = slot(adj, id, self.value(id));
                    add_into(acc.as_mut_slice(), g.as_slice());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = slot(adj, *a, av);
                for ((d, &gi), &bi) in da.as_mut_slice().iter_mut().zip(g.as_slice()).zip(bv.as_slice()) {
                    *d += gi * bi;
                }
                let db = slot(adj, *b, bv);
                for ((d, &gi), &ai) in db.as_mut_slice().iter_mut().zip(g.as_slice()).zip(av.as_slice()) {
                    *d += gi * ai;
                }
            }
            Op::Scale(a, s) => {
                let da = slot(adj, *a, self.value(*a));
                for (d, &gi) in da.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *d += s * gi;
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let da = slot(adj, *a, y);
                for ((d, &gi), &yi) in da.as_mut_slice().iter_mut().zip(g.as_slice()).zip(y.as_slice()) {
                    *d += gi * yi * (1.0 - yi);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let da = slot(adj, *a, x);
                for ((d, &gi), &xi) in da.as_mut_slice().iter_mut().zip(g.as_slice()).zip(x.as_slice()) {
                    *d += if xi > 0.0 { gi } else { 0.0 };
                }
            }
            Op::Sum(a) => {
                let s = g.get(0, 0);
                let da = slot(adj, *a, self.value(*a));
                for d in da.as_mut_slice() {
                    *d += s;
                }
            }
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let da = slot(adj, *a, y);
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = dot(yr, gr);
                    for ((d, &yi), &gi) in da.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d += yi * (gi - inner);
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let n = y.cols() as f64;
                let dx = slot(adj, *x, y);
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = dot(gr, yr) / n;
                    let s = inv_std[r];
                    for ((d, &yi), &gi) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d += s * (gi - mean_g - yi * mean_gy);
                    }
                }
            }
            Op::Gather { table, indices } => {
                let dt = slot(adj, *table, self.value(*table));
                for (r, &ix) in indices.iter().enumerate() {
                    add_into(dt.row_mut(ix), g.row(r));
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let z = self.value(*logits);
                let upstream = g.get(0, 0) / z.rows() as f64;
                let dz = slot(adj, *logits, z);
                for (r, &target) in targets.iter().enumerate() {
                    let zr = z.row(r);
                    let max = zr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = zr.iter().map(|&v| (v - max).exp()).sum();
                    let out = dz.row_mut(r);
                    for (c, (d, &v)) in out.iter_mut().zip(zr).enumerate() {
                        let p = (v - max).exp() / total;
                        let onehot = if c == target { 1.0 } else { 0.0 };
                        *d += upstream * (p - onehot);
                    }
                }
            }
            Op::Extract {
                x,
                taps,
                layout,
                scaled,
                spectral,
            } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let b = layout.batch;
                let scaled_g;
                let g = if *scaled {
                    let mut s = g.clone();
                    scale_positions(&mut s, *layout);
                    scaled_g = s;
                    &scaled_g
                } else {
                    g
                };
                if let Some(cache) = spectral {
                    let plan = &cache.plan;
                    let gs = plan.analyze(g.as_slice(), b, d);
                    // dX = G ⋆ W (correlation), dW = X ⋆ G
                    let dxs = plan.product(&gs, Form::Plain, &cache.taps, Form::Adjoint);
                    plan.synthesize_into(&dxs, slot(adj, *x, xv).as_mut_slice());
                    let dws = plan.product(&cache.x, Form::Adjoint, &gs, Form::Plain);
                    let mut dw = vec![0.0; taps.len() * d * d];
                    plan.synthesize_into(&dws, &mut dw);
                    for (&tap, chunk) in taps.iter().zip(dw.chunks(d * d)) {
                        add_into(slot(adj, tap, self.value(tap)).as_mut_slice(), chunk);
                    }
                    return;
                }
                for (k, &tap) in taps.iter().enumerate() {
                    let span = (layout.seq_len - k) * b;
                    let g_rows = &g.as_slice()[k * b * d..];
                    let wv = self.value(tap);
                    // dX[..span] += G[k..]·Wᵀ
                    let dx = slot(adj, *x, xv);
                    gemm(
                        span,
                        d,
                        d,
                        1.0,
                        GemmOperand::new(g_rows, d, false),
                        GemmOperand::new(wv.as_slice(), d, true),
                        1.0,
                        dx.as_mut_slice(),
                        d,
                    );
                    // dW += X[..span]ᵀ·G[k..]
                    let dw = slot(adj, tap, wv);
                    gemm(
                        d,
                        span,
                        d,
                        1.0,
                        GemmOperand::new(xv.as_slice(), d, true),
                        GemmOperand::new(g_rows, d, false),
                        1.0,
                        dw.as_mut_slice(),
                        d,
                    );
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols();
                let dh = d / heads;
                let t = layout.seq_len;
                let stride = layout.batch * d;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Matrix::zeros(qv.rows(), d);
                let mut dk = Matrix::zeros(qv.rows(), d);
                let mut dv = Matrix::zeros(qv.rows(), d);
                let mut ds = vec![0.0; t * t];
                for bi in 0..layout.batch {
                    for h in 0..*heads {
                        let off = bi * d + h * dh;
                        let p = &probs[(bi * heads + h) * t * t..][..t * t];
                        let go = GemmOperand::strided(&g.as_slice()[off..], stride, 1);
                        // dV += Pᵀ·G
                        gemm_strided(
                            t,
                            t,
                            dh,
                            1.0,
                            GemmOperand::new(p, t, true),
                            go,
                            1.0,
                            &mut dv.as_mut_slice()[off..],
                            (stride, 1),
                        );
                        // dP = G·Vᵀ
                        gemm(
                            t,
                            dh,
                            t,
                            1.0,
                            go,
                            GemmOperand::strided(&vv.as_slice()[off..], 1, stride),
                            0.0,
                            &mut ds,
                            t,
                        );
                        // dS = P ⊙ (dP - rowsum(P ⊙ dP)), folded with the score scale
                        for (dsr, pr) in ds.chunks_exact_mut(t).zip(p.chunks_exact(t)) {
                            let weighted = dot(pr, dsr);
                            for (x, &pij) in dsr.iter_mut().zip(pr) {
                                *x = pij * (*x - weighted) * scale;
                            }
                        }
                        // dQ += dS·K, dK += dSᵀ·Q
                        gemm_strided(
                            t,
                            t,
                            dh,
                            1.0,
                            GemmOperand::new(&ds, t, false),
                            GemmOperand::strided(&kv.as_slice()[off..], stride, 1),
                            1.0,
                            &mut dq.as_mut_slice()[off..],
                            (stride, 1),
                        );
                        gemm_strided(
                            t,
                            t,
                            dh,
                            1.0,
                            GemmOperand::new(&ds, t, true),
                            GemmOperand::strided(&qv.as_slice()[off..], stride, 1),
                            1.0,
                            &mut dk.as_mut_slice()[off..],
                            (stride, 1),
                        );
                    }
                }
                for (id, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                    match &mut adj[id.0] {
                        Some(acc) => add_into(acc.as_mut_slice(), grad.as_slice()),
                        slot @ None => *slot = Some(grad),
                    }
                }
            }
        }
    }
}

fn slot<'a>(adj: &'a mut [Option<Matrix>], id: NodeId, like: &Matrix) -> &'a mut Matrix {
    adj[id.0].get_or_insert_with(|| Matrix::zeros(like.rows(), like.cols()))
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Multiplies every row at 1-based position `i` by `1/sqrt(i)`.
fn scale_positions(m: &mut Matrix, layout: SeqLayout) {
    let width = layout.batch * m.cols();
    for (i, block) in m.as_mut_slice().chunks_mut(width).enumerate() {
        let s = 1.0 / ((i + 1) as f64).sqrt();
        for v in block {
            *v *= s;
        }
    }
}

pub(crate) fn row_softmax(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

pub(crate) fn layer_norm_rows(x: &Matrix, eps: f64) -> (Matrix, Vec<f64>) {
    let n = x.cols() as f64;
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let s = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * s;
        }
        inv_std.push(s);
    }
    (out, inv_std)
}

pub(crate) fn cross_entropy_mean(logits: &Matrix, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &target) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[target];
    }
    total / targets.len() as f64
}
