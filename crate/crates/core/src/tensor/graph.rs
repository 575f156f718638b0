//! Tape of recorded operations with analytic backward rules.
//!
//! A [`Graph`] borrows the parameter store immutably, so several graphs can
//! run forward/backward over the same weights at once. Parameter gradients
//! come out of [`Graph::backward`] and are merged by the caller.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::gemm::{gemm, MatMut, MatRef};
use super::{shape_err, Gradients, ParamId, ParamStore, Tensor, TensorError};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Differentiable operation kinds, used for reporting and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    MatMul,
    Linear,
    Add,
    LayerNorm,
    Gelu,
    Relu,
    Dropout,
    Embedding,
    SliceRows,
    Attention,
    SoftmaxCe,
    Mean,
    Scale,
    WeightedSum,
}

impl OpKind {
    pub const ALL: [OpKind; 14] = [
        OpKind::MatMul,
        OpKind::Linear,
        OpKind::Add,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::Relu,
        OpKind::Dropout,
        OpKind::Embedding,
        OpKind::SliceRows,
        OpKind::Attention,
        OpKind::SoftmaxCe,
        OpKind::Mean,
        OpKind::Scale,
        OpKind::WeightedSum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Linear => "linear",
            OpKind::Add => "add",
            OpKind::LayerNorm => "layernorm",
            OpKind::Gelu => "gelu",
            OpKind::Relu => "relu",
            OpKind::Dropout => "dropout",
            OpKind::Embedding => "embedding",
            OpKind::SliceRows => "slice_rows",
            OpKind::Attention => "masked_attention",
            OpKind::SoftmaxCe => "softmax_ce",
            OpKind::Mean => "mean",
            OpKind::Scale => "scale",
            OpKind::WeightedSum => "weighted_sum",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// One block of a grouped attention call.
///
/// Query rows `q_start..q_start+q_len` attend key/value rows
/// `kv_start..kv_start+kv_len`. `mask` is additive, `q_len x kv_len`, with
/// `f64::NEG_INFINITY` at disallowed pairs. Groups must not share query rows.
#[derive(Debug, Clone)]
pub struct AttnGroup {
    pub q_start: usize,
    pub q_len: usize,
    pub kv_start: usize,
    pub kv_len: usize,
    pub mask: Option<Arc<Vec<f64>>>,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        x: Var,
        tanh: Vec<f64>,
    },
    Relu {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: Vec<AttnGroup>,
        probs: Vec<Vec<f64>>,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        ignore: Option<usize>,
        probs: Vec<f64>,
        count: usize,
    },
    Mean {
        xs: Vec<Var>,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } => vec![*a, *b],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Gelu { x, .. }
            | Op::Relu { x }
            | Op::Dropout { x, .. }
            | Op::SliceRows { x, .. }
            | Op::Scale { x, .. }
            | Op::WeightedSum { x, .. } => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::SoftmaxCe { logits, .. } => vec![*logits],
            Op::Mean { xs } => xs.clone(),
        }
    }

    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf | Op::Param(_) => return None,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Add { .. } => OpKind::Add,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Relu { .. } => OpKind::Relu,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::Attention { .. } => OpKind::Attention,
            Op::SoftmaxCe { .. } => OpKind::SoftmaxCe,
            Op::Mean { .. } => OpKind::Mean,
            Op::Scale { .. } => OpKind::Scale,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
        })
    }
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

/// Recording context for one forward pass.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    /// Whether a node depends on any parameter.
    needs_grad: Vec<bool>,
    param_nodes: HashMap<ParamId, Var>,
    fault: Option<OpKind>,
}

/// Gradients of every node reached from a backward call.
pub struct NodeGrads {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl NodeGrads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Accumulate the gradients of every parameter used on the tape.
    pub fn accumulate_into(&self, out: &mut Gradients) {
        for &(id, v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                out.accumulate(id, g);
            }
        }
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph with no parameter store; inputs come from [`Graph::leaf`].
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            needs_grad: Vec::new(),
            param_nodes: HashMap::new(),
            fault: None,
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    /// Negate the backward rule of `kind`. Only used to prove that the
    /// gradient checker notices a broken rule.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs = op.inputs().iter().any(|v| self.needs_grad[v.0]);
        self.needs_grad.push(needs);
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that gradients are reported for.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.needs_grad[v.0] = true;
        v
    }

    /// Input treated as a constant by [`Graph::backward`].
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        assert!(self.params.is_some(), "graph has no parameter store");
        self.needs_grad.push(true);
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("param without store").get(*id),
            (None, _) => unreachable!("non-param node without value"),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims().len() != 2 || tb.dims().len() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", ta.dims(), tb.dims()),
            ));
        }
        let (m, n) = (ta.rows(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(1.0, ta.view(), tb.view(), 0.0, MatMut::new(&mut out, 0, m, n, n));
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }))
    }

    /// `x [R, in] * w [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tw.dims().len() != 2 || tx.cols() != tw.rows() || tb.len() != tw.cols() {
            return Err(shape_err(
                "linear",
                format!("x {:?}, w {:?}, b {:?}", tx.dims(), tw.dims(), tb.dims()),
            ));
        }
        let (m, n) = (tx.rows(), tw.cols());
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(tb.data());
        }
        gemm(1.0, tx.view(), tw.view(), 1.0, MatMut::new(&mut out, 0, m, n, n));
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(shape_err("add", format!("{:?} + {:?}", ta.dims(), tb.dims())));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let dims = ta.dims().to_vec();
        Ok(self.push(Tensor::new(dims, out)?, Op::Add { a, b }))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (r, c) = tx.matrix_shape();
        if tg.len() != c || tb.len() != c {
            return Err(shape_err(
                "layernorm",
                format!("x {:?}, gamma {:?}, beta {:?}", tx.dims(), tg.dims(), tb.dims()),
            ));
        }
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let dims = tx.dims().to_vec();
        Ok(self.push(
            Tensor::new(dims, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let tanh: Vec<f64> = tx
            .data()
            .iter()
            .map(|&v| fast_tanh(GELU_C * (v + GELU_A * v * v * v)))
            .collect();
        let out = tx.data().iter().zip(&tanh).map(|(&v, t)| 0.5 * v * (1.0 + t)).collect();
        let dims = tx.dims().to_vec();
        self.push(Tensor { dims, data: out }, Op::Gelu { x, tanh })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = tx.data().iter().map(|&v| v.max(0.0)).collect();
        let dims = tx.dims().to_vec();
        self.push(Tensor { dims, data: out }, Op::Relu { x })
    }

    /// Inverted dropout. With `p == 0` this is the identity and records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let tx = self.value(x);
        let mask: Vec<f64> = (0..tx.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let dims = tx.dims().to_vec();
        self.push(Tensor { dims, data: out }, Op::Dropout { x, mask })
    }

    /// Gather rows of `table [V, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tt = self.value(table);
        let (v, d) = tt.matrix_shape();
        if tt.dims().len() != 2 {
            return Err(shape_err("embedding", format!("table {:?}", tt.dims())));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(shape_err("embedding", format!("id {id} >= {v} rows")));
            }
            out.extend_from_slice(tt.row(id));
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (r, c) = tx.matrix_shape();
        if start + len > r {
            return Err(shape_err("slice_rows", format!("{start}+{len} > {r} rows")));
        }
        let out = tx.data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor::new(vec![len, c], out)?, Op::SliceRows { x, start }))
    }

    /// Multi-head scaled dot-product attention over blocks of rows.
    ///
    /// `q [Rq, d]`, `k`/`v [Rk, d]` are already projected; heads split `d`.
    /// Rows whose mask disallows every key get zero weights and output zero.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: Vec<AttnGroup>,
    ) -> Result<Var, TensorError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rq, d) = tq.matrix_shape();
        let rk = tk.rows();
        if tk.dims() != tv.dims() || tk.cols() != d || heads == 0 || d % heads != 0 {
            return Err(shape_err(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?}, heads {heads}",
                    tq.dims(),
                    tk.dims(),
                    tv.dims()
                ),
            ));
        }
        for g in &groups {
            let mask_ok = g.mask.as_ref().is_none_or(|m| m.len() == g.q_len * g.kv_len);
            if g.q_start + g.q_len > rq || g.kv_start + g.kv_len > rk || !mask_ok {
                return Err(shape_err("attention", format!("bad group {g:?}")));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; rq * d];
        let mut probs = Vec::with_capacity(groups.len());
        for g in &groups {
            let (ql, kl) = (g.q_len, g.kv_len);
            let mut p_all = vec![0.0; heads * ql * kl];
            for h in 0..heads {
                let p = &mut p_all[h * ql * kl..(h + 1) * ql * kl];
                let qh = MatRef::new(tq.data(), g.q_start * d + h * dh, ql, dh, d);
                let kh = MatRef::new(tk.data(), g.kv_start * d + h * dh, kl, dh, d);
                gemm(scale, qh, kh.t(), 0.0, MatMut::new(p, 0, ql, kl, kl));
                if let Some(mask) = &g.mask {
                    for (s, m) in p.iter_mut().zip(mask.iter()) {
                        *s += m;
                    }
                }
                for row in p.chunks_mut(kl.max(1)) {
                    softmax_in_place(row);
                }
                let vh = MatRef::new(tv.data(), g.kv_start * d + h * dh, kl, dh, d);
                gemm(
                    1.0,
                    MatRef::new(p, 0, ql, kl, kl),
                    vh,
                    0.0,
                    MatMut::new(&mut out, g.q_start * d + h * dh, ql, dh, d),
                );
            }
            probs.push(p_all);
        }
        Ok(self.push(
            Tensor::new(vec![rq, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            },
        ))
    }

    /// Attention weights recorded by an attention node, per group and head.
    pub fn attention_weights(&self, v: Var) -> Option<&[Vec<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits [T, V]`, skipping rows whose target equals `ignore`.
    pub fn softmax_ce(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<Var, TensorError> {
        let tl = self.value(logits);
        let (t, classes) = tl.matrix_shape();
        if tl.dims().len() != 2 || targets.len() != t {
            return Err(shape_err(
                "softmax_ce",
                format!("logits {:?}, {} targets", tl.dims(), targets.len()),
            ));
        }
        let mut probs = tl.data().to_vec();
        let mut total = 0.0;
        let mut count = 0;
        for (i, &target) in targets.iter().enumerate() {
            let row = &mut probs[i * classes..(i + 1) * classes];
            softmax_in_place(row);
            if Some(target) == ignore {
                continue;
            }
            if target >= classes {
                return Err(TensorError::TargetOutOfRange { target, classes });
            }
            let logits_row = tl.row(i);
            let max = logits_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = logits_row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += log_sum - (logits_row[target] - max);
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::AllPositionsIgnored);
        }
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
        ))
    }

    /// Arithmetic mean of scalar nodes.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        if xs.is_empty() || xs.iter().any(|&x| self.value(x).len() != 1) {
            return Err(shape_err("mean", "expects one or more scalars"));
        }
        let total: f64 = xs.iter().map(|&x| self.value(x).item()).sum();
        Ok(self.push(
            Tensor::scalar(total / xs.len() as f64),
            Op::Mean { xs: xs.to_vec() },
        ))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let tx = self.value(x);
        let out = tx.data().iter().map(|v| v * factor).collect();
        let dims = tx.dims().to_vec();
        self.push(Tensor { dims, data: out }, Op::Scale { x, factor })
    }

    /// Scalar `sum(x * weights)` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if tx.len() != weights.len() {
            return Err(shape_err("weighted_sum", "weight count differs from x"));
        }
        let s = tx.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Reverse-mode sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> NodeGrads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(mut g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.op.kind().is_some() && node.op.kind() == self.fault {
                for x in g.iter_mut() {
                    *x = -*x;
                }
            }
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self.param_nodes.iter().map(|(&id, &v)| (id, v)).collect();
        NodeGrads { grads, params }
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = self.needs_grad.as_slice();
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let gv = MatRef::new(g, 0, m, n, n);
                with_grad(grads, needs, *a, m * k, |ga| {
                    gemm(1.0, gv, tb.view().t(), 1.0, MatMut::new(ga, 0, m, k, k));
                });
                with_grad(grads, needs, *b, k * n, |gb| {
                    gemm(1.0, ta.view().t(), gv, 1.0, MatMut::new(gb, 0, k, n, n));
                });
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (m, k, n) = (tx.rows(), tx.cols(), tw.cols());
                let gv = MatRef::new(g, 0, m, n, n);
                with_grad(grads, needs, *x, m * k, |gx| {
                    gemm(1.0, gv, tw.view().t(), 1.0, MatMut::new(gx, 0, m, k, k));
                });
                with_grad(grads, needs, *w, k * n, |gw| {
                    gemm(1.0, tx.view().t(), gv, 1.0, MatMut::new(gw, 0, k, n, n));
                });
                with_grad(grads, needs, *b, n, |gb| {
                    for row in g.chunks(n) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    with_grad(grads, needs, v, g.len(), |ga| add_into(ga, g));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gamma);
                let c = tg.len();
                let r = rstd.len();
                with_grad(grads, needs, *gamma, c, |gg| {
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                with_grad(grads, needs, *beta, c, |gb| {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                });
                with_grad(grads, needs, *x, r * c, |gx| {
                    let mut gh = vec![0.0; c];
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let (gi, hi) = (&g[row.clone()], &xhat[row.clone()]);
                        for j in 0..c {
                            gh[j] = gi[j] * tg.data()[j];
                        }
                        let mean_g = gh.iter().sum::<f64>() / c as f64;
                        let mean_gh = gh.iter().zip(hi).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[i * c + j] += rstd[i] * (gh[j] - mean_g - hi[j] * mean_gh);
                        }
                    }
                });
            }
            Op::Gelu { x, tanh } => {
                let tx = self.value(*x);
                with_grad(grads, needs, *x, g.len(), |gx| {
                    for (((acc, &v), gi), t) in gx.iter_mut().zip(tx.data()).zip(g).zip(tanh) {
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *acc += gi * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                    }
                });
            }
            Op::Relu { x } => {
                let tx = self.value(*x);
                with_grad(grads, needs, *x, g.len(), |gx| {
                    for ((acc, &v), gi) in gx.iter_mut().zip(tx.data()).zip(g) {
                        if v > 0.0 {
                            *acc += gi;
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                with_grad(grads, needs, *x, g.len(), |gx| {
                    for ((acc, m), gi) in gx.iter_mut().zip(mask).zip(g) {
                        *acc += gi * m;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let d = tt.cols();
                with_grad(grads, needs, *table, tt.len(), |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let c = tx.cols();
                with_grad(grads, needs, *x, tx.len(), |gx| {
                    add_into(&mut gx[start * c..start * c + g.len()], g);
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            } => self.attention_backward(g, grads, (*q, *k, *v), *heads, groups, probs),
            Op::SoftmaxCe {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                let tl = self.value(*logits);
                let classes = tl.cols();
                let s = g[0] / *count as f64;
                with_grad(grads, needs, *logits, tl.len(), |gl| {
                    for (i, &t) in targets.iter().enumerate() {
                        if Some(t) == *ignore {
                            continue;
                        }
                        let row = i * classes;
                        for j in 0..classes {
                            gl[row + j] += s * probs[row + j];
                        }
                        gl[row + t] -= s;
                    }
                });
            }
            Op::Mean { xs } => {
                let share = g[0] / xs.len() as f64;
                for &x in xs {
                    with_grad(grads, needs, x, 1, |gx| gx[0] += share);
                }
            }
            Op::Scale { x, factor } => {
                with_grad(grads, needs, *x, g.len(), |gx| {
                    for (acc, gi) in gx.iter_mut().zip(g) {
                        *acc += gi * factor;
                    }
                });
            }
            Op::WeightedSum { x, weights } => {
                with_grad(grads, needs, *x, weights.len(), |gx| {
                    for (acc, w) in gx.iter_mut().zip(weights) {
                        *acc += g[0] * w;
                    }
                });
            }
        }
    }

    fn attention_backward(
        &self,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        groups: &[AttnGroup],
        probs: &[Vec<f64>],
    ) {
        let needs = self.needs_grad.as_slice();
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = vec![0.0; tq.len()];
        let mut gk = vec![0.0; tk.len()];
        let mut gv = vec![0.0; tv.len()];
        for (grp, p_all) in groups.iter().zip(probs) {
            let (ql, kl) = (grp.q_len, grp.kv_len);
            if ql == 0 || kl == 0 {
                continue;
            }
            let mut dp = vec![0.0; ql * kl];
            for h in 0..heads {
                let p = &p_all[h * ql * kl..(h + 1) * ql * kl];
                let pv = MatRef::new(p, 0, ql, kl, kl);
                let go = MatRef::new(g, grp.q_start * d + h * dh, ql, dh, d);
                let qh = MatRef::new(tq.data(), grp.q_start * d + h * dh, ql, dh, d);
                let kh = MatRef::new(tk.data(), grp.kv_start * d + h * dh, kl, dh, d);
                let vh = MatRef::new(tv.data(), grp.kv_start * d + h * dh, kl, dh, d);
                let koff = grp.kv_start * d + h * dh;
                gemm(1.0, pv.t(), go, 1.0, MatMut::new(&mut gv, koff, kl, dh, d));
                gemm(1.0, go, vh.t(), 0.0, MatMut::new(&mut dp, 0, ql, kl, kl));
                for (prow, drow) in p.chunks(kl).zip(dp.chunks_mut(kl)) {
                    let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    for (dv, pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - dot);
                    }
                }
                let ds = MatRef::new(&dp, 0, ql, kl, kl);
                let qoff = grp.q_start * d + h * dh;
                gemm(scale, ds, kh, 1.0, MatMut::new(&mut gq, qoff, ql, dh, d));
                gemm(scale, ds.t(), qh, 1.0, MatMut::new(&mut gk, koff, kl, dh, d));
            }
        }
        for (var, contrib) in [(q, gq), (k, gk), (v, gv)] {
            with_grad(grads, needs, var, contrib.len(), |acc| add_into(acc, &contrib));
        }
    }
}

fn with_grad(
    grads: &mut [Option<Vec<f64>>],
    needs: &[bool],
    v: Var,
    len: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !needs[v.0] {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    debug_assert_eq!(buf.len(), len);
    f(buf);
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn fast_tanh(u: f64) -> f64 {
    if u.abs() < 1e-3 {
        return u.tanh();
    }
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

/// Numerically stable softmax; an all `-inf` row becomes all zeros.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}
