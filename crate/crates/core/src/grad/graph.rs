//! Computation graph and reverse-mode backward pass.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order. `backward` walks it once in reverse, which keeps the
//! pass linear in the number of ops and makes gradient accumulation order
//! fixed by construction.

use std::fmt;

use super::array::{matmul_at_into, matmul_bt_into, matmul_into, Array};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined op with a hand-written backward rule.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &str;
    /// Gradients w.r.t. each input, given the upstream gradient of the output.
    fn backward(&self, inputs: &[&Array], output: &Array, grad: &Array) -> Vec<Array>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Concat(Vec<Var>),
    Gather { table: Var, indices: Vec<usize> },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Gelu(_) => "gelu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softmax(_) => "softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumLast(_) => "sum_last",
            Op::Concat(_) => "concat",
            Op::Gather { .. } => "gather",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Array,
    op: Op,
    /// Parameter slot for leaves created with [`Graph::param`].
    param: Option<usize>,
}

/// A single-threaded computation graph.
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Graph {
    /// Graph in evaluation mode (dropout is the identity).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            training: false,
        }
    }

    pub fn training() -> Self {
        Self {
            nodes: Vec::new(),
            training: true,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn op_name(&self, v: Var) -> &str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant or input leaf.
    pub fn input(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf tagged with a parameter slot; its gradient is reported by
    /// [`Gradients::param_grads`].
    pub fn param(&mut self, slot: usize, value: Array) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].param = Some(slot);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Array::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    /// Batched product over the leading axis: `[g,m,k]·[g,k,n]`, or
    /// `[g,m,k]·[g,n,k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(mismatch("batch_matmul", sa, sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; g * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for gi in 0..g {
            let a_blk = &ad[gi * m * k..(gi + 1) * m * k];
            let b_blk = &bd[gi * k * n..(gi + 1) * k * n];
            let o_blk = &mut out[gi * m * n..(gi + 1) * m * n];
            if trans_b {
                matmul_bt_into(a_blk, b_blk, o_blk, m, k, n);
            } else {
                matmul_into(a_blk, b_blk, o_blk, m, k, n);
            }
        }
        Ok(self.push(
            Array::from_parts(vec![g, m, n], out),
            Op::BatchMatMul { a, b, trans_b },
        ))
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = if sa == sb {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_map(&out_shape, &sa);
            let ib = broadcast_map(&out_shape, &sb);
            ia.iter().zip(&ib).map(|(&i, &j)| f(ad[i], bd[j])).collect()
        };
        Ok(self.push(Array::from_parts(out_shape, data), op))
    }

    /// Elementwise sum. Operands have equal rank; size-1 axes broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    /// `ln σ(x)`, computed without overflow for large `|x|`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(log_sigmoid);
        self.push(value, Op::LogSigmoid(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| {
            let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
            0.5 * v * (1.0 + t)
        });
        self.push(value, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.push(value, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::ln);
        self.push(value, Op::Log(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let w = src.last_dim();
        let mut data = Vec::with_capacity(src.len());
        for row in src.rows() {
            softmax_row(row, &mut data);
        }
        debug_assert_eq!(data.len() % w.max(1), 0);
        let value = Array::from_parts(src.shape().to_vec(), data);
        self.push(value, Op::Softmax(x))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Array::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Array::scalar(s), Op::Mean(x))
    }

    /// Sum over the last axis, keeping it with size 1.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data: Vec<f64> = src.rows().map(|r| r.iter().sum()).collect();
        let mut shape = src.shape().to_vec();
        if let Some(last) = shape.last_mut() {
            *last = 1;
        }
        self.push(Array::from_parts(shape, data), Op::SumLast(x))
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::input("concat of zero arrays"))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        for p in parts {
            let s = self.shape(*p);
            if s.len() != lead.len() + 1 || &s[..s.len() - 1] != lead {
                return Err(mismatch("concat", self.shape(*first), s));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push(Array::from_parts(shape, data), Op::Concat(parts.to_vec())))
    }

    /// Select rows of a `[rows, d]` table. Used for embedding lookup and for
    /// pooling the first token of each sequence.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.ndim() != 2 {
            return Err(mismatch("gather", t.shape(), &[indices.len()]));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::input(format!(
                "gather index {bad} out of range for table with {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        Ok(self.push(
            Array::from_parts(vec![indices.len(), d], data),
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Alias of [`Graph::gather`] under its usual name.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather(table, ids)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let nd = src.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(mismatch("permute", src.shape(), axes));
        }
        let (shape, data) = permute_data(src, axes);
        Ok(self.push(
            Array::from_parts(shape, data),
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Layer normalization over the last axis with gain and bias of width `d`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.value(p).len() != d {
                return Err(mismatch("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let src = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = src.len() / d;
        let mut xhat = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(src.len());
        for row in src.rows() {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            for (k, v) in row.iter().enumerate() {
                let h = (v - mu) * r;
                xhat.push(h);
                data.push(h * g[k] + b[k]);
            }
        }
        let value = Array::from_parts(src.shape().to_vec(), data);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Inverted dropout. Identity in evaluation mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut RngStream) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Array::from_parts(src.shape().to_vec(), data);
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    /// Per-row negative log-likelihood of `targets` under `softmax(logits)`.
    /// `logits` is `[rows, classes]`; the result is `[rows, 1]`.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let src = self.value(logits);
        if src.ndim() != 2 || src.shape()[0] != targets.len() {
            return Err(mismatch("cross_entropy", src.shape(), &[targets.len()]));
        }
        let c = src.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::input(format!("target class {bad} out of range for {c} classes")));
        }
        let mut probs = Vec::with_capacity(src.len());
        let mut nll = Vec::with_capacity(targets.len());
        for (row, &t) in src.rows().zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            nll.push(lse - row[t]);
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        Ok(self.push(
            Array::from_parts(vec![targets.len(), 1], nll),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Record an op whose value was computed by the caller and whose
    /// backward rule is supplied by `op`.
    pub fn custom(&mut self, inputs: &[Var], value: Array, op: Box<dyn CustomOp>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Reverse-mode pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::input(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array::full(rv.shape(), 1.0));
        let mut visited = 0;
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|slot| (slot, i)))
            .collect();
        Ok(Gradients {
            grads,
            params,
            visited,
        })
    }

    fn backprop_node(&self, i: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut ga = vec![0.0; m * k];
                matmul_bt_into(g.data(), bv.data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                matmul_at_into(av.data(), g.data(), &mut gb, m, k, n);
                accumulate(grads, *a, Array::from_parts(vec![m, k], ga));
                accumulate(grads, *b, Array::from_parts(vec![k, n], gb));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (gn, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = out.shape()[2];
                let mut ga = vec![0.0; gn * m * k];
                let mut gb = vec![0.0; gn * k * n];
                for gi in 0..gn {
                    let a_blk = &av.data()[gi * m * k..(gi + 1) * m * k];
                    let b_blk = &bv.data()[gi * k * n..(gi + 1) * k * n];
                    let g_blk = &g.data()[gi * m * n..(gi + 1) * m * n];
                    let ga_blk = &mut ga[gi * m * k..(gi + 1) * m * k];
                    let gb_blk = &mut gb[gi * k * n..(gi + 1) * k * n];
                    if *trans_b {
                        // out = a·bᵀ with b [n,k]: ga = g·b, gb = gᵀ·a
                        matmul_into(g_blk, b_blk, ga_blk, m, n, k);
                        matmul_at_into(g_blk, a_blk, gb_blk, m, n, k);
                    } else {
                        matmul_bt_into(g_blk, b_blk, ga_blk, m, n, k);
                        matmul_at_into(a_blk, g_blk, gb_blk, m, k, n);
                    }
                }
                accumulate(grads, *a, Array::from_parts(av.shape().to_vec(), ga));
                accumulate(grads, *b, Array::from_parts(bv.shape().to_vec(), gb));
            }
            Op::Add(a, b) => {
                let ga = reduce_to(g, self.shape(*a));
                let gb = reduce_to(g, self.shape(*b));
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Sub(a, b) => {
                let ga = reduce_to(g, self.shape(*a));
                let gb = reduce_to(&g.map(|v| -v), self.shape(*b));
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (av, bv) = (self.value(*a), self.value(*b));
                let (da, db): (Vec<f64>, Vec<f64>) = if sa == sb {
                    (
                        g.data().iter().zip(bv.data()).map(|(g, b)| g * b).collect(),
                        g.data().iter().zip(av.data()).map(|(g, a)| g * a).collect(),
                    )
                } else {
                    let ia = broadcast_map(g.shape(), sa);
                    let ib = broadcast_map(g.shape(), sb);
                    (
                        g.data().iter().zip(&ib).map(|(g, &j)| g * bv.data()[j]).collect(),
                        g.data().iter().zip(&ia).map(|(g, &j)| g * av.data()[j]).collect(),
                    )
                };
                let da = Array::from_parts(g.shape().to_vec(), da);
                let db = Array::from_parts(g.shape().to_vec(), db);
                accumulate(grads, *a, reduce_to(&da, sa));
                accumulate(grads, *b, reduce_to(&db, sb));
            }
            Op::Affine { x, scale } => accumulate(grads, *x, g.map(|v| v * scale)),
            Op::Tanh(x) => accumulate(grads, *x, zip_map(g, out, |g, y| g * (1.0 - y * y))),
            Op::Sigmoid(x) => accumulate(grads, *x, zip_map(g, out, |g, y| g * y * (1.0 - y))),
            Op::LogSigmoid(x) => {
                accumulate(grads, *x, zip_map(g, self.value(*x), |g, x| g * sigmoid(-x)))
            }
            Op::Gelu(x) => accumulate(
                grads,
                *x,
                zip_map(g, self.value(*x), |g, x| {
                    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * dt)
                }),
            ),
            Op::Exp(x) => accumulate(grads, *x, zip_map(g, out, |g, y| g * y)),
            Op::Log(x) => accumulate(grads, *x, zip_map(g, self.value(*x), |g, x| g / x)),
            Op::Softmax(x) => {
                let w = out.last_dim();
                let mut dx = Vec::with_capacity(out.len());
                for (gr, yr) in g.data().chunks(w).zip(out.data().chunks(w)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    dx.extend(gr.iter().zip(yr).map(|(g, y)| y * (g - dot)));
                }
                accumulate(grads, *x, Array::from_parts(out.shape().to_vec(), dx));
            }
            Op::Sum(x) => {
                let s = self.shape(*x);
                accumulate(grads, *x, Array::full(s, g.item()));
            }
            Op::Mean(x) => {
                let v = self.value(*x);
                accumulate(grads, *x, Array::full(v.shape(), g.item() / v.len() as f64));
            }
            Op::SumLast(x) => {
                let v = self.value(*x);
                let w = v.last_dim();
                let data = g.data().iter().flat_map(|&gv| std::iter::repeat_n(gv, w)).collect();
                accumulate(grads, *x, Array::from_parts(v.shape().to_vec(), data));
            }
            Op::Concat(parts) => {
                let total = out.last_dim();
                let rows = out.len() / total.max(1);
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let w = pv.last_dim();
                    let mut data = Vec::with_capacity(pv.len());
                    for r in 0..rows {
                        data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(grads, *p, Array::from_parts(pv.shape().to_vec(), data));
                    offset += w;
                }
            }
            Op::Gather { table, indices } => {
                let t = self.value(*table);
                let d = t.shape()[1];
                let mut dt = Array::zeros(t.shape());
                for (r, &idx) in indices.iter().enumerate() {
                    let src = &g.data()[r * d..(r + 1) * d];
                    for (o, v) in dt.data_mut()[idx * d..(idx + 1) * d].iter_mut().zip(src) {
                        *o += v;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::Reshape(x) => {
                let s = self.shape(*x).to_vec();
                accumulate(grads, *x, Array::from_parts(s, g.data().to_vec()));
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (shape, data) = permute_data(g, &inverse);
                accumulate(grads, *x, Array::from_parts(shape, data));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.last_dim();
                let gv = self.value(*gain).data();
                let mut dx = Vec::with_capacity(out.len());
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for (r, (gr, hr)) in g.data().chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for k in 0..d {
                        let dh = gr[k] * gv[k];
                        m1 += dh;
                        m2 += dh * hr[k];
                        dg[k] += gr[k] * hr[k];
                        db[k] += gr[k];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for k in 0..d {
                        let dh = gr[k] * gv[k];
                        dx.push(rstd[r] * (dh - m1 - hr[k] * m2));
                    }
                }
                accumulate(grads, *x, Array::from_parts(out.shape().to_vec(), dx));
                let gs = self.shape(*gain).to_vec();
                let bs = self.shape(*bias).to_vec();
                accumulate(grads, *gain, Array::from_parts(gs, dg));
                accumulate(grads, *bias, Array::from_parts(bs, db));
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                accumulate(grads, *x, Array::from_parts(g.shape().to_vec(), data));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).shape()[1];
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let gr = g.data()[r];
                    let row = &mut d[r * c..(r + 1) * c];
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= gr;
                    }
                }
                accumulate(grads, *logits, Array::from_parts(vec![targets.len(), c], d));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Array> = inputs.iter().map(|v| self.value(*v)).collect();
                for (v, gi) in inputs.iter().zip(op.backward(&vals, out, g)) {
                    accumulate(grads, *v, gi);
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Array>>,
    params: Vec<(usize, usize)>,
    visited: usize,
}

impl Gradients {
    /// Gradient w.r.t. a node, if the root depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// `(slot, gradient)` for every parameter leaf in creation order. A leaf
    /// the root does not depend on gets a zero gradient.
    pub fn param_grads(&self, graph: &Graph) -> Vec<(usize, Array)> {
        self.params
            .iter()
            .map(|&(slot, node)| {
                let g = self.grads[node]
                    .clone()
                    .unwrap_or_else(|| Array::zeros(graph.nodes[node].value.shape()));
                (slot, g)
            })
            .collect()
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn accumulate(grads: &mut [Option<Array>], v: Var, g: Array) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(mismatch(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(mismatch(op, a, b)),
        })
        .collect()
}

/// For each flat output index, the flat index of the broadcast input.
fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let mut in_strides = vec![0; nd];
    let mut acc = 1;
    for ax in (0..nd).rev() {
        in_strides[ax] = if in_shape[ax] == 1 { 0 } else { acc };
        acc *= in_shape[ax];
    }
    let numel: usize = out_shape.iter().product();
    let mut idx = vec![0usize; nd];
    let mut out = Vec::with_capacity(numel);
    let mut flat = 0;
    for _ in 0..numel {
        out.push(flat);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            flat += in_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= in_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Sum `g` down to `shape` over broadcast axes.
fn reduce_to(g: &Array, shape: &[usize]) -> Array {
    if g.shape() == shape {
        return g.clone();
    }
    let map = broadcast_map(g.shape(), shape);
    let mut out = Array::zeros(shape);
    for (v, &j) in g.data().iter().zip(&map) {
        out.data_mut()[j] += v;
    }
    out
}

fn zip_map(g: &Array, other: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Array::from_parts(g.shape().to_vec(), data)
}

fn permute_data(src: &Array, axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_shape = src.shape();
    let nd = in_shape.len();
    let mut in_strides = vec![1; nd];
    for ax in (0..nd.saturating_sub(1)).rev() {
        in_strides[ax] = in_strides[ax + 1] * in_shape[ax + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut data = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; nd];
    let mut flat = 0;
    for _ in 0..src.len() {
        data.push(src.data()[flat]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            flat += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, data)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_row(row: &[f64], out: &mut Vec<f64>) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut total = 0.0;
    for v in row {
        let e = (v - max).exp();
        total += e;
        out.push(e);
    }
    for v in &mut out[start..] {
        *v /= total;
    }
}
