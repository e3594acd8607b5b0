//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every operation appends one node holding its value, its parents and
//! whatever it needs for the backward rule. Parents always precede children,
//! so a reverse index scan is a valid topological order.
//!
//! Matrix-shaped operations treat a tensor as `[rows x cols]` over its last
//! axis. Batched sequence data is stored as `[batch * tokens x channels]` and
//! the operations that care about sample boundaries take the block count.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow these when std is linked
use num_traits::Float as _;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::Tensor;
use crate::Float;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    BlockMatMul { a: Var, b: Var, blocks: usize, trans_b: bool },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Scale { a: Var, factor: Float },
    ScaleBy { a: Var, s: Var },
    Exp { a: Var },
    Relu { a: Var },
    Tanh { a: Var },
    Dropout { a: Var, mask: Vec<Float> },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<Float>, inv_std: Vec<Float> },
    BatchNorm { x: Var, gain: Var, bias: Var, xhat: Vec<Float>, inv_std: Vec<Float>, batch_stats: bool },
    Conv1d { x: Var, w: Var, blocks: usize },
    Concat { parts: Vec<Var> },
    SegmentMean { x: Var, lengths: Vec<usize> },
    Sum { a: Var },
    NormalizeRows { a: Var, norms: Vec<Float> },
    DiagCrossEntropy { logits: Var, probs: Vec<Float> },
    Gather { table: Var, ids: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BlockMatMul { .. } => "block_matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddRow { .. } => "add_row",
            Op::Scale { .. } => "scale",
            Op::ScaleBy { .. } => "scale_by",
            Op::Exp { .. } => "exp",
            Op::Relu { .. } => "relu",
            Op::Tanh { .. } => "tanh",
            Op::Dropout { .. } => "dropout",
            Op::Softmax { .. } => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm_1d",
            Op::Conv1d { .. } => "conv1d_tokens",
            Op::Concat { .. } => "concat_last_axis",
            Op::SegmentMean { .. } => "mean_pool_tokens",
            Op::Sum { .. } => "sum",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::DiagCrossEntropy { .. } => "diag_cross_entropy",
            Op::Gather { .. } => "gather_rows",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b }
            | Op::BlockMatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b } => vec![*a, *b],
            Op::AddRow { x, bias } => vec![*x, *bias],
            Op::ScaleBy { a, s } => vec![*a, *s],
            Op::Transpose { a }
            | Op::Scale { a, .. }
            | Op::Exp { a }
            | Op::Relu { a }
            | Op::Tanh { a }
            | Op::Dropout { a, .. }
            | Op::Softmax { a }
            | Op::Sum { a }
            | Op::NormalizeRows { a, .. } => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } | Op::BatchNorm { x, gain, bias, .. } => {
                vec![*x, *gain, *bias]
            }
            Op::Conv1d { x, w, .. } => vec![*x, *w],
            Op::Concat { parts } => parts.clone(),
            Op::SegmentMean { x, .. } => vec![*x],
            Op::DiagCrossEntropy { logits, .. } => vec![*logits],
            Op::Gather { table, .. } => vec![*table],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<alloc::string::String>,
}

/// Result of a backward pass: one optional gradient buffer per tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<Float>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[Float]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.get(v)?;
        Some(Tensor::new(&self.shapes[v.0], g.to_vec()).expect("gradient shape matches value"))
    }
}

/// `c[m x n] += a[m x k] * b[k x n]`
fn mm_acc(c: &mut [Float], a: &[Float], b: &[Float], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m x n] += a[m x k] * b[n x k]^T`
fn mm_bt_acc(c: &mut [Float], a: &[Float], b: &[Float], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: Float = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// `c[k x n] += a[m x k]^T * b[m x n]`
fn mm_at_acc(c: &mut [Float], a: &[Float], b: &[Float], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Mean and inverse standard deviation of `n` values read through `get`.
fn standardize_stats(n: usize, eps: Float, get: impl Fn(usize) -> Float) -> (Float, Float, Float) {
    let nf = n as Float;
    let mean = (0..n).map(&get).sum::<Float>() / nf;
    let var = (0..n).map(|i| (get(i) - mean).powi(2)).sum::<Float>() / nf;
    (mean, var, 1.0 / (var + eps).sqrt())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Deliberately skews the backward rule of every `op` node by 25%. Only
    /// meant for proving that gradient checks catch such bugs.
    pub fn inject_fault(&mut self, op: &str) {
        self.fault = Some(op.into());
    }

    /// Names of all differentiable operations, as used in error messages.
    pub const OPS: [&'static str; 23] = [
        "matmul",
        "block_matmul",
        "transpose",
        "add",
        "sub",
        "mul",
        "add_row",
        "scale",
        "scale_by",
        "exp",
        "relu",
        "tanh",
        "dropout",
        "softmax_rows",
        "layer_norm",
        "batch_norm_1d",
        "conv1d_tokens",
        "concat_last_axis",
        "mean_pool_tokens",
        "sum",
        "normalize_rows",
        "diag_cross_entropy",
        "gather_rows",
    ];

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[Float] {
        self.nodes[v.0].value.data()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor, op: Op, leaf_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = match op {
            Op::Leaf => leaf_grad,
            _ => op.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `a[m x k] * b[k x n]`. `a` may carry leading axes; they are folded
    /// into the row count.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let bs = self.shape(b);
        if bs.len() != 2 || bs[0] != k {
            return Err(Error::shape("matmul", self.shape(a), bs));
        }
        let n = bs[1];
        let mut out = vec![0.0; m * n];
        mm_acc(&mut out, self.data(a), self.data(b), m, k, n);
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b }, false)
    }

    /// Per-block products: `a` is `[blocks*m x k]`; `b` is `[blocks*k x n]`
    /// or, with `trans_b`, `[blocks*n x k]` used transposed.
    pub fn block_matmul(&mut self, a: Var, b: Var, blocks: usize, trans_b: bool) -> Result<Var> {
        let (ra, k) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if blocks == 0 || ra % blocks != 0 || rb % blocks != 0 {
            return Err(Error::shape("block_matmul", self.shape(a), self.shape(b)));
        }
        let m = ra / blocks;
        let (inner, n) = if trans_b { (cb, rb / blocks) } else { (rb / blocks, cb) };
        if inner != k {
            return Err(Error::shape("block_matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; blocks * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for blk in 0..blocks {
            let a_blk = &ad[blk * m * k..(blk + 1) * m * k];
            let b_blk = &bd[blk * k * n..(blk + 1) * k * n];
            let c_blk = &mut out[blk * m * n..(blk + 1) * m * n];
            if trans_b {
                mm_bt_acc(c_blk, a_blk, b_blk, m, k, n);
            } else {
                mm_acc(c_blk, a_blk, b_blk, m, k, n);
            }
        }
        self.push(
            Tensor::new(&[blocks * m, n], out)?,
            Op::BlockMatMul { a, b, blocks, trans_b },
            false,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let d = self.data(a);
        let out = (0..r * c).map(|i| d[(i % r) * c + i / r]).collect();
        self.push(Tensor::new(&[c, r], out)?, Op::Transpose { a }, false)
    }

    fn zip_op(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(Float, Float) -> Float, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(&shape, out)?, op, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a `[cols]` vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.dims(x);
        if self.value(bias).numel() != c {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let bd = self.data(bias);
        let out = self.data(x).iter().enumerate().map(|(i, v)| v + bd[i % c]).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(&shape, out)?, Op::AddRow { x, bias }, false)
    }

    pub fn scale(&mut self, a: Var, factor: Float) -> Result<Var> {
        let out = self.data(a).iter().map(|v| v * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(&shape, out)?, Op::Scale { a, factor }, false)
    }

    /// Multiplies every element by the single element of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by", self.shape(a), self.shape(s)));
        }
        let f = self.data(s)[0];
        let out = self.data(a).iter().map(|v| v * f).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(&shape, out)?, Op::ScaleBy { a, s }, false)
    }

    fn map_op(&mut self, a: Var, f: impl Fn(Float) -> Float, op: Op) -> Result<Var> {
        let out = self.data(a).iter().map(|&v| f(v)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(&shape, out)?, op, false)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map_op(a, Float::exp, Op::Exp { a })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map_op(a, |v| v.max(0.0), Op::Relu { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map_op(a, Float::tanh, Op::Tanh { a })
    }

    /// Inverted dropout. `rng == None` means evaluation mode (identity).
    pub fn dropout(&mut self, a: Var, rate: Float, rng: Option<&mut StreamRng>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        let rng = match rng {
            Some(rng) if rate > 0.0 => rng,
            _ => return Ok(a),
        };
        let keep = 1.0 - rate;
        let mask: Vec<Float> = (0..self.value(a).numel())
            .map(|_| if rng.random::<Float>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = self.data(a).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(&shape, out)?, Op::Dropout { a, mask }, false)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let d = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
            let o = &mut out[i * c..(i + 1) * c];
            let mut total = 0.0;
            for (ov, &v) in o.iter_mut().zip(row) {
                *ov = (v - max).exp();
                total += *ov;
            }
            o.iter_mut().for_each(|v| *v /= total);
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(&shape, out)?, Op::Softmax { a }, false)
    }

    /// Per-row standardization (population variance) followed by gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: Float) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (d, g, b) = (self.data(x), self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let (mean, _, inv) = standardize_stats(c, eps, |j| row[j]);
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            false,
        )
    }

    /// Per-column standardization over all rows (batch and token axes).
    /// Returns the output and the biased batch mean/variance per channel.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: Float,
    ) -> Result<(Var, Vec<Float>, Vec<Float>)> {
        let (r, c) = self.dims(x);
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::shape("batch_norm_1d", self.shape(x), self.shape(gain)));
        }
        let (d, g, b) = (self.data(x), self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; c];
        let mut means = vec![0.0; c];
        let mut vars = vec![0.0; c];
        let mut out = vec![0.0; r * c];
        for j in 0..c {
            let (mean, var, inv) = standardize_stats(r, eps, |i| d[i * c + j]);
            means[j] = mean;
            vars[j] = var;
            inv_std[j] = inv;
            for i in 0..r {
                let h = (d[i * c + j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let v = self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm { x, gain, bias, xhat, inv_std, batch_stats: true },
            false,
        )?;
        Ok((v, means, vars))
    }

    /// Standardization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        running_mean: &[Float],
        running_var: &[Float],
        eps: Float,
    ) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gain).numel() != c || running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm_1d", self.shape(x), self.shape(gain)));
        }
        let (d, g, b) = (self.data(x), self.data(gain), self.data(bias));
        let inv_std: Vec<Float> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; r * c];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                let h = (d[i * c + j] - running_mean[j]) * inv_std[j];
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm { x, gain, bias, xhat, inv_std, batch_stats: false },
            false,
        )
    }

    /// Cross-correlation along the token axis with "same" zero padding.
    ///
    /// `x` is `[blocks*T x c_in]`, `w` is `[c_out x c_in x k]` with odd `k`.
    pub fn conv1d_tokens(&mut self, x: Var, w: Var, blocks: usize) -> Result<Var> {
        let (rows, c_in) = self.dims(x);
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != c_in || ws[2].is_multiple_of(2) {
            return Err(Error::shape("conv1d_tokens", self.shape(x), &ws));
        }
        if blocks == 0 || rows % blocks != 0 {
            return Err(Error::shape("conv1d_tokens", self.shape(x), &[blocks]));
        }
        let (c_out, k) = (ws[0], ws[2]);
        let t_len = rows / blocks;
        let pad = (k - 1) / 2;
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![0.0; rows * c_out];
        for blk in 0..blocks {
            for t in 0..t_len {
                let orow = &mut out[(blk * t_len + t) * c_out..(blk * t_len + t + 1) * c_out];
                for j in 0..k {
                    let src = t as isize + j as isize - pad as isize;
                    if src < 0 || src >= t_len as isize {
                        continue;
                    }
                    let xrow = &xd[(blk * t_len + src as usize) * c_in..][..c_in];
                    for (o, ov) in orow.iter_mut().enumerate() {
                        let wrow = &wd[o * c_in * k..(o + 1) * c_in * k];
                        let mut acc = 0.0;
                        for (c, xv) in xrow.iter().enumerate() {
                            acc += wrow[c * k + j] * xv;
                        }
                        *ov += acc;
                    }
                }
            }
        }
        self.push(
            Tensor::new(&[rows, c_out], out)?,
            Op::Conv1d { x, w, blocks },
            false,
        )
    }

    /// Concatenation along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rows = self.dims(first).0;
        for &p in parts {
            if self.dims(p).0 != rows {
                return Err(Error::shape("concat_last_axis", self.shape(first), self.shape(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.data(p)[i * c..(i + 1) * c]);
            }
        }
        self.push(
            Tensor::new(&[rows, total], out)?,
            Op::Concat { parts: parts.to_vec() },
            false,
        )
    }

    /// Mean over consecutive row segments of the given lengths.
    pub fn segment_mean(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let (rows, c) = self.dims(x);
        if lengths.is_empty() || lengths.contains(&0) || lengths.iter().sum::<usize>() != rows {
            return Err(Error::shape("mean_pool_tokens", self.shape(x), lengths));
        }
        let d = self.data(x);
        let mut out = vec![0.0; lengths.len() * c];
        let mut start = 0;
        for (s, &len) in lengths.iter().enumerate() {
            let o = &mut out[s * c..(s + 1) * c];
            for i in start..start + len {
                for (ov, v) in o.iter_mut().zip(&d[i * c..(i + 1) * c]) {
                    *ov += v;
                }
            }
            o.iter_mut().for_each(|v| *v /= len as Float);
            start += len;
        }
        self.push(
            Tensor::new(&[lengths.len(), c], out)?,
            Op::SegmentMean { x, lengths: lengths.to_vec() },
            false,
        )
    }

    /// Mean over tokens for `[blocks*T x c]` input, giving `[blocks x c]`.
    pub fn mean_pool_tokens(&mut self, x: Var, blocks: usize) -> Result<Var> {
        let rows = self.dims(x).0;
        if blocks == 0 || !rows.is_multiple_of(blocks) {
            return Err(Error::shape("mean_pool_tokens", self.shape(x), &[blocks]));
        }
        self.segment_mean(x, &vec![rows / blocks; blocks])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).sum();
        self.push(Tensor::scalar(total), Op::Sum { a }, false)
    }

    /// Scales every row to unit Euclidean norm. Zero rows are a domain error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let d = self.data(a);
        let mut norms = Vec::with_capacity(r);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<Float>().sqrt();
            if n == 0.0 {
                return Err(Error::Domain(format!("row {i} has zero norm")));
            }
            norms.push(n);
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v / n;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(&shape, out)?, Op::NormalizeRows { a, norms }, false)
    }

    /// Mean over rows of `-log softmax(row)[i]` at the diagonal entry, for
    /// square `[b x b]` logits. Uses log-sum-exp stabilization.
    pub fn diag_cross_entropy(&mut self, logits: Var) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if r != c {
            return Err(Error::shape("diag_cross_entropy", self.shape(logits), &[r, r]));
        }
        let d = self.data(logits);
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
            let sum_exp: Float = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total += lse - row[i];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        self.push(
            Tensor::scalar(total / r as Float),
            Op::DiagCrossEntropy { logits, probs },
            false,
        )
    }

    /// Selects rows of a `[vocab x d]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, c) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::Contract("gather of zero rows".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("gather_rows", self.shape(table), &[bad]));
        }
        let d = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        self.push(
            Tensor::new(&[ids.len(), c], out)?,
            Op::Gather { table, ids: ids.to_vec() },
            false,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<Float>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if self.fault.as_deref() == Some(node.op.name()) {
                let skewed: Vec<Float> = g.iter().map(|v| v * 1.25).collect();
                self.backprop(&node.op, &node.value, &skewed, &mut grads);
                grads[idx] = Some(g);
                continue;
            }
            self.backprop(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<Float>>], v: Var, f: impl FnOnce(&mut [Float])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn backprop(&self, op: &Op, out: &Tensor, g: &[Float], grads: &mut [Option<Vec<Float>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                self.accumulate(grads, *a, |ga| mm_bt_acc(ga, g, self.data(*b), m, n, k));
                self.accumulate(grads, *b, |gb| mm_at_acc(gb, self.data(*a), g, m, k, n));
            }
            Op::BlockMatMul { a, b, blocks, trans_b } => {
                let blocks = *blocks;
                let (ra, k) = self.dims(*a);
                let m = ra / blocks;
                let n = out.cols();
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| {
                    for blk in 0..blocks {
                        let gb = &g[blk * m * n..(blk + 1) * m * n];
                        let b_blk = &bd[blk * k * n..(blk + 1) * k * n];
                        let ga_blk = &mut ga[blk * m * k..(blk + 1) * m * k];
                        if *trans_b {
                            // c = a b^T, b is [n x k]
                            mm_acc(ga_blk, gb, b_blk, m, n, k);
                        } else {
                            mm_bt_acc(ga_blk, gb, b_blk, m, n, k);
                        }
                    }
                });
                self.accumulate(grads, *b, |gbv| {
                    for blk in 0..blocks {
                        let gb = &g[blk * m * n..(blk + 1) * m * n];
                        let a_blk = &ad[blk * m * k..(blk + 1) * m * k];
                        let out_blk = &mut gbv[blk * k * n..(blk + 1) * k * n];
                        if *trans_b {
                            // d b[n x k] = g^T a
                            mm_at_acc(out_blk, gb, a_blk, m, n, k);
                        } else {
                            mm_at_acc(out_blk, a_blk, gb, m, k, n);
                        }
                    }
                });
            }
            Op::Transpose { a } => {
                let (r, c) = self.dims(*a);
                // out is [c x r]
                self.accumulate(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::AddRow { x, bias } => {
                let c = self.dims(*x).1;
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                self.accumulate(grads, *bias, |gb| {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % c] += v;
                    }
                });
            }
            Op::Scale { a, factor } => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * factor));
            }
            Op::ScaleBy { a, s } => {
                let f = self.data(*s)[0];
                let ad = self.data(*a);
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * f));
                self.accumulate(grads, *s, |gs| gs[0] += g.iter().zip(ad).map(|(y, x)| y * x).sum::<Float>());
            }
            Op::Exp { a } => {
                let od = out.data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * od[i];
                    }
                });
            }
            Op::Relu { a } => {
                let ad = self.data(*a);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        if ad[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Tanh { a } => {
                let od = out.data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * (1.0 - od[i] * od[i]);
                    }
                });
            }
            Op::Dropout { a, mask } => {
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * mask[i];
                    }
                });
            }
            Op::Softmax { a } => {
                let c = out.cols();
                let od = out.data();
                self.accumulate(grads, *a, |ga| {
                    for (i, grow) in g.chunks(c).enumerate() {
                        let yrow = &od[i * c..(i + 1) * c];
                        let dot: Float = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for j in 0..c {
                            ga[i * c + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (r, c) = self.dims(*x);
                let gd = self.data(*gain);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..r {
                        let idx = |j: usize| i * c + j;
                        standardize_backward(c, inv_std[i], |j| g[idx(j)] * gd[j], |j| xhat[idx(j)], |j, v| gx[idx(j)] += v);
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for (i, v) in g.iter().enumerate() {
                        gg[i % c] += v * xhat[i];
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % c] += v;
                    }
                });
            }
            Op::BatchNorm { x, gain, bias, xhat, inv_std, batch_stats } => {
                let (r, c) = self.dims(*x);
                let gd = self.data(*gain);
                self.accumulate(grads, *x, |gx| {
                    if *batch_stats {
                        for j in 0..c {
                            let idx = |i: usize| i * c + j;
                            standardize_backward(r, inv_std[j], |i| g[idx(i)] * gd[j], |i| xhat[idx(i)], |i, v| gx[idx(i)] += v);
                        }
                    } else {
                        for (i, v) in g.iter().enumerate() {
                            gx[i] += v * gd[i % c] * inv_std[i % c];
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for (i, v) in g.iter().enumerate() {
                        gg[i % c] += v * xhat[i];
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % c] += v;
                    }
                });
            }
            Op::Conv1d { x, w, blocks } => {
                let (rows, c_in) = self.dims(*x);
                let ws = self.shape(*w);
                let (c_out, k) = (ws[0], ws[2]);
                let t_len = rows / blocks;
                let pad = (k - 1) / 2;
                let (xd, wd) = (self.data(*x), self.data(*w));
                let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for blk in 0..*blocks {
                        for t in 0..t_len {
                            for j in 0..k {
                                let src = t as isize + j as isize - pad as isize;
                                if src < 0 || src >= t_len as isize {
                                    continue;
                                }
                                f(blk * t_len + t, blk * t_len + src as usize, j);
                            }
                        }
                    }
                };
                self.accumulate(grads, *x, |gx| {
                    taps(&mut |dst, src, j| {
                        for o in 0..c_out {
                            let go = g[dst * c_out + o];
                            if go == 0.0 {
                                continue;
                            }
                            for c in 0..c_in {
                                gx[src * c_in + c] += go * wd[(o * c_in + c) * k + j];
                            }
                        }
                    });
                });
                self.accumulate(grads, *w, |gw| {
                    taps(&mut |dst, src, j| {
                        for o in 0..c_out {
                            let go = g[dst * c_out + o];
                            if go == 0.0 {
                                continue;
                            }
                            for c in 0..c_in {
                                gw[(o * c_in + c) * k + j] += go * xd[src * c_in + c];
                            }
                        }
                    });
                });
            }
            Op::Concat { parts } => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    self.accumulate(grads, p, |gp| {
                        for i in 0..rows {
                            for j in 0..c {
                                gp[i * c + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::SegmentMean { x, lengths } => {
                let c = self.dims(*x).1;
                self.accumulate(grads, *x, |gx| {
                    let mut start = 0;
                    for (s, &len) in lengths.iter().enumerate() {
                        for i in start..start + len {
                            for j in 0..c {
                                gx[i * c + j] += g[s * c + j] / len as Float;
                            }
                        }
                        start += len;
                    }
                });
            }
            Op::Sum { a } => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::NormalizeRows { a, norms } => {
                let c = out.cols();
                let od = out.data();
                self.accumulate(grads, *a, |ga| {
                    for (i, n) in norms.iter().enumerate() {
                        let y = &od[i * c..(i + 1) * c];
                        let gy = &g[i * c..(i + 1) * c];
                        let dot: Float = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            ga[i * c + j] += (gy[j] - y[j] * dot) / n;
                        }
                    }
                });
            }
            Op::DiagCrossEntropy { logits, probs } => {
                let b = self.dims(*logits).0;
                let scale = g[0] / b as Float;
                self.accumulate(grads, *logits, |gl| {
                    for i in 0..b {
                        for j in 0..b {
                            let target = if i == j { 1.0 } else { 0.0 };
                            gl[i * b + j] += scale * (probs[i * b + j] - target);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let c = self.dims(*table).1;
                self.accumulate(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            gt[id * c + j] += g[r * c + j];
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [Float], src: &[Float]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Backward of `xhat = (x - mean) * inv_std` over `n` values, given the
/// upstream gradient with respect to `xhat`.
fn standardize_backward(
    n: usize,
    inv_std: Float,
    dxhat: impl Fn(usize) -> Float,
    xhat: impl Fn(usize) -> Float,
    mut emit: impl FnMut(usize, Float),
) {
    let nf = n as Float;
    let sum_d: Float = (0..n).map(&dxhat).sum();
    let sum_dx: Float = (0..n).map(|i| dxhat(i) * xhat(i)).sum();
    for i in 0..n {
        emit(i, inv_std / nf * (nf * dxhat(i) - sum_d - xhat(i) * sum_dx));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[Float]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2)).unwrap();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0])).unwrap();
        let id = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(id).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
        let z = tape.constant(Tensor::zeros(&[3, 2])).unwrap();
        let zb = tape.matmul(z, b).unwrap();
        assert!(tape.value(zb).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, [2, 3]);
                assert_eq!(rhs, [2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape
            .constant(t(&[2, 3], &[2.0, 2.0, 2.0, 0.0, (3.0 as Float).ln(), -50.0]))
            .unwrap();
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y);
        for j in 0..3 {
            assert!((v.at(0, j) - 1.0 / 3.0).abs() < 1e-6);
        }
        assert!((v.at(1, 0) - 0.25).abs() < 1e-6);
        assert!((v.at(1, 1) - 0.75).abs() < 1e-6);
        let big = tape.constant(t(&[1, 2], &[1e4, 1e4 - 1.0])).unwrap();
        let ys = tape.softmax_rows(big).unwrap();
        assert!(tape.value(ys).is_finite());
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[5.0, 5.0, 5.0, 1.0, 3.0, 8.0])).unwrap();
        let g = tape.constant(Tensor::full(&[3], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(&[3])).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).row(0), &[0.0, 0.0, 0.0]);
        let mean: Float = tape.value(y).row(1).iter().sum::<Float>() / 3.0;
        assert!(mean.abs() < 1e-5);

        let x2 = tape.constant(t(&[1, 2], &[1.0, 3.0])).unwrap();
        let g2 = tape.constant(Tensor::full(&[2], 1.0)).unwrap();
        let b2 = tape.constant(Tensor::zeros(&[2])).unwrap();
        let y2 = tape.layer_norm(x2, g2, b2, 0.0).unwrap();
        assert_eq!(tape.value(y2).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn conv1d_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 1], &[1.0, 2.0, 3.0])).unwrap();
        let w = tape.constant(t(&[1, 1, 3], &[1.0, 1.0, 1.0])).unwrap();
        let y = tape.conv1d_tokens(x, w, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 6.0, 5.0]);

        // delta kernels wired channel-to-channel reproduce the input
        let xs = tape.constant(Tensor::from_fn(&[8, 2], |i| i as Float * 0.5 - 1.0)).unwrap();
        let delta = Tensor::from_fn(&[2, 2, 3], |i| {
            let (o, c, j) = (i / 6, (i / 3) % 2, i % 3);
            if o == c && j == 1 { 1.0 } else { 0.0 }
        });
        let wd = tape.constant(delta).unwrap();
        let ys = tape.conv1d_tokens(xs, wd, 2).unwrap();
        assert_eq!(tape.value(ys), tape.value(xs));

        let wz = tape.constant(Tensor::zeros(&[2, 2, 3])).unwrap();
        let yz = tape.conv1d_tokens(xs, wz, 2).unwrap();
        assert!(tape.value(yz).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv1d_respects_block_boundaries() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let w = tape.constant(t(&[1, 1, 3], &[1.0, 1.0, 1.0])).unwrap();
        let y = tape.conv1d_tokens(x, w, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 3.0, 7.0, 7.0]);
    }

    #[test]
    fn elementwise_and_pooling_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[-1.0, 0.0, 2.0])).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let mut rng = crate::rng::stream(1, crate::rng::Purpose::Dropout, 0);
        let d = tape.dropout(x, 0.0, Some(&mut rng)).unwrap();
        assert_eq!(d, x);
        assert!(matches!(tape.dropout(x, 1.0, Some(&mut rng)), Err(Error::Config(_))));
        let p = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let m = tape.mean_pool_tokens(p, 1).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0, 3.0]);
        let a = tape.constant(t(&[2, 1], &[1.0, 2.0])).unwrap();
        let c = tape.concat_cols(&[p, a]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 1.0, 3.0, 4.0, 2.0]);
    }

    #[test]
    fn dropout_scales_kept_units() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[100, 10], 1.0)).unwrap();
        let mut rng = crate::rng::stream(3, crate::rng::Purpose::Dropout, 0);
        let y = tape.dropout(x, 0.25, Some(&mut rng)).unwrap();
        let v = tape.value(y);
        assert!(v.data().iter().all(|&e| e == 0.0 || (e - 1.0 / 0.75).abs() < 1e-6));
        let kept = v.data().iter().filter(|&&e| e > 0.0).count();
        assert!((650..850).contains(&kept), "kept {kept}");
        let e = tape.dropout(x, 0.25, None).unwrap();
        assert_eq!(e, x);
    }

    #[test]
    fn batch_norm_modes() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::from_fn(&[6, 2], |i| if i % 2 == 0 { 4.0 } else { i as Float * 1.5 }))
            .unwrap();
        let g = tape.constant(Tensor::full(&[2], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(&[2])).unwrap();
        let (y, mean, var) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
        let v = tape.value(y);
        assert!((0..6).all(|i| v.at(i, 0) == 0.0));
        let col: alloc::vec::Vec<Float> = (0..6).map(|i| v.at(i, 1)).collect();
        let m = col.iter().sum::<Float>() / 6.0;
        let s = col.iter().map(|c| (c - m).powi(2)).sum::<Float>() / 6.0;
        assert!(m.abs() < 1e-5);
        assert!((s - 1.0).abs() < 1e-3);
        assert_eq!(mean[0], 4.0);
        assert_eq!(var[0], 0.0);

        let rm = [1.0, -2.0];
        let rv = [4.0, 0.25];
        let g2 = tape.constant(t(&[2], &[2.0, 0.5])).unwrap();
        let b2 = tape.constant(t(&[2], &[0.1, -0.3])).unwrap();
        let ye = tape.batch_norm_eval(x, g2, b2, &rm, &rv, 1e-5).unwrap();
        let xv = tape.value(x).clone();
        for i in 0..6 {
            for j in 0..2 {
                let gain: Float = [2.0, 0.5][j];
                let bias: Float = [0.1, -0.3][j];
                let want = (xv.at(i, j) - rm[j]) / (rv[j] + 1e-5).sqrt() * gain + bias;
                assert!((tape.value(ye).at(i, j) - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5])).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);

        let xx = tape.mul(x, x).unwrap();
        let s2 = tape.sum(xx).unwrap();
        let g2 = tape.backward(s2).unwrap();
        assert_eq!(g2.get(x).unwrap(), &[2.0, -4.0, 6.0, 1.0]);

        assert!(matches!(tape.backward(xx), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_accumulates_over_uses_and_skips_constants() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0)).unwrap();
        let c = tape.constant(Tensor::scalar(5.0)).unwrap();
        let a = tape.mul(x, c).unwrap();
        let b = tape.add(a, x).unwrap();
        let g = tape.backward(b).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn normalize_rows_rejects_zero_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0])).unwrap();
        match tape.normalize_rows(x) {
            Err(Error::Domain(msg)) => assert!(msg.contains("row 1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1000.0)).unwrap();
        assert!(matches!(tape.exp(x), Err(Error::NonFinite { op: "exp" })));
    }
}
