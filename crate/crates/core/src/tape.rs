//! Wengert tape: forward primitives recorded in execution order, replayed in
//! reverse to accumulate gradients via the chain rule.
//!
//! A tape is single-threaded and owns every tensor produced under it. Leaves
//! registered with `requires_grad` receive `dLoss/dLeaf` in their gradient
//! accumulator after `backward`. Independent samples may be evaluated in
//! parallel as long as each uses its own tape.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a tensor living on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Train/eval switch for batch normalization. Eval carries the frozen
/// running statistics; train computes batch statistics from the input.
#[derive(Clone, Debug)]
pub enum BnMode {
    Train,
    Eval { mean: Vec<f64>, var: Vec<f64> },
}

/// The primitive kinds exposed by the public `forward_primitive` entry point.
#[derive(Clone, Debug)]
pub enum PrimitiveKind {
    MatMul,
    Conv2d { stride: usize, pad: usize },
    Linear,
    Relu,
    BatchNorm { eps: f64, mode: BnMode },
    MaxPool2x2Stride2,
    Softmax { axis: usize },
    Hadamard,
    Concat { axis: usize },
    Add,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul,
    Conv2d { stride: usize, pad: usize },
    Linear,
    Relu,
    BatchNorm { eps: f64, eval: bool, mean: Vec<f64>, var: Vec<f64> },
    MaxPool2x2 { argmax: Vec<usize> },
    Softmax { axis: usize },
    Hadamard,
    Concat { axis: usize },
    Add,
    Reshape,
    GatherRows { indices: Arc<Vec<usize>> },
    SumAxis { axis: usize },
    Scale { c: f64 },
    BroadcastAxis { axis: usize },
    Sigmoid,
    Tanh,
    SliceLast { start: usize, len: usize },
    CrossEntropyLogits { target: usize, probs: Vec<f64> },
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul => "matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::Linear => "linear",
        Op::Relu => "relu",
        Op::BatchNorm { .. } => "batch_norm",
        Op::MaxPool2x2 { .. } => "maxpool2x2_stride2",
        Op::Softmax { .. } => "softmax",
        Op::Hadamard => "hadamard",
        Op::Concat { .. } => "concat",
        Op::Add => "add",
        Op::Reshape => "reshape",
        Op::GatherRows { .. } => "gather_rows",
        Op::SumAxis { .. } => "sum_axis",
        Op::Scale { .. } => "scale",
        Op::BroadcastAxis { .. } => "broadcast_axis",
        Op::Sigmoid => "sigmoid",
        Op::Tanh => "tanh",
        Op::SliceLast { .. } => "slice_last",
        Op::CrossEntropyLogits { .. } => "cross_entropy_logits",
    }
}

struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<usize>,
    needs_grad: bool,
}

/// Sentinel gather index that contributes a zero row and receives no gradient.
pub const GATHER_ZERO: usize = usize::MAX;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Split `shape` at `axis` into (outer, len, inner) strides.
fn axis_decomp(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a leaf. Its `requires_grad` flag decides whether
    /// gradients will be accumulated into it by `backward`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.wants_grad();
        self.push_node(t, Op::Leaf, vec![], needs)
    }

    /// Register a non-differentiable constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(t.requires_grad(false), Op::Leaf, vec![], false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated in a leaf after `backward`, if any.
    pub fn leaf_grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|n| n.value.grad())
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Drop all recorded nodes. Any further use of old variables errors with
    /// a consumed-tape diagnostic.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Batch statistics saved by a batch_norm node (mean, var per channel).
    pub fn bn_saved_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes.get(v.0)?.op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    fn push_node(&mut self, value: Tensor, op: Op, inputs: Vec<usize>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, inputs, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: Vec<Var>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { context: op_name(&op).to_string() });
        }
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let ids = inputs.iter().map(|v| v.0).collect();
        Ok(self.push_node(value, op, ids, needs))
    }

    fn shape_err(op: &'static str, detail: String) -> Error {
        Error::Shape { op, detail }
    }

    /// Public dispatcher over the named primitive kinds.
    pub fn forward_primitive(&mut self, kind: &PrimitiveKind, inputs: &[Var]) -> Result<Var> {
        let want = |n: usize, name: &'static str| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::InvalidArg(format!(
                    "{name} takes {n} inputs, got {}",
                    inputs.len()
                )));
            }
            Ok(())
        };
        match kind {
            PrimitiveKind::MatMul => {
                want(2, "matmul")?;
                self.matmul(inputs[0], inputs[1])
            }
            PrimitiveKind::Conv2d { stride, pad } => {
                want(3, "conv2d")?;
                self.conv2d(inputs[0], inputs[1], inputs[2], *stride, *pad)
            }
            PrimitiveKind::Linear => {
                want(3, "linear")?;
                self.linear(inputs[0], inputs[1], inputs[2])
            }
            PrimitiveKind::Relu => {
                want(1, "relu")?;
                self.relu(inputs[0])
            }
            PrimitiveKind::BatchNorm { eps, mode } => {
                want(3, "batch_norm")?;
                self.batch_norm(inputs[0], inputs[1], inputs[2], *eps, mode)
            }
            PrimitiveKind::MaxPool2x2Stride2 => {
                want(1, "maxpool2x2_stride2")?;
                self.maxpool2x2(inputs[0])
            }
            PrimitiveKind::Softmax { axis } => {
                want(1, "softmax")?;
                self.softmax(inputs[0], *axis)
            }
            PrimitiveKind::Hadamard => {
                want(2, "hadamard")?;
                self.hadamard(inputs[0], inputs[1])
            }
            PrimitiveKind::Concat { axis } => self.concat(inputs, *axis),
            PrimitiveKind::Add => {
                want(2, "add")?;
                self.add(inputs[0], inputs[1])
            }
        }
    }

    // ── forward kernels ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        self.push_op(Tensor::new(vec![m, n], out)?, Op::MatMul, vec![a, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 4 || sb.len() != 1 {
            return Err(Self::shape_err(
                "conv2d",
                format!("x {sx:?}, w {sw:?}, b {sb:?}"),
            ));
        }
        let (h, wd, ci) = (sx[0], sx[1], sx[2]);
        let (kh, kw, wci, co) = (sw[0], sw[1], sw[2], sw[3]);
        if wci != ci || sb[0] != co || stride == 0 {
            return Err(Self::shape_err(
                "conv2d",
                format!("x {sx:?} vs w {sw:?}, b {sb:?}, stride {stride}"),
            ));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Self::shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wd}+{pad}"),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let (dx, dw, dbias) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = vec![0.0; ho * wo * co];
        for oy in 0..ho {
            for ox in 0..wo {
                let orow = &mut out[(oy * wo + ox) * co..(oy * wo + ox + 1) * co];
                orow.copy_from_slice(dbias);
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xrow = &dx[((iy as usize) * wd + ix as usize) * ci..][..ci];
                        let wbase = ((ky * kw + kx) * ci) * co;
                        for (c, &xv) in xrow.iter().enumerate() {
                            let wrow = &dw[wbase + c * co..][..co];
                            for (o, &wv) in orow.iter_mut().zip(wrow) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        self.push_op(
            Tensor::new(vec![ho, wo, co], out)?,
            Op::Conv2d { stride, pad },
            vec![x, w, b],
        )
    }

    /// x (..., in) @ w (in, out) + b (out), applied row-wise.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sw.len() != 2 || sb.len() != 1 || sx.is_empty() {
            return Err(Self::shape_err(
                "linear",
                format!("x {sx:?}, w {sw:?}, b {sb:?}"),
            ));
        }
        let nin = *sx.last().unwrap();
        let (win, wout) = (sw[0], sw[1]);
        if nin != win || sb[0] != wout {
            return Err(Self::shape_err(
                "linear",
                format!("x {sx:?} vs w {sw:?}, b {sb:?}"),
            ));
        }
        let rows = self.value(x).len() / nin;
        let (dx, dw, dbias) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = vec![0.0; rows * wout];
        for r in 0..rows {
            let orow = &mut out[r * wout..(r + 1) * wout];
            orow.copy_from_slice(dbias);
            let xrow = &dx[r * nin..(r + 1) * nin];
            for (i, &xv) in xrow.iter().enumerate() {
                let wrow = &dw[i * wout..(i + 1) * wout];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        let mut oshape = sx.to_vec();
        *oshape.last_mut().unwrap() = wout;
        self.push_op(Tensor::new(oshape, out)?, Op::Linear, vec![x, w, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push_op(out, Op::Relu, vec![x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push_op(out, Op::Sigmoid, vec![x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push_op(out, Op::Tanh, vec![x])
    }

    /// Normalize over every axis but the last (channel) axis.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: &BnMode,
    ) -> Result<Var> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        let c = *sx.last().unwrap();
        if sg != [c] || sb != [c] {
            return Err(Self::shape_err(
                "batch_norm",
                format!("x {sx:?}, gamma {sg:?}, beta {sb:?}"),
            ));
        }
        let n = self.value(x).len() / c;
        let dx = self.value(x).data();
        let (mean, var, eval) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                for r in 0..n {
                    for ch in 0..c {
                        mean[ch] += dx[r * c + ch];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for r in 0..n {
                    for ch in 0..c {
                        let d = dx[r * c + ch] - mean[ch];
                        var[ch] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean, var, false)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Self::shape_err(
                        "batch_norm",
                        format!("running stats length {} vs channels {c}", mean.len()),
                    ));
                }
                (mean.clone(), var.clone(), true)
            }
        };
        let (dg, db) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; n * c];
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        for r in 0..n {
            for ch in 0..c {
                let xhat = (dx[r * c + ch] - mean[ch]) * inv_std[ch];
                out[r * c + ch] = dg[ch] * xhat + db[ch];
            }
        }
        self.push_op(
            Tensor::new(sx.to_vec(), out)?,
            Op::BatchNorm { eps, eval, mean, var },
            vec![x, gamma, beta],
        )
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 {
            return Err(Self::shape_err("maxpool2x2_stride2", format!("{sx:?}")));
        }
        let (h, w, c) = (sx[0], sx[1], sx[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Self::shape_err(
                "maxpool2x2_stride2",
                format!("spatial extents must be even, got {h}x{w}"),
            ));
        }
        let dx = self.value(x).data();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; ho * wo * c];
        let mut argmax = vec![0usize; ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        for dxw in 0..2 {
                            let idx = ((oy * 2 + dy) * w + ox * 2 + dxw) * c + ch;
                            if dx[idx] > best {
                                best = dx[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (oy * wo + ox) * c + ch;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        self.push_op(
            Tensor::new(vec![ho, wo, c], out)?,
            Op::MaxPool2x2 { argmax },
            vec![x],
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x);
        if axis >= sx.len() {
            return Err(Self::shape_err(
                "softmax",
                format!("axis {axis} out of range for {sx:?}"),
            ));
        }
        let (outer, len, inner) = axis_decomp(sx, axis);
        let dx = self.value(x).data();
        let mut out = vec![0.0; dx.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(dx[at(l)]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (dx[at(l)] - mx).exp();
                    out[at(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[at(l)] /= sum;
                }
            }
        }
        self.push_op(Tensor::new(sx.to_vec(), out)?, Op::Softmax { axis }, vec![x])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::shape_err(
                "hadamard",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        self.push_op(
            Tensor::new(self.shape(a).to_vec(), out)?,
            Op::Hadamard,
            vec![a, b],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::shape_err(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        self.push_op(Tensor::new(self.shape(a).to_vec(), out)?, Op::Add, vec![a, b])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidArg("concat of zero tensors".into()));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Self::shape_err(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut axis_total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() {
                return Err(Self::shape_err("concat", format!("{s:?} vs {first:?}")));
            }
            for (i, (&a, &b)) in s.iter().zip(&first).enumerate() {
                if i != axis && a != b {
                    return Err(Self::shape_err("concat", format!("{s:?} vs {first:?}")));
                }
            }
            axis_total += s[axis];
        }
        let mut oshape = first.clone();
        oshape[axis] = axis_total;
        let (outer, _, inner) = axis_decomp(&oshape, axis);
        let row_len = axis_total * inner;
        let mut out = vec![0.0; outer * row_len];
        let mut offset = 0;
        for &v in xs {
            let s = self.shape(v);
            let chunk = s[axis] * inner;
            let data = self.value(v).data();
            for o in 0..outer {
                out[o * row_len + offset..o * row_len + offset + chunk]
                    .copy_from_slice(&data[o * chunk..(o + 1) * chunk]);
            }
            offset += chunk;
        }
        self.push_op(
            Tensor::new(oshape, out)?,
            Op::Concat { axis },
            xs.to_vec(),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        self.push_op(t, Op::Reshape, vec![x])
    }

    /// Gather rows of a rank-2 tensor. `GATHER_ZERO` gathers an all-zero row.
    pub fn gather_rows(&mut self, x: Var, indices: Arc<Vec<usize>>) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(Self::shape_err("gather_rows", format!("{sx:?}")));
        }
        let (n, c) = (sx[0], sx[1]);
        let dx = self.value(x).data();
        let mut out = vec![0.0; indices.len() * c];
        for (r, &idx) in indices.iter().enumerate() {
            if idx == GATHER_ZERO {
                continue;
            }
            if idx >= n {
                return Err(Error::InvalidArg(format!(
                    "gather_rows index {idx} out of range for {n} rows"
                )));
            }
            out[r * c..(r + 1) * c].copy_from_slice(&dx[idx * c..(idx + 1) * c]);
        }
        let m = indices.len();
        self.push_op(
            Tensor::new(vec![m, c], out)?,
            Op::GatherRows { indices },
            vec![x],
        )
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Self::shape_err(
                "sum_axis",
                format!("axis {axis} out of range for {sx:?}"),
            ));
        }
        let (outer, len, inner) = axis_decomp(&sx, axis);
        let dx = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &dx[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut oshape: Vec<usize> = sx.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        self.push_op(Tensor::new(oshape, out)?, Op::SumAxis { axis }, vec![x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push_op(out, Op::Scale { c }, vec![x])
    }

    /// Repeat a unit axis. Input extent at `axis` must be 1.
    pub fn broadcast_axis(&mut self, x: Var, axis: usize, times: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || sx[axis] != 1 || times == 0 {
            return Err(Self::shape_err(
                "broadcast_axis",
                format!("axis {axis} (x{times}) on {sx:?}"),
            ));
        }
        let (outer, _, inner) = axis_decomp(&sx, axis);
        let dx = self.value(x).data();
        let mut out = vec![0.0; outer * times * inner];
        for o in 0..outer {
            let src = &dx[o * inner..(o + 1) * inner];
            for t in 0..times {
                out[(o * times + t) * inner..(o * times + t + 1) * inner].copy_from_slice(src);
            }
        }
        let mut oshape = sx;
        oshape[axis] = times;
        self.push_op(
            Tensor::new(oshape, out)?,
            Op::BroadcastAxis { axis },
            vec![x],
        )
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let last = *sx.last().unwrap();
        if start + len > last || len == 0 {
            return Err(Self::shape_err(
                "slice_last",
                format!("[{start}..{}] of last extent {last}", start + len),
            ));
        }
        let rows = self.value(x).len() / last;
        let dx = self.value(x).data();
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len].copy_from_slice(&dx[r * last + start..r * last + start + len]);
        }
        let mut oshape = sx;
        *oshape.last_mut().unwrap() = len;
        self.push_op(
            Tensor::new(oshape, out)?,
            Op::SliceLast { start, len },
            vec![x],
        )
    }

    /// Softmax cross-entropy against a one-hot target, fused for stability.
    /// Gradient is `softmax(z) - onehot(target)`.
    pub fn cross_entropy_logits(&mut self, z: Var, target: usize) -> Result<Var> {
        let sz = self.shape(z);
        if sz.len() != 1 {
            return Err(Self::shape_err("cross_entropy_logits", format!("{sz:?}")));
        }
        let k = sz[0];
        if target >= k {
            return Err(Error::InvalidArg(format!(
                "target {target} out of range for {k} classes"
            )));
        }
        let dz = self.value(z).data();
        let mx = dz.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let mut probs = vec![0.0; k];
        for (p, &v) in probs.iter_mut().zip(dz) {
            *p = (v - mx).exp();
            sum += *p;
        }
        probs.iter_mut().for_each(|p| *p /= sum);
        let loss = mx + sum.ln() - dz[target];
        self.push_op(
            Tensor::scalar(loss),
            Op::CrossEntropyLogits { target, probs },
            vec![z],
        )
    }

    // ── reverse pass ─────────────────────────────────────────────────

    /// Accumulate `dLoss/dLeaf` into every requires-grad leaf reachable from
    /// `loss`. May be called repeatedly; leaf gradients accumulate until
    /// explicitly zeroed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self.nodes.get(loss.0).ok_or(Error::TapeConsumed)?;
        if node.value.len() != 1 {
            return Err(Error::LossNotScalar { shape: node.value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&self.nodes, id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) && self.nodes[id].value.wants_grad() {
                self.nodes[id].value.accumulate_grad(&g);
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

/// Push the output gradient `g` of node `id` onto its inputs.
fn backprop_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let input = |k: usize| &nodes[node.inputs[k]];
    let wants = |k: usize| nodes[node.inputs[k]].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul => {
            let (sa, sb) = (input(0).value.shape(), input(1).value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if wants(0) {
                let db = input(1).value.data();
                accumulate(&mut grads[node.inputs[0]], m * k, |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &db[p * n..(p + 1) * n];
                            for (gv, bv) in grow.iter().zip(brow) {
                                acc += gv * bv;
                            }
                            ga[i * k + p] += acc;
                        }
                    }
                });
            }
            if wants(1) {
                let da = input(0).value.data();
                accumulate(&mut grads[node.inputs[1]], k * n, |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = da[i * k + p];
                            let gbrow = &mut gb[p * n..(p + 1) * n];
                            for (gbv, &gv) in gbrow.iter_mut().zip(grow) {
                                *gbv += aip * gv;
                            }
                        }
                    }
                });
            }
        }
        Op::Conv2d { stride, pad } => {
            let sx = input(0).value.shape();
            let sw = input(1).value.shape();
            let (h, wd, ci) = (sx[0], sx[1], sx[2]);
            let (kh, kw, _, co) = (sw[0], sw[1], sw[2], sw[3]);
            let ho = (h + 2 * pad - kh) / stride + 1;
            let wo = (wd + 2 * pad - kw) / stride + 1;
            let dx = input(0).value.data();
            let dw = input(1).value.data();
            let do_x = wants(0);
            let do_w = wants(1);
            let do_b = wants(2);
            let mut gx = if do_x { vec![0.0; dx.len()] } else { Vec::new() };
            let mut gw = if do_w { vec![0.0; dw.len()] } else { Vec::new() };
            let mut gb = if do_b { vec![0.0; co] } else { Vec::new() };
            for oy in 0..ho {
                for ox in 0..wo {
                    let grow = &g[(oy * wo + ox) * co..(oy * wo + ox + 1) * co];
                    if do_b {
                        for (b, &gv) in gb.iter_mut().zip(grow) {
                            *b += gv;
                        }
                    }
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - *pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - *pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xoff = ((iy as usize) * wd + ix as usize) * ci;
                            let wbase = ((ky * kw + kx) * ci) * co;
                            for c in 0..ci {
                                if do_x {
                                    let wrow = &dw[wbase + c * co..][..co];
                                    let mut acc = 0.0;
                                    for (&wv, &gv) in wrow.iter().zip(grow) {
                                        acc += wv * gv;
                                    }
                                    gx[xoff + c] += acc;
                                }
                                if do_w {
                                    let xv = dx[xoff + c];
                                    let gwrow = &mut gw[wbase + c * co..][..co];
                                    for (gwv, &gv) in gwrow.iter_mut().zip(grow) {
                                        *gwv += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if do_x {
                accumulate(&mut grads[node.inputs[0]], dx.len(), |dst| {
                    for (d, s) in dst.iter_mut().zip(&gx) {
                        *d += s;
                    }
                });
            }
            if do_w {
                accumulate(&mut grads[node.inputs[1]], dw.len(), |dst| {
                    for (d, s) in dst.iter_mut().zip(&gw) {
                        *d += s;
                    }
                });
            }
            if do_b {
                accumulate(&mut grads[node.inputs[2]], co, |dst| {
                    for (d, s) in dst.iter_mut().zip(&gb) {
                        *d += s;
                    }
                });
            }
        }
        Op::Linear => {
            let sx = input(0).value.shape();
            let sw = input(1).value.shape();
            let nin = *sx.last().unwrap();
            let nout = sw[1];
            let rows = input(0).value.len() / nin;
            let dx = input(0).value.data();
            let dw = input(1).value.data();
            if wants(0) {
                accumulate(&mut grads[node.inputs[0]], dx.len(), |gx| {
                    for r in 0..rows {
                        let grow = &g[r * nout..(r + 1) * nout];
                        let gxrow = &mut gx[r * nin..(r + 1) * nin];
                        for (i, gxv) in gxrow.iter_mut().enumerate() {
                            let wrow = &dw[i * nout..(i + 1) * nout];
                            let mut acc = 0.0;
                            for (&wv, &gv) in wrow.iter().zip(grow) {
                                acc += wv * gv;
                            }
                            *gxv += acc;
                        }
                    }
                });
            }
            if wants(1) {
                accumulate(&mut grads[node.inputs[1]], dw.len(), |gw| {
                    for r in 0..rows {
                        let grow = &g[r * nout..(r + 1) * nout];
                        let xrow = &dx[r * nin..(r + 1) * nin];
                        for (i, &xv) in xrow.iter().enumerate() {
                            let gwrow = &mut gw[i * nout..(i + 1) * nout];
                            for (gwv, &gv) in gwrow.iter_mut().zip(grow) {
                                *gwv += xv * gv;
                            }
                        }
                    }
                });
            }
            if wants(2) {
                accumulate(&mut grads[node.inputs[2]], nout, |gb| {
                    for r in 0..rows {
                        let grow = &g[r * nout..(r + 1) * nout];
                        for (b, &gv) in gb.iter_mut().zip(grow) {
                            *b += gv;
                        }
                    }
                });
            }
        }
        Op::Relu => {
            if wants(0) {
                let dx = input(0).value.data();
                accumulate(&mut grads[node.inputs[0]], dx.len(), |gx| {
                    for i in 0..dx.len() {
                        if dx[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
        }
        Op::Sigmoid => {
            if wants(0) {
                let y = node.value.data();
                accumulate(&mut grads[node.inputs[0]], y.len(), |gx| {
                    for i in 0..y.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
        }
        Op::Tanh => {
            if wants(0) {
                let y = node.value.data();
                accumulate(&mut grads[node.inputs[0]], y.len(), |gx| {
                    for i in 0..y.len() {
                        gx[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
        }
        Op::BatchNorm { eps, eval, mean, var } => {
            let c = mean.len();
            let dx = input(0).value.data();
            let n = dx.len() / c;
            let dgamma = input(1).value.data();
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let xhat = |r: usize, ch: usize| (dx[r * c + ch] - mean[ch]) * inv_std[ch];
            if wants(1) {
                accumulate(&mut grads[node.inputs[1]], c, |gg| {
                    for r in 0..n {
                        for ch in 0..c {
                            gg[ch] += g[r * c + ch] * xhat(r, ch);
                        }
                    }
                });
            }
            if wants(2) {
                accumulate(&mut grads[node.inputs[2]], c, |gb| {
                    for r in 0..n {
                        for ch in 0..c {
                            gb[ch] += g[r * c + ch];
                        }
                    }
                });
            }
            if wants(0) {
                if *eval {
                    accumulate(&mut grads[node.inputs[0]], dx.len(), |gx| {
                        for r in 0..n {
                            for ch in 0..c {
                                gx[r * c + ch] += g[r * c + ch] * dgamma[ch] * inv_std[ch];
                            }
                        }
                    });
                } else {
                    // Full gradient through the batch statistics.
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gx = vec![0.0; c];
                    for r in 0..n {
                        for ch in 0..c {
                            let gh = g[r * c + ch] * dgamma[ch];
                            sum_g[ch] += gh;
                            sum_gx[ch] += gh * xhat(r, ch);
                        }
                    }
                    let nf = n as f64;
                    accumulate(&mut grads[node.inputs[0]], dx.len(), |gx| {
                        for r in 0..n {
                            for ch in 0..c {
                                let gh = g[r * c + ch] * dgamma[ch];
                                gx[r * c + ch] += inv_std[ch]
                                    * (gh - sum_g[ch] / nf - xhat(r, ch) * sum_gx[ch] / nf);
                            }
                        }
                    });
                }
            }
        }
        Op::MaxPool2x2 { argmax } => {
            if wants(0) {
                let len = input(0).value.len();
                accumulate(&mut grads[node.inputs[0]], len, |gx| {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                });
            }
        }
        Op::Softmax { axis } => {
            if wants(0) {
                let y = node.value.data();
                let (outer, len, inner) = axis_decomp(node.value.shape(), *axis);
                accumulate(&mut grads[node.inputs[0]], y.len(), |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let mut dot = 0.0;
                            for l in 0..len {
                                dot += g[at(l)] * y[at(l)];
                            }
                            for l in 0..len {
                                gx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                });
            }
        }
        Op::Hadamard => {
            if wants(0) {
                let db = input(1).value.data();
                accumulate(&mut grads[node.inputs[0]], db.len(), |ga| {
                    for i in 0..db.len() {
                        ga[i] += g[i] * db[i];
                    }
                });
            }
            if wants(1) {
                let da = input(0).value.data();
                accumulate(&mut grads[node.inputs[1]], da.len(), |gb| {
                    for i in 0..da.len() {
                        gb[i] += g[i] * da[i];
                    }
                });
            }
        }
        Op::Add => {
            for k in 0..2 {
                if wants(k) {
                    accumulate(&mut grads[node.inputs[k]], g.len(), |gi| {
                        for (d, &s) in gi.iter_mut().zip(g) {
                            *d += s;
                        }
                    });
                }
            }
        }
        Op::Concat { axis } => {
            let oshape = node.value.shape();
            let (outer, _, inner) = axis_decomp(oshape, *axis);
            let row_len = oshape[*axis] * inner;
            let mut offset = 0;
            for k in 0..node.inputs.len() {
                let s = input(k).value.shape();
                let chunk = s[*axis] * inner;
                if wants(k) {
                    let len = input(k).value.len();
                    accumulate(&mut grads[node.inputs[k]], len, |gi| {
                        for o in 0..outer {
                            let src = &g[o * row_len + offset..o * row_len + offset + chunk];
                            let dst = &mut gi[o * chunk..(o + 1) * chunk];
                            for (d, &sv) in dst.iter_mut().zip(src) {
                                *d += sv;
                            }
                        }
                    });
                }
                offset += chunk;
            }
        }
        Op::Reshape => {
            if wants(0) {
                accumulate(&mut grads[node.inputs[0]], g.len(), |gi| {
                    for (d, &s) in gi.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
        }
        Op::GatherRows { indices } => {
            if wants(0) {
                let len = input(0).value.len();
                let c = input(0).value.shape()[1];
                accumulate(&mut grads[node.inputs[0]], len, |gx| {
                    for (r, &idx) in indices.iter().enumerate() {
                        if idx == GATHER_ZERO {
                            continue;
                        }
                        let src = &g[r * c..(r + 1) * c];
                        let dst = &mut gx[idx * c..(idx + 1) * c];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
        }
        Op::SumAxis { axis } => {
            if wants(0) {
                let sx = input(0).value.shape();
                let (outer, len, inner) = axis_decomp(sx, *axis);
                accumulate(&mut grads[node.inputs[0]], input(0).value.len(), |gx| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                });
            }
        }
        Op::Scale { c } => {
            if wants(0) {
                accumulate(&mut grads[node.inputs[0]], g.len(), |gx| {
                    for (d, &s) in gx.iter_mut().zip(g) {
                        *d += c * s;
                    }
                });
            }
        }
        Op::BroadcastAxis { axis } => {
            if wants(0) {
                let oshape = node.value.shape();
                let (outer, times, inner) = axis_decomp(oshape, *axis);
                accumulate(&mut grads[node.inputs[0]], outer * inner, |gx| {
                    for o in 0..outer {
                        for t in 0..times {
                            let src = &g[(o * times + t) * inner..(o * times + t + 1) * inner];
                            let dst = &mut gx[o * inner..(o + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                });
            }
        }
        Op::SliceLast { start, len } => {
            if wants(0) {
                let last = *input(0).value.shape().last().unwrap();
                let rows = input(0).value.len() / last;
                accumulate(&mut grads[node.inputs[0]], rows * last, |gx| {
                    for r in 0..rows {
                        let src = &g[r * len..(r + 1) * len];
                        let dst = &mut gx[r * last + start..r * last + start + len];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
        }
        Op::CrossEntropyLogits { target, probs } => {
            if wants(0) {
                let gs = g[0];
                accumulate(&mut grads[node.inputs[0]], probs.len(), |gx| {
                    for (i, &p) in probs.iter().enumerate() {
                        let t = if i == *target { 1.0 } else { 0.0 };
                        gx[i] += gs * (p - t);
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: &[usize], data: Vec<f64>, grad: bool) -> Var {
        tape.leaf(Tensor::new(shape.to_vec(), data).unwrap().requires_grad(grad))
    }

    #[test]
    fn relu_at_sign_boundaries() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], vec![-1.0, 2.0, 0.0], false);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn softmax_of_constants_is_uniform() {
        for c in [-3.0, 0.0, 7.5] {
            let mut tape = Tape::new();
            let x = leaf(&mut tape, &[4], vec![c; 4], false);
            let y = tape.softmax(x, 0).unwrap();
            for &v in tape.value(y).data() {
                assert!((v - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0], false);
        let b = leaf(&mut tape, &[2, 2], vec![5.0, 6.0, 7.0, 8.0], false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn maxpool_takes_window_max() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0], false);
        let y = tape.maxpool2x2(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn maxpool_rejects_odd_extents() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3, 2, 1], vec![0.0; 6], false);
        let err = tape.maxpool2x2(x).unwrap_err();
        assert!(err.to_string().contains("maxpool2x2_stride2"));
    }

    #[test]
    fn shape_mismatch_names_kind_and_extents() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 3], vec![0.0; 6], false);
        let b = leaf(&mut tape, &[2, 3], vec![0.0; 6], false);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn backward_relu_subgradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![2.0, -3.0], true);
        let y = tape.relu(x).unwrap();
        let loss = tape.sum_axis(y, 0).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.leaf_grad(x).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![1.0, 2.0], true);
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::LossNotScalar { .. }));
    }

    #[test]
    fn backward_on_cleared_tape_rejected() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1], vec![1.0], true);
        tape.clear();
        assert!(matches!(tape.backward(x), Err(Error::TapeConsumed)));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![1.0, 2.0], true);
        let s = tape.sum_axis(x, 0).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.leaf_grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn cross_entropy_matches_manual() {
        let mut tape = Tape::new();
        let z = leaf(&mut tape, &[3], vec![1.0, 2.0, 3.0], true);
        let loss = tape.cross_entropy_logits(z, 1).unwrap();
        let expected = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 2.0;
        assert!((tape.value(loss).as_scalar().unwrap() - expected).abs() < 1e-12);
        tape.backward(loss).unwrap();
        let g = tape.leaf_grad(z).unwrap();
        let sum: f64 = g.iter().sum();
        assert!(sum.abs() < 1e-12, "CE gradient sums to zero, got {sum}");
    }

    #[test]
    fn bn_eval_is_affine() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[4, 2], vec![0.5, -1.0, 2.0, 3.0, -0.5, 0.0, 1.5, 2.5], false);
        let gamma = leaf(&mut tape, &[2], vec![2.0, 0.5], false);
        let beta = leaf(&mut tape, &[2], vec![1.0, -1.0], false);
        let mode = BnMode::Eval { mean: vec![0.5, 1.0], var: vec![4.0, 1.0] };
        let y = tape.batch_norm(x, gamma, beta, 1e-5, &mode).unwrap();
        // Affine per channel: a*x + b with a = gamma/sqrt(var+eps).
        let a0 = 2.0 / (4.0 + 1e-5f64).sqrt();
        let b0 = 1.0 - a0 * 0.5;
        for r in 0..4 {
            let xv = tape.value(x).at(&[r, 0]);
            let yv = tape.value(y).at(&[r, 0]);
            assert!((yv - (a0 * xv + b0)).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_rows_with_zero_sentinel() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0], true);
        let idx = Arc::new(vec![1usize, GATHER_ZERO, 0]);
        let y = tape.gather_rows(x, idx).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0, 0.0, 0.0, 1.0, 2.0]);
        let flat = tape.reshape(y, &[6]).unwrap();
        let s = tape.sum_axis(flat, 0).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.leaf_grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0], false);
        let b = leaf(&mut tape, &[2, 1], vec![9.0, 8.0], false);
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let back = tape.slice_last(c, 0, 2).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(a).data());
    }

    #[test]
    fn broadcast_axis_repeats_rows() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[1, 3], vec![1.0, 2.0, 3.0], false);
        let b = tape.broadcast_axis(a, 0, 2).unwrap();
        assert_eq!(tape.value(b).shape(), &[2, 3]);
        assert_eq!(tape.value(b).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn forward_primitive_dispatch_matches_methods() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0], false);
        let b = leaf(&mut tape, &[2, 2], vec![5.0, 6.0, 7.0, 8.0], false);
        let via_kind = tape.forward_primitive(&PrimitiveKind::MatMul, &[a, b]).unwrap();
        let direct = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(via_kind).data(), tape.value(direct).data());
    }
}
