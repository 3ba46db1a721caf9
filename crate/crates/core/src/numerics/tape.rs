//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node holding its output value and enough provenance to
//! run the chain rule. Nodes are appended in evaluation order, so walking the
//! tape backwards from the loss visits every node after all of its consumers.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{contract, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    LogFloor(Var, f64),
    GlobalAvgPool(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    L2Normalize(Var, f64),
    Concat(Vec<Var>),
    Restyle {
        input: Var,
        target_std: Vec<f64>,
        eps: f64,
    },
    JsDivergence([Var; 3], f64),
    GradReverse(Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddBias(..) => "add_bias",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::LogFloor(..) => "log",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::L2Normalize(..) => "l2_normalize",
            Op::Concat(..) => "concat",
            Op::Restyle { .. } => "restyle",
            Op::JsDivergence(..) => "js_divergence",
            Op::GradReverse(..) => "grad_reverse",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// A single-threaded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err<T>(op: &str, a: &[usize], b: &[usize]) -> Result<T> {
    contract(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest `|x|` over every input reaching a ReLU on this tape, or
    /// infinity if there is none. A finite-difference step larger than this
    /// may cross the kink.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(&self.nodes[a.0].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    /// Adds an input tensor. Leaves with `requires_grad` collect gradients
    /// on [`backward`](Self::backward).
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Clears every accumulated leaf gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: op.name().to_string(),
            });
        }
        let requires_grad = self.op_requires_grad(&op);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::MatMul(a, b) => rg(a) || rg(b),
            Op::Conv2d {
                input,
                weight,
                bias,
            } => rg(input) || rg(weight) || rg(bias),
            Op::Concat(vs) => vs.iter().any(rg),
            Op::JsDivergence(vs, _) => vs.iter().any(rg),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::LogFloor(a, _)
            | Op::GlobalAvgPool(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::L2Normalize(a, _)
            | Op::GradReverse(a, _) => rg(a),
            Op::Restyle { input, .. } => rg(input),
        }
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let data = x.data().iter().map(|&v| f(v)).collect();
        let shape = x.shape().to_vec();
        self.push(shape, data, op)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if x.shape() != y.shape() {
            return shape_err(op.name(), x.shape(), y.shape());
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&u, &v)| f(u, v))
            .collect();
        let shape = x.shape().to_vec();
        self.push(shape, data, op)
    }

    fn rows_cols(&self, a: Var, op: &str) -> Result<(usize, usize)> {
        match *self.shape(a) {
            [r, c] => Ok((r, c)),
            ref s => contract(format!("{op}: expected a 2-D tensor, got {s:?}")),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |u, v| u + v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |u, v| u - v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |u, v| u * v)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, Op::AddScalar(a), |v| v + s)
    }

    /// Adds a `[n]` vector to every length-`n` row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let n = b.len();
        if b.shape().len() != 1 || *x.shape().last().unwrap() != n {
            return shape_err("add_bias", x.shape(), b.shape());
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            add_into(row, b.data());
        }
        let shape = x.shape().to_vec();
        self.push(shape, data, Op::AddBias(a, bias))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rows_cols(a, "matmul")?;
        let (k2, n) = self.rows_cols(b, "matmul")?;
        if k != k2 {
            return shape_err("matmul", self.shape(a), self.shape(b));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.push(vec![m, n], out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a, "transpose")?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        self.push(vec![c, r], out, Op::Transpose(a))
    }

    /// 3×3 convolution, stride 1, zero padding 1.
    /// `input: [B, Cin, H, W]`, `weight: [Cout, Cin, 3, 3]`, `bias: [Cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let geom = self.conv_geom(input, weight, bias)?;
        let out = kernels::conv3x3_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &geom,
        );
        self.push(
            vec![geom.batch, geom.c_out, geom.h, geom.w],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
            },
        )
    }

    fn conv_geom(&self, input: Var, weight: Var, bias: Var) -> Result<ConvGeom> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        match (xs, ws, bs) {
            (&[batch, c_in, h, w], &[c_out, wc_in, 3, 3], &[bc])
                if wc_in == c_in && bc == c_out && w >= 2 =>
            {
                Ok(ConvGeom {
                    batch,
                    c_in,
                    c_out,
                    h,
                    w,
                })
            }
            _ => contract(format!(
                "conv2d: input {xs:?}, weight {ws:?}, bias {bs:?} do not conform"
            )),
        }
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    /// `ln(max(a, floor))`; the gradient is zero where the floor is active.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.map(a, Op::LogFloor(a, floor), |v| v.max(floor).ln())
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let &[b, c, h, w] = self.shape(a) else {
            return contract(format!(
                "global_avg_pool: expected [B,C,H,W], got {:?}",
                self.shape(a)
            ));
        };
        let hw = h * w;
        let out = self
            .value(a)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(vec![b, c], out, Op::GlobalAvgPool(a))
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a, "softmax")?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(vec![r, c], out, Op::Softmax(a))
    }

    /// Row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a, "log_softmax")?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(vec![r, c], out, Op::LogSoftmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(vec![1], vec![s], Op::Mean(a))
    }

    /// Scales every row of a 2-D tensor to unit Euclidean norm (norms are
    /// floored at `1e-12`).
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        const FLOOR: f64 = 1e-12;
        let (r, c) = self.rows_cols(a, "l2_normalize")?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(FLOOR);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        self.push(vec![r, c], out, Op::L2Normalize(a, FLOOR))
    }

    /// Concatenates along the leading (batch) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return contract("concat of zero tensors");
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return shape_err("concat", self.shape(first), s);
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push(shape, data, Op::Concat(parts.to_vec()))
    }

    /// Per-sample, per-channel re-styling of a `[B, C, H, W]` map:
    /// `target_std · (x − μ(x)) / σ(x) + target_mean`, where μ and σ are the
    /// spatial statistics of `x` (σ floored at `eps`) and the targets are
    /// constants of length `B·C`.
    pub fn restyle(
        &mut self,
        input: Var,
        target_mean: Vec<f64>,
        target_std: Vec<f64>,
        eps: f64,
    ) -> Result<Var> {
        let &[b, c, h, w] = self.shape(input) else {
            return contract(format!(
                "restyle: expected [B,C,H,W], got {:?}",
                self.shape(input)
            ));
        };
        if target_mean.len() != b * c || target_std.len() != b * c {
            return contract(format!(
                "restyle: need {} target statistics, got {} means and {} stds",
                b * c,
                target_mean.len(),
                target_std.len()
            ));
        }
        let hw = h * w;
        let mut out = self.value(input).data().to_vec();
        for (i, plane) in out.chunks_mut(hw).enumerate() {
            let (mu, sd) = kernels::moments(plane);
            let sd = sd.max(eps);
            let (tm, ts) = (target_mean[i], target_std[i]);
            for v in plane.iter_mut() {
                *v = ts * (*v - mu) / sd + tm;
            }
        }
        self.push(
            vec![b, c, h, w],
            out,
            Op::Restyle {
                input,
                target_std,
                eps,
            },
        )
    }

    /// Jensen–Shannon-style divergence of three row-stochastic `[R, N]`
    /// matrices against their mean, averaged over rows:
    /// `(1/R) Σ_r (1/3) Σ_k KL(p_k ‖ m)` with `m = (p_1 + p_2 + p_3) / 3`.
    /// Logarithms take `max(·, floor)`. Three-way sums are sorted before
    /// adding, so the value is bitwise symmetric in its arguments.
    pub fn js_divergence(&mut self, p: [Var; 3], floor: f64) -> Result<Var> {
        let (r, n) = self.rows_cols(p[0], "js_divergence")?;
        for &q in &p[1..] {
            if self.shape(q) != [r, n] {
                return shape_err("js_divergence", &[r, n], self.shape(q));
            }
        }
        let vals = [
            self.value(p[0]).data(),
            self.value(p[1]).data(),
            self.value(p[2]).data(),
        ];
        let mut total = 0.0;
        for row in 0..r {
            let mut kl = [0.0f64; 3];
            for j in 0..n {
                let idx = row * n + j;
                let ps = [vals[0][idx], vals[1][idx], vals[2][idx]];
                // Equal arguments must give exactly zero, which the rounded
                // mean does not guarantee.
                let m = if ps[0] == ps[1] && ps[1] == ps[2] {
                    ps[0]
                } else {
                    sum3(ps) / 3.0
                };
                let ln_m = m.max(floor).ln();
                for k in 0..3 {
                    kl[k] += ps[k] * (ps[k].max(floor).ln() - ln_m);
                }
            }
            total += sum3(kl);
        }
        let value = total / (3.0 * r as f64);
        self.push(vec![1], vec![value], Op::JsDivergence(p, floor))
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `factor` in the backward pass.
    pub fn grad_reverse(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.map(a, Op::GradReverse(a, factor), |v| v)
    }

    /// Back-propagates from a scalar node and accumulates into the gradients
    /// of every `requires_grad` leaf. Intermediate gradients are scratch and
    /// discarded, so repeated calls add the same leaf gradient again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            ));
        }
        if !self.nodes[loss.0].requires_grad && !matches!(self.nodes[loss.0].op, Op::Leaf) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    op: format!("{} (backward)", self.nodes[i].op.name()),
                });
            }
            if let Op::Leaf = self.nodes[i].op {
                if self.nodes[i].requires_grad {
                    let node = &mut self.nodes[i];
                    match &mut node.grad {
                        Some(acc) => add_into(acc.data_mut(), &g),
                        None => {
                            node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                        }
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        // Accumulates into the gradient slot of `v`, creating it on first use.
        fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; n])
        }
        let len = |v: Var| self.nodes[v.0].value.len();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if wants(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if wants(*b) {
                    for (d, s) in slot(grads, *b, g.len()).iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).to_vec(), val(*b));
                if wants(*a) {
                    for ((d, s), y) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                }
                if wants(*b) {
                    for ((d, s), x) in slot(grads, *b, g.len()).iter_mut().zip(g).zip(&av) {
                        *d += s * x;
                    }
                }
            }
            Op::Scale(a, s) | Op::GradReverse(a, s) => {
                if wants(*a) {
                    for (d, v) in slot(grads, *a, g.len()).iter_mut().zip(g) {
                        *d += s * v;
                    }
                }
            }
            Op::AddScalar(a) => {
                if wants(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
            }
            Op::AddBias(a, b) => {
                if wants(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if wants(*b) {
                    let n = len(*b);
                    let gb = slot(grads, *b, n);
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (
                    self.nodes[a.0].value.shape()[0],
                    self.nodes[a.0].value.shape()[1],
                );
                let n = self.nodes[b.0].value.shape()[1];
                if wants(*a) {
                    // dA = G · Bᵀ
                    let ga = slot(grads, *a, m * k);
                    kernels::matmul_nt_acc(g, val(*b), ga, m, n, k);
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    let gb = slot(grads, *b, k * n);
                    kernels::matmul_tn_acc(val(*a), g, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let s = node.value.shape();
                    let (r, c) = (s[0], s[1]);
                    let ga = slot(grads, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
            } => {
                let geom = self
                    .conv_geom(*input, *weight, *bias)
                    .expect("conv geometry validated in forward");
                let mut gi = wants(*input).then(|| vec![0.0; len(*input)]);
                let mut gw = wants(*weight).then(|| vec![0.0; len(*weight)]);
                let mut gb = wants(*bias).then(|| vec![0.0; len(*bias)]);
                kernels::conv3x3_backward(
                    val(*input),
                    val(*weight),
                    g,
                    &geom,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                for (v, part) in [(*input, gi), (*weight, gw), (*bias, gb)] {
                    if let Some(part) = part {
                        add_into(slot(grads, v, part.len()), &part);
                    }
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    for ((d, s), y) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(out) {
                        if *y > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    for ((d, s), y) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(out) {
                        *d += s * y * (1.0 - y);
                    }
                }
            }
            Op::LogFloor(a, floor) => {
                if wants(*a) {
                    let x = val(*a).to_vec();
                    for ((d, s), x) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(&x) {
                        if *x > *floor {
                            *d += s / x;
                        }
                    }
                }
            }
            Op::GlobalAvgPool(a) => {
                if wants(*a) {
                    let n = len(*a);
                    let hw = n / g.len();
                    let ga = slot(grads, *a, n);
                    for (plane, s) in ga.chunks_mut(hw).zip(g) {
                        let s = s / hw as f64;
                        for d in plane {
                            *d += s;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let c = node.value.shape()[1];
                    let ga = slot(grads, *a, g.len());
                    for ((gr, yr), dr) in g.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dotp: f64 = gr.iter().zip(yr).map(|(u, v)| u * v).sum();
                        for ((d, s), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (s - dotp);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if wants(*a) {
                    let c = node.value.shape()[1];
                    let ga = slot(grads, *a, g.len());
                    for ((gr, yr), dr) in g.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c)) {
                        let gs: f64 = gr.iter().sum();
                        for ((d, s), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += s - y.exp() * gs;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    for d in slot(grads, *a, len(*a)).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let n = len(*a);
                    let s = g[0] / n as f64;
                    for d in slot(grads, *a, n).iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::L2Normalize(a, floor) => {
                if wants(*a) {
                    let c = node.value.shape()[1];
                    let x = val(*a).to_vec();
                    let ga = slot(grads, *a, g.len());
                    for (((gr, yr), xr), dr) in g
                        .chunks(c)
                        .zip(out.chunks(c))
                        .zip(x.chunks(c))
                        .zip(ga.chunks_mut(c))
                    {
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm > *floor {
                            let dotp: f64 = gr.iter().zip(yr).map(|(u, v)| u * v).sum();
                            for ((d, s), y) in dr.iter_mut().zip(gr).zip(yr) {
                                *d += (s - y * dotp) / norm;
                            }
                        } else {
                            for (d, s) in dr.iter_mut().zip(gr) {
                                *d += s / floor;
                            }
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = len(p);
                    if wants(p) {
                        add_into(slot(grads, p, n), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Restyle {
                input,
                target_std,
                eps,
            } => {
                if wants(*input) {
                    let s = node.value.shape();
                    let hw = s[2] * s[3];
                    let x = val(*input).to_vec();
                    let gx = slot(grads, *input, x.len());
                    for (i, ((xp, gp), dp)) in x
                        .chunks(hw)
                        .zip(g.chunks(hw))
                        .zip(gx.chunks_mut(hw))
                        .enumerate()
                    {
                        restyle_backward(xp, gp, target_std[i], *eps, dp);
                    }
                }
            }
            Op::JsDivergence(p, floor) => {
                let r = self.nodes[p[0].0].value.shape()[0];
                let coef = g[0] / (3.0 * r as f64);
                let vals = [val(p[0]), val(p[1]), val(p[2])];
                let n = vals[0].len();
                let mut parts: [Option<Vec<f64>>; 3] = [None, None, None];
                for k in 0..3 {
                    if !wants(p[k]) {
                        continue;
                    }
                    let mut gk = vec![0.0; n];
                    for idx in 0..n {
                        let ps = [vals[0][idx], vals[1][idx], vals[2][idx]];
                        let m = sum3(ps) / 3.0;
                        let pk = ps[k];
                        let mut d = pk.max(*floor).ln() - m.max(*floor).ln();
                        if pk > *floor {
                            d += 1.0;
                        }
                        if m > *floor {
                            d -= 1.0;
                        }
                        gk[idx] = coef * d;
                    }
                    parts[k] = Some(gk);
                }
                for (k, part) in parts.into_iter().enumerate() {
                    if let Some(part) = part {
                        add_into(slot(grads, p[k], n), &part);
                    }
                }
            }
        }
    }
}

/// Gradient of one re-styled plane with respect to its input plane.
fn restyle_backward(x: &[f64], g: &[f64], target_std: f64, eps: f64, dx: &mut [f64]) {
    let n = x.len() as f64;
    let (mu, raw_sd) = kernels::moments(x);
    let gs: Vec<f64> = g.iter().map(|v| v * target_std).collect();
    let g_mean = gs.iter().sum::<f64>() / n;
    if raw_sd > eps {
        let gn_mean = gs
            .iter()
            .zip(x)
            .map(|(gv, xv)| gv * (xv - mu) / raw_sd)
            .sum::<f64>()
            / n;
        for ((d, gv), xv) in dx.iter_mut().zip(&gs).zip(x) {
            let xn = (xv - mu) / raw_sd;
            *d += (gv - g_mean - xn * gn_mean) / raw_sd;
        }
    } else {
        for (d, gv) in dx.iter_mut().zip(&gs) {
            *d += (gv - g_mean) / eps;
        }
    }
}

/// Order-independent sum of three values.
fn sum3(mut v: [f64; 3]) -> f64 {
    v.sort_by(f64::total_cmp);
    (v[0] + v[1]) + v[2]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn global_avg_pool_of_small_map() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 1]);
        assert_eq!(tape.value(y).data(), &[2.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let id = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a_data = [0.5, -1.0, 2.0, 3.0, 0.25, -4.0, 1.5, 7.0, -0.125];
        let a = tape.constant(t(&[3, 3], &a_data));
        let y = tape.matmul(id, a).unwrap();
        assert_eq!(tape.value(y).data(), &a_data);
    }

    #[test]
    fn shape_mismatch_is_contract_violation() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(Error::Contract(_))));
        let m = tape.constant(t(&[2, 3], &[0.0; 6]));
        assert!(matches!(tape.matmul(m, m), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_forward_names_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[f64::MAX]));
        match tape.scale(a, 10.0) {
            Err(Error::Numeric { op }) => assert_eq!(op, "scale"),
            other => panic!("expected numeric fault, got {other:?}"),
        }
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn linear_gradient_is_exact() {
        let mut tape = Tape::new();
        let a_data = [0.3, -1.7, 2.5, 0.01];
        let x = tape.param(t(&[4], &[5.0, -2.0, 0.5, 1.0]));
        let a = tape.constant(t(&[4], &a_data));
        let ax = tape.mul(a, x).unwrap();
        let loss = tape.sum(ax).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &a_data);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let zero = tape.scale(x, 0.0).unwrap();
        let y = tape.add(zero, c).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 8.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -50.0, 0.0, 50.0]));
        let y = tape.log_softmax(x).unwrap();
        for r in 0..2 {
            let row = tape.value(y).row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            assert!(lse.abs() < 1e-10);
        }
    }

    #[test]
    fn conv_matches_direct_loop() {
        let (b, ci, co, h, w) = (2, 2, 3, 4, 5);
        let x: Vec<f64> = (0..b * ci * h * w)
            .map(|i| ((i * 37) % 11) as f64 - 5.0)
            .collect();
        let wt: Vec<f64> = (0..co * ci * 9)
            .map(|i| ((i * 13) % 7) as f64 * 0.1 - 0.3)
            .collect();
        let bias = vec![0.5, -0.25, 1.0];
        let mut tape = Tape::new();
        let xv = tape.constant(t(&[b, ci, h, w], &x));
        let wv = tape.constant(t(&[co, ci, 3, 3], &wt));
        let bv = tape.constant(t(&[co], &bias));
        let y = tape.conv2d(xv, wv, bv).unwrap();
        let out = tape.value(y).data();
        for bi in 0..b {
            for o in 0..co {
                for yy in 0..h {
                    for xx in 0..w {
                        let mut s = bias[o];
                        for c in 0..ci {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = yy as isize + ky as isize - 1;
                                    let ix = xx as isize + kx as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    s += wt[((o * ci + c) * 3 + ky) * 3 + kx]
                                        * x[((bi * ci + c) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        let got = out[((bi * co + o) * h + yy) * w + xx];
                        assert!((got - s).abs() < 1e-12, "{got} vs {s}");
                    }
                }
            }
        }
    }

    #[test]
    fn js_divergence_disjoint_one_hots() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 3], &[1.0, 0.0, 0.0]));
        let b = tape.constant(t(&[1, 3], &[0.0, 1.0, 0.0]));
        let c = tape.constant(t(&[1, 3], &[0.0, 0.0, 1.0]));
        let js = tape.js_divergence([a, b, c], 1e-12).unwrap();
        assert!((tape.value(js).item() - 3f64.ln()).abs() < 1e-10);
    }
}
