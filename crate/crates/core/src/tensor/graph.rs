//! Reverse-mode tape.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to compute its vector-Jacobian product. Nodes are only ever appended,
//! so the node list is a topological order and [`Graph::backward`] simply
//! walks it in reverse.

use super::kernels::{self, ConvGeom, Padding, PoolGeom};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softmax,
    Linear,
    Sigmoid,
    Tanh,
}

/// Batch normalization statistics source.
#[derive(Clone, Debug)]
pub enum BnMode {
    /// Normalize with statistics of the current batch.
    Train,
    /// Normalize with stored running statistics.
    Infer { mean: Vec<f64>, var: Vec<f64> },
}

/// Per-channel statistics of one training batch. `var` is the unbiased
/// estimate, for running-average bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    MatMul {
        x: Var,
        w: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    MulConst {
        x: Var,
        c: Tensor,
    },
    Scale {
        x: Var,
        k: f64,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    Reshape(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Sum(Var),
    SumSquares(Var),
    CrossEntropy {
        probs: Var,
        target: Tensor,
    },
    Rmse {
        pred: Var,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The tape: values plus the operations that produced them.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    regularizers: Vec<(Var, f64)>,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// d(loss)/d(v), or `None` if `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter gradients, summed over every node that loaded the parameter.
    pub fn params(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                match out.iter_mut().find(|(i, _)| *i == id) {
                    Some((_, acc)) => acc.add_assign(g),
                    None => out.push((id, g.clone())),
                }
            }
        }
        out
    }
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / last.max(1), last)
}

fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that gradients are tracked for.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf treated as a constant (model inputs, targets).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    fn param_vars(&self) -> Vec<(ParamId, Var)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect()
    }

    /// 3-D convolution over the trailing `(T, H, W, Cin)` axes; any leading
    /// axes are batch. The kernel is `(kt, kh, kw, Cin, Cout)`. A positive
    /// `l2` registers `l2 · Σ kernel²` with the regularization accumulator.
    pub fn conv3d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: Padding,
        l2: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() < 4 || ks.len() != 5 {
            return Err(shape_err(format!("conv3d input {xs:?} / kernel {ks:?}")));
        }
        let r = xs.len();
        let batch: usize = xs[..r - 4].iter().product();
        let geom = ConvGeom::new(
            batch,
            [xs[r - 4], xs[r - 3], xs[r - 2]],
            xs[r - 1],
            [ks[0], ks[1], ks[2]],
            ks[3],
            ks[4],
            padding,
        )?;
        let mut out_shape = xs[..r - 4].to_vec();
        out_shape.extend_from_slice(&geom.out);
        out_shape.push(geom.cout);
        let v = self.conv_node(x, kernel, bias, geom, out_shape)?;
        if l2 > 0.0 {
            self.regularizers.push((kernel, l2));
        }
        Ok(v)
    }

    /// 1-D convolution over the trailing `(L, Cin)` axes with kernel
    /// `(k, Cin, Cout)`; leading axes are batch, which makes it
    /// time-distributed for free.
    pub fn conv1d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: Padding,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() < 2 || ks.len() != 3 {
            return Err(shape_err(format!("conv1d input {xs:?} / kernel {ks:?}")));
        }
        let r = xs.len();
        let batch: usize = xs[..r - 2].iter().product();
        let geom = ConvGeom::new(
            batch,
            [1, 1, xs[r - 2]],
            xs[r - 1],
            [1, 1, ks[0]],
            ks[1],
            ks[2],
            padding,
        )?;
        let mut out_shape = xs[..r - 2].to_vec();
        out_shape.push(geom.out[2]);
        out_shape.push(geom.cout);
        self.conv_node(x, kernel, bias, geom, out_shape)
    }

    fn conv_node(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(shape_err(format!(
                    "conv bias {:?} for {} outputs",
                    self.shape(b),
                    geom.cout
                )));
            }
        }
        let out = kernels::conv_forward(
            &geom,
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::from_parts(&out_shape, out)?,
            Op::Conv {
                x,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Max pooling over the trailing spatial axes just before the channel
    /// axis; `window.len()` (1 to 3) decides how many axes are pooled.
    pub fn maxpool(&mut self, x: Var, window: &[usize], stride: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let k = window.len();
        if k == 0 || k > 3 || stride.len() != k || xs.len() < k + 1 {
            return Err(shape_err(format!(
                "maxpool window {window:?} on input {xs:?}"
            )));
        }
        let r = xs.len();
        let mut dims = [1; 3];
        let mut win = [1; 3];
        let mut st = [1; 3];
        for i in 0..k {
            dims[3 - k + i] = xs[r - 1 - k + i];
            win[3 - k + i] = window[i];
            st[3 - k + i] = stride[i];
        }
        let batch: usize = xs[..r - 1 - k].iter().product();
        let geom = PoolGeom::new(batch, dims, xs[r - 1], win, st)?;
        let (out, argmax) = kernels::maxpool_forward(&geom, self.value(x).data());
        let mut out_shape = xs[..r - 1 - k].to_vec();
        out_shape.extend_from_slice(&geom.out[3 - k..]);
        out_shape.push(xs[r - 1]);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(&out_shape, out)?,
            Op::MaxPool { x, argmax },
            rg,
        ))
    }

    /// `x · w` over the last axis of `x`; `w` is `(n, m)`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (rows, n) = split_last(&xs);
        if ws.len() != 2 || ws[0] != n {
            return Err(shape_err(format!("matmul {xs:?} by {ws:?}")));
        }
        let m = ws[1];
        let mut out = vec![0.0; rows * m];
        kernels::gemm(
            rows,
            n,
            m,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            false,
        );
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = m;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::from_parts(&shape, out)?, Op::MatMul { x, w }, rg))
    }

    /// Adds `bias` (length = last axis) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = split_last(self.shape(x));
        if self.shape(bias) != [n] {
            return Err(shape_err(format!(
                "bias {:?} for width {n}",
                self.shape(bias)
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias { x, bias }, rg))
    }

    /// Affine map over the last axis.
    pub fn dense(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "elementwise {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Elementwise product with a constant tensor (masks).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(shape_err(format!(
                "mask {:?} for {:?}",
                c.shape(),
                self.shape(x)
            )));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a * b)
            .collect();
        let out = Tensor::from_parts(self.shape(x), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MulConst { x, c }, rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v * k);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, k }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    /// Softmax over the last axis, computed after subtracting the row max.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, n) = split_last(self.shape(x));
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Softmax => self.softmax(x),
            Activation::Linear => x,
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Tanh => self.tanh(x),
        }
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(shape_err(format!(
                "narrow axis {axis} [{start}, +{len}) of {xs:?}"
            )));
        }
        let (outer, n, inner) = axis_blocks(&xs, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(&shape, out)?,
            Op::Narrow { x, axis, start },
            rg,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| shape_err("empty concat"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err(format!("concat axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err(format!(
                    "concat {first:?} with {s:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_blocks(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::from_parts(&shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Per-channel (last axis) normalization over every other axis.
    /// In training mode the batch (leading axis) must hold at least two
    /// samples; the returned statistics feed running averages.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: &BnMode,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(shape_err(format!(
                "batchnorm needs a batch axis, got {xs:?}"
            )));
        }
        let (rows, c) = split_last(&xs);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(format!("batchnorm scale/shift for {c} channels")));
        }
        let data = self.value(x).data();
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if xs[0] < 2 {
                    return Err(Error::DegenerateBatch(xs[0]));
                }
                let mut mean = vec![0.0; c];
                for row in data.chunks(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for row in data.chunks(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                let unbiased = var.iter().map(|s| s / (rows as f64 - 1.0)).collect();
                var.iter_mut().for_each(|s| *s /= rows as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Infer { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("running statistics do not match channel count"));
                }
                (mean.clone(), var.clone(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(data.len());
        let mut out = Vec::with_capacity(data.len());
        for row in data.chunks(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let train = matches!(mode, BnMode::Train);
        let v = self.push(
            Tensor::from_parts(&xs, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Inverted dropout: in training each element is zeroed with probability
    /// `rate` and survivors are scaled by `1/(1-rate)`; otherwise identity.
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        train: bool,
        rng: &mut impl rand::Rng,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = Tensor::from_fn(self.shape(x), |_| {
            if rng.gen::<f64>() < rate {
                0.0
            } else {
                keep
            }
        });
        self.mul_const(x, mask)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_squares();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    /// Mean over rows of `-Σ target · ln(max(p, 1e-12))`.
    pub fn cross_entropy(&mut self, probs: Var, target: &Tensor) -> Result<Var> {
        if self.shape(probs) != target.shape() {
            return Err(shape_err(format!(
                "cross-entropy {:?} vs target {:?}",
                self.shape(probs),
                target.shape()
            )));
        }
        let (rows, k) = split_last(target.shape());
        let p = self.value(probs).data();
        let mut total = 0.0;
        for (pr, tr) in p.chunks(k).zip(target.data().chunks(k)) {
            for (pv, tv) in pr.iter().zip(tr) {
                if *tv != 0.0 {
                    total -= tv * pv.max(PROB_FLOOR).ln();
                }
            }
        }
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            Op::CrossEntropy {
                probs,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// `sqrt(mean((pred - target)²))`.
    pub fn rmse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(shape_err(format!(
                "rmse {:?} vs target {:?}",
                self.shape(pred),
                target.shape()
            )));
        }
        let n = target.len() as f64;
        let mse = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(mse.sqrt()),
            Op::Rmse {
                pred,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Kernels registered with an L2 factor, in registration order.
    pub fn regularized(&self) -> &[(Var, f64)] {
        &self.regularizers
    }

    /// `Σ l2 · Σ w²` over every registered kernel, or `None` if none.
    pub fn regularization(&mut self) -> Option<Var> {
        let regs = self.regularizers.clone();
        let mut total: Option<Var> = None;
        for (k, l2) in regs {
            let sq = self.sum_squares(k);
            let term = self.scale(sq, l2);
            total = Some(match total {
                Some(t) => self.add(t, term).expect("scalars"),
                None => term,
            });
        }
        total
    }

    /// Back-propagates from a scalar `loss` to every node that requires
    /// gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(self.shape(loss), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Gradients {
            grads,
            params: self.param_vars(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::from_parts(self.shape(v), data).expect("gradient matches value shape")
    }

    fn backprop_node(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let g = gy.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv {
                x,
                kernel,
                bias,
                geom,
            } => {
                let r = kernels::conv_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*kernel).data(),
                    g,
                    self.rg(*x),
                );
                if let Some(gx) = r.input {
                    self.accumulate(grads, *x, self.like(*x, gx));
                }
                self.accumulate(grads, *kernel, self.like(*kernel, r.kernel));
                if let Some(b) = bias {
                    self.accumulate(grads, *b, self.like(*b, r.bias));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (gv, &idx) in g.iter().zip(argmax) {
                    gx[idx] += gv;
                }
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::MatMul { x, w } => {
                let (rows, n) = split_last(self.shape(*x));
                let m = self.shape(*w)[1];
                if self.rg(*x) {
                    let mut gx = vec![0.0; rows * n];
                    kernels::gemm(
                        rows,
                        m,
                        n,
                        g,
                        false,
                        self.value(*w).data(),
                        true,
                        &mut gx,
                        false,
                    );
                    self.accumulate(grads, *x, self.like(*x, gx));
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; n * m];
                    kernels::gemm(
                        n,
                        rows,
                        m,
                        self.value(*x).data(),
                        true,
                        g,
                        false,
                        &mut gw,
                        false,
                    );
                    self.accumulate(grads, *w, self.like(*w, gw));
                }
            }
            Op::AddBias { x, bias } => {
                let n = self.shape(*bias)[0];
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    for (d, v) in gb.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *x, gy.clone());
                self.accumulate(grads, *bias, self.like(*bias, gb));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(
                    grads,
                    *a,
                    self.like(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()),
                );
                self.accumulate(
                    grads,
                    *b,
                    self.like(*b, g.iter().zip(av).map(|(g, a)| g * a).collect()),
                );
            }
            Op::MulConst { x, c } => {
                self.accumulate(
                    grads,
                    *x,
                    self.like(*x, g.iter().zip(c.data()).map(|(g, c)| g * c).collect()),
                );
            }
            Op::Scale { x, k } => {
                self.accumulate(grads, *x, self.like(*x, g.iter().map(|v| v * k).collect()));
            }
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(y)
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::Sigmoid(x) => {
                let gx = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::Tanh(x) => {
                let gx = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::Softmax(x) => {
                let (_, n) = split_last(node.value.shape());
                let mut gx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, self.like(*x, g.to_vec())),
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, n, inner) = axis_blocks(xs, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    gx[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_blocks(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    let mut gv = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        gv.extend_from_slice(&g[src..src + n * inner]);
                    }
                    offset += n;
                    self.accumulate(grads, v, self.like(v, gv));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let rows = xhat.len() / c;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                }
                if self.rg(*x) {
                    let mut gx = Vec::with_capacity(xhat.len());
                    if *train {
                        // dx = γ·s/m · (m·dy − Σdy − x̂·Σ(dy·x̂))
                        let m = rows as f64;
                        for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                gx.push(
                                    gam[j] * inv_std[j] / m
                                        * (m * gr[j] - dbeta[j] - hr[j] * dgamma[j]),
                                );
                            }
                        }
                    } else {
                        for gr in g.chunks(c) {
                            for j in 0..c {
                                gx.push(gam[j] * inv_std[j] * gr[j]);
                            }
                        }
                    }
                    self.accumulate(grads, *x, self.like(*x, gx));
                }
                self.accumulate(grads, *gamma, self.like(*gamma, dgamma));
                self.accumulate(grads, *beta, self.like(*beta, dbeta));
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; self.value(*x).len()];
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::SumSquares(x) => {
                let gx = self
                    .value(*x)
                    .data()
                    .iter()
                    .map(|v| 2.0 * v * g[0])
                    .collect();
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::CrossEntropy { probs, target } => {
                let (rows, _) = split_last(target.shape());
                let scale = g[0] / rows as f64;
                let gx = self
                    .value(*probs)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(p, t)| if *p > PROB_FLOOR { -t / p * scale } else { 0.0 })
                    .collect();
                self.accumulate(grads, *probs, self.like(*probs, gx));
            }
            Op::Rmse { pred, target } => {
                let loss = y[0];
                let n = target.len() as f64;
                let gx = if loss > 0.0 {
                    self.value(*pred)
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(p, t)| (p - t) / (n * loss) * g[0])
                        .collect()
                } else {
                    vec![0.0; target.len()]
                };
                self.accumulate(grads, *pred, self.like(*pred, gx));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
#[path = "graph_tests.rs"]
mod tests;
