//! Computation tape and reverse-mode accumulation.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{invalid, Result};
use crate::scalar::Scalar;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Index of a node on a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    /// Zero mean, unit variance.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Batch-norm mode. Training normalizes by the statistics of the single
/// sample's spatial cells and folds them into the running estimates.
pub enum BnMode<'a, T> {
    Train(&'a mut RunningStats<T>),
    Infer(&'a RunningStats<T>),
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        padding: usize,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Upsample {
        input: NodeId,
        factor: usize,
    },
    AvgPool {
        input: NodeId,
        factor: usize,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Square(NodeId),
    Abs(NodeId),
    Scale(NodeId, T),
    MulSpatial {
        input: NodeId,
        weights: Tensor<T>,
    },
    Sum(NodeId),
    Mean(NodeId),
    PoolAbsMean(NodeId),
    Concat(NodeId, NodeId),
    Softmax {
        input: NodeId,
        tau: T,
    },
    Reshape(NodeId),
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// An append-only tape. Inputs of every node precede it, so the node order is
/// a topological order and backward simply walks it in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Records a leaf; it is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> NodeId {
        let rg = tensor.requires_grad();
        self.push(Op::Leaf, tensor, rg)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> NodeId {
        let mut t = tensor;
        t.requires_grad = false;
        self.push(Op::Leaf, t, false)
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> NodeId {
        self.leaf(tensor.with_grad())
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        padding: usize,
    ) -> Result<NodeId> {
        let out = kernels::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            padding,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            },
            out,
            rg,
        ))
    }

    /// Per-channel batch normalization over the spatial cells of a `C×H×W` input.
    pub fn batchnorm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode<'_, T>,
    ) -> Result<NodeId> {
        let (c, h, w) = self.value(input).dims3()?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return invalid(format!("batchnorm affine parameter must have shape [{c}]"));
            }
        }
        let n = h * w;
        let eps = T::lit(BN_EPSILON);
        let x = self.value(input).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); c * n];
        let mut out = vec![T::zero(); c * n];
        let mut inv_std = vec![T::zero(); c];
        let batch_stats = matches!(mode, BnMode::Train(_));
        let mut stats = Vec::with_capacity(c);
        for ch in 0..c {
            let plane = &x[ch * n..(ch + 1) * n];
            let (mean, var) = match &mode {
                BnMode::Train(_) => {
                    let nn = T::from_usize_lossy(n);
                    let mean = plane.iter().copied().sum::<T>() / nn;
                    let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
                    stats.push((mean, var));
                    (mean, var)
                }
                BnMode::Infer(rs) => (rs.mean[ch], rs.var[ch]),
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for i in 0..n {
                let xh = (plane[i] - mean) * is;
                xhat[ch * n + i] = xh;
                out[ch * n + i] = g[ch] * xh + b[ch];
            }
        }
        if let BnMode::Train(rs) = mode {
            if rs.mean.len() != c || rs.var.len() != c {
                return invalid("running statistics channel count mismatch");
            }
            let m = T::lit(BN_MOMENTUM);
            let unbias = if n > 1 {
                T::from_usize_lossy(n) / T::from_usize_lossy(n - 1)
            } else {
                T::one()
            };
            for (ch, (mean, var)) in stats.into_iter().enumerate() {
                rs.mean[ch] = (T::one() - m) * rs.mean[ch] + m * mean;
                rs.var[ch] = (T::one() - m) * rs.var[ch] + m * var * unbias;
            }
        }
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            Tensor::from_raw(vec![c, h, w], out),
            rg,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(Op::Relu(x), v, rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| T::one() / (T::one() + (-a).exp()));
        let rg = self.rg(&[x]);
        self.push(Op::Sigmoid(x), v, rg)
    }

    /// Nearest-neighbour upsampling of a `C×H×W` tensor by an integer factor.
    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        if factor == 0 {
            return invalid("upsample factor must be at least 1");
        }
        let (c, h, w) = self.value(x).dims3()?;
        let data = kernels::upsample_forward(self.value(x).data(), c, h, w, factor);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Op::Upsample { input: x, factor },
            Tensor::from_raw(vec![c, h * factor, w * factor], data),
            rg,
        ))
    }

    /// Non-overlapping average pooling; spatial sizes must be divisible by `factor`.
    pub fn avg_pool(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let (c, h, w) = self.value(x).dims3()?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return invalid(format!("cannot pool {h}×{w} by {factor}"));
        }
        let data = kernels::avgpool_forward(self.value(x).data(), c, h, w, factor);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Op::AvgPool { input: x, factor },
            Tensor::from_raw(vec![c, h / factor, w / factor], data),
            rg,
        ))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(op, v, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a * a);
        let rg = self.rg(&[x]);
        self.push(Op::Square(x), v, rg)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.abs());
        let rg = self.rg(&[x]);
        self.push(Op::Abs(x), v, rg)
    }

    pub fn scale(&mut self, x: NodeId, k: T) -> NodeId {
        let v = self.value(x).map(|a| a * k);
        let rg = self.rg(&[x]);
        self.push(Op::Scale(x, k), v, rg)
    }

    /// Multiplies a `C×H×W` tensor by a constant `H×W` weight grid, broadcast
    /// over channels. No gradient flows into the weights.
    pub fn mul_spatial(&mut self, x: NodeId, weights: &Tensor<T>) -> Result<NodeId> {
        let (c, h, w) = self.value(x).dims3()?;
        if weights.shape() != [h, w] {
            return invalid(format!(
                "spatial weights {:?} do not match {h}×{w}",
                weights.shape()
            ));
        }
        let src = self.value(x).data();
        let n = h * w;
        let data = (0..c * n).map(|i| src[i] * weights.data()[i % n]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Op::MulSpatial {
                input: x,
                weights: weights.clone(),
            },
            Tensor::from_raw(vec![c, h, w], data),
            rg,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(Op::Sum(x), v, rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / T::from_usize_lossy(t.numel().max(1)));
        let rg = self.rg(&[x]);
        self.push(Op::Mean(x), v, rg)
    }

    /// Channel mean of absolute values: `C×H×W → H×W`.
    pub fn pool_abs_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(x).dims3()?;
        if c == 0 {
            return invalid("pool_abs_mean needs at least one channel");
        }
        let v = pool_abs_mean_raw(self.value(x).data(), c, h * w);
        let rg = self.rg(&[x]);
        Ok(self.push(Op::PoolAbsMean(x), Tensor::from_raw(vec![h, w], v), rg))
    }

    /// Channel concatenation of two `C×H×W` tensors with equal spatial size.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ca, ha, wa) = self.value(a).dims3()?;
        let (cb, hb, wb) = self.value(b).dims3()?;
        if (ha, wa) != (hb, wb) {
            return invalid(format!("cannot concat {ha}×{wa} with {hb}×{wb}"));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Op::Concat(a, b),
            Tensor::from_raw(vec![ca + cb, ha, wa], data),
            rg,
        ))
    }

    /// Softmax of `x / tau` over all entries, keeping the input shape.
    pub fn softmax_scaled(&mut self, x: NodeId, tau: T) -> Result<NodeId> {
        let v = kernels::softmax_scaled(self.value(x), tau)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Softmax { input: x, tau }, v, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Reshape(x), v, rg))
    }

    /// Reverse-mode accumulation from a one-element `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|d| Tensor::from_raw(n.value.shape().to_vec(), d))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let g: ConvGeom =
                    kernels::conv_geometry(x, w, bias.map(|b| self.value(b)), *padding)
                        .expect("validated at construction");
                let mut dx = self.want(*input).then(|| vec![T::zero(); x.numel()]);
                let mut dw = self.want(*weight).then(|| vec![T::zero(); w.numel()]);
                let mut db = bias
                    .filter(|b| self.want(*b))
                    .map(|b| vec![T::zero(); self.value(b).numel()]);
                kernels::conv_backward(
                    &g,
                    x.data(),
                    w.data(),
                    dy,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    accumulate(grads, *input, &d);
                }
                if let Some(d) = dw {
                    accumulate(grads, *weight, &d);
                }
                if let (Some(d), Some(b)) = (db, bias) {
                    accumulate(grads, *b, &d);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let n = xhat.len() / c;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xhat.len()];
                let nn = T::from_usize_lossy(n);
                for ch in 0..c {
                    let r = ch * n..(ch + 1) * n;
                    let (d, xh) = (&dy[r.clone()], &xhat[r.clone()]);
                    let sum_d: T = d.iter().copied().sum();
                    let sum_dx: T = d.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    dgamma[ch] = sum_dx;
                    dbeta[ch] = sum_d;
                    let k = gam[ch] * inv_std[ch];
                    for i in 0..n {
                        dx[ch * n + i] = if *batch_stats {
                            k / nn * (nn * d[i] - sum_d - xh[i] * sum_dx)
                        } else {
                            k * d[i]
                        };
                    }
                }
                self.acc_if(grads, *input, &dx);
                self.acc_if(grads, *gamma, &dgamma);
                self.acc_if(grads, *beta, &dbeta);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d: Vec<T> = dy
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.acc_if(grads, *x, &d);
            }
            Op::Sigmoid(x) => {
                let s = node.value.data();
                let d: Vec<T> = dy
                    .iter()
                    .zip(s)
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect();
                self.acc_if(grads, *x, &d);
            }
            Op::Upsample { input, factor } => {
                let (c, h, w) = self.value(*input).dims3().expect("rank 3");
                let mut d = vec![T::zero(); c * h * w];
                kernels::upsample_backward(dy, &mut d, c, h, w, *factor);
                self.acc_if(grads, *input, &d);
            }
            Op::AvgPool { input, factor } => {
                let (c, h, w) = self.value(*input).dims3().expect("rank 3");
                let mut d = vec![T::zero(); c * h * w];
                kernels::avgpool_backward(dy, &mut d, c, h, w, *factor);
                self.acc_if(grads, *input, &d);
            }
            Op::Add(a, b) => {
                self.acc_if(grads, *a, dy);
                self.acc_if(grads, *b, dy);
            }
            Op::Sub(a, b) => {
                self.acc_if(grads, *a, dy);
                let neg: Vec<T> = dy.iter().map(|&g| -g).collect();
                self.acc_if(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.want(*a) {
                    let d: Vec<T> = dy.iter().zip(bv).map(|(&g, &v)| g * v).collect();
                    accumulate(grads, *a, &d);
                }
                if self.want(*b) {
                    let d: Vec<T> = dy.iter().zip(av).map(|(&g, &v)| g * v).collect();
                    accumulate(grads, *b, &d);
                }
            }
            Op::Square(x) => {
                let two = T::lit(2.0);
                let d: Vec<T> = dy
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| two * v * g)
                    .collect();
                self.acc_if(grads, *x, &d);
            }
            Op::Abs(x) => {
                let d: Vec<T> = dy
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| g * sign0(v))
                    .collect();
                self.acc_if(grads, *x, &d);
            }
            Op::Scale(x, k) => {
                let d: Vec<T> = dy.iter().map(|&g| g * *k).collect();
                self.acc_if(grads, *x, &d);
            }
            Op::MulSpatial { input, weights } => {
                let n = weights.numel();
                let wd = weights.data();
                let d: Vec<T> = dy.iter().enumerate().map(|(i, &g)| g * wd[i % n]).collect();
                self.acc_if(grads, *input, &d);
            }
            Op::Sum(x) => {
                let d = vec![dy[0]; self.value(*x).numel()];
                self.acc_if(grads, *x, &d);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let d = vec![dy[0] / T::from_usize_lossy(n.max(1)); n];
                self.acc_if(grads, *x, &d);
            }
            Op::PoolAbsMean(x) => {
                let xv = self.value(*x);
                let n = dy.len();
                let c = xv.numel() / n;
                let inv_c = T::one() / T::from_usize_lossy(c);
                let d: Vec<T> = xv
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| dy[i % n] * sign0(v) * inv_c)
                    .collect();
                self.acc_if(grads, *x, &d);
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).numel();
                self.acc_if(grads, *a, &dy[..na]);
                self.acc_if(grads, *b, &dy[na..]);
            }
            Op::Softmax { input, tau } => {
                let y = node.value.data();
                let dot: T = dy.iter().zip(y).map(|(&g, &v)| g * v).sum();
                let d: Vec<T> = dy
                    .iter()
                    .zip(y)
                    .map(|(&g, &v)| v * (g - dot) / *tau)
                    .collect();
                self.acc_if(grads, *input, &d);
            }
            Op::Reshape(x) => self.acc_if(grads, *x, dy),
        }
    }

    fn want(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn acc_if(&self, grads: &mut [Option<Vec<T>>], id: NodeId, d: &[T]) {
        if self.want(id) {
            accumulate(grads, id, d);
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, d: &[T]) {
    match &mut grads[id.0] {
        Some(g) => g.iter_mut().zip(d).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(d.to_vec()),
    }
}

/// Sign with the subgradient convention `sign(0) = 0`.
#[inline]
fn sign0<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn pool_abs_mean_raw<T: Scalar>(x: &[T], c: usize, n: usize) -> Vec<T> {
    let inv_c = T::one() / T::from_usize_lossy(c);
    let mut out = vec![T::zero(); n];
    for ch in 0..c {
        for (o, &v) in out.iter_mut().zip(&x[ch * n..(ch + 1) * n]) {
            *o += v.abs();
        }
    }
    out.iter_mut().for_each(|v| *v *= inv_c);
    out
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `id`; `None` for nodes that do not require
    /// gradients or do not influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but yields zeros shaped like `like` when absent.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor<T>) -> Tensor<T> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}
