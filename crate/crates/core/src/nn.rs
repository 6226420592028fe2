//! Parameterized layers on top of the tape: convolution blocks with batch
//! norm, and a biased convolution for detection heads.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bad_config, Result};
use crate::scalar::Scalar;
use crate::tensor::{BnMode, Graph, NodeId, RunningStats, Tensor};

/// How a forward pass treats parameters.
///
/// In training mode parameters become differentiable leaves (recorded in
/// `ids` in visiting order) and batch norm uses per-sample statistics. In
/// inference mode parameters are constants and batch norm uses running
/// statistics.
pub struct Bind {
    pub train: bool,
    pub ids: Vec<NodeId>,
}

impl Bind {
    pub fn train() -> Self {
        Self {
            train: true,
            ids: Vec::new(),
        }
    }

    pub fn infer() -> Self {
        Self {
            train: false,
            ids: Vec::new(),
        }
    }

    fn bind<T: Scalar>(&mut self, g: &mut Graph<T>, t: &Tensor<T>) -> NodeId {
        if self.train {
            let id = g.param(t.clone());
            self.ids.push(id);
            id
        } else {
            g.constant(t.clone())
        }
    }
}

/// Named tensors forming a module's persistent state.
pub type State<T> = Vec<(String, Tensor<T>)>;

pub(crate) fn he_normal<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

fn take<T: Scalar>(
    state: &HashMap<String, Tensor<T>>,
    name: &str,
    like: &Tensor<T>,
) -> Result<Tensor<T>> {
    match state.get(name) {
        Some(t) if t.shape() == like.shape() => Ok(t.clone()),
        Some(t) => bad_config(format!(
            "parameter {name}: shape {:?}, expected {:?}",
            t.shape(),
            like.shape()
        )),
        None => bad_config(format!("parameter {name} missing from checkpoint")),
    }
}

/// `k×k` convolution without bias, batch norm, ReLU. Padding keeps the
/// spatial size.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnRelu<T> {
    pub weight: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: RunningStats<T>,
}

impl<T: Scalar> ConvBnRelu<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            weight: he_normal(rng, &[c_out, c_in, kernel, kernel], c_in * kernel * kernel),
            gamma: Tensor::full(&[c_out], T::one()),
            beta: Tensor::zeros(&[c_out]),
            stats: RunningStats::identity(c_out),
        }
    }

    /// 1×1 block copying the first `min(c_in, c_out)` channels, with identity
    /// batch-norm statistics.
    pub fn identity(c_in: usize, c_out: usize) -> Self {
        let weight = Tensor::from_fn(&[c_out, c_in, 1, 1], |i| {
            if i / c_in == i % c_in {
                T::one()
            } else {
                T::zero()
            }
        });
        Self {
            weight,
            gamma: Tensor::full(&[c_out], T::one()),
            beta: Tensor::zeros(&[c_out]),
            stats: RunningStats::identity(c_out),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&mut self, g: &mut Graph<T>, x: NodeId, bind: &mut Bind) -> Result<NodeId> {
        let w = bind.bind(g, &self.weight);
        let gamma = bind.bind(g, &self.gamma);
        let beta = bind.bind(g, &self.beta);
        let pad = (self.weight.shape()[2] - 1) / 2;
        let c = g.conv2d(x, w, None, pad)?;
        let mode = if bind.train {
            BnMode::Train(&mut self.stats)
        } else {
            BnMode::Infer(&self.stats)
        };
        let n = g.batchnorm(c, gamma, beta, mode)?;
        Ok(g.relu(n))
    }

    /// Trainable tensors in the order `forward` binds them.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.gamma, &mut self.beta]
    }

    pub fn export(&self, prefix: &str, out: &mut State<T>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bn.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.bn.beta"), self.beta.clone()));
        let c = self.stats.mean.len();
        out.push((
            format!("{prefix}.bn.running_mean"),
            Tensor::from_raw(vec![c], self.stats.mean.clone()),
        ));
        out.push((
            format!("{prefix}.bn.running_var"),
            Tensor::from_raw(vec![c], self.stats.var.clone()),
        ));
    }

    pub fn import(&mut self, prefix: &str, state: &HashMap<String, Tensor<T>>) -> Result<()> {
        self.weight = take(state, &format!("{prefix}.weight"), &self.weight)?;
        self.gamma = take(state, &format!("{prefix}.bn.gamma"), &self.gamma)?;
        self.beta = take(state, &format!("{prefix}.bn.beta"), &self.beta)?;
        self.stats.mean =
            take(state, &format!("{prefix}.bn.running_mean"), &self.gamma)?.into_data();
        self.stats.var = take(state, &format!("{prefix}.bn.running_var"), &self.gamma)?.into_data();
        Ok(())
    }
}

/// Plain convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv<T> {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        bias: T,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let std = (1.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        Self {
            weight: Tensor::from_fn(&[c_out, c_in, kernel, kernel], |_| T::lit(dist.sample(rng))),
            bias: Tensor::full(&[c_out], bias),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: NodeId, bind: &mut Bind) -> Result<NodeId> {
        let w = bind.bind(g, &self.weight);
        let b = bind.bind(g, &self.bias);
        let pad = (self.weight.shape()[2] - 1) / 2;
        g.conv2d(x, w, Some(b), pad)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn export(&self, prefix: &str, out: &mut State<T>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }

    pub fn import(&mut self, prefix: &str, state: &HashMap<String, Tensor<T>>) -> Result<()> {
        self.weight = take(state, &format!("{prefix}.weight"), &self.weight)?;
        self.bias = take(state, &format!("{prefix}.bias"), &self.bias)?;
        Ok(())
    }
}
