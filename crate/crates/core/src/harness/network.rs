//! Toy BEV encoders with named layers `B0`, `B1`, `B2`, `H` and a sigmoid
//! center-heatmap head.
//!
//! ```text
//! teacher (grid resolution R):            student (input pooled to R/2):
//!   B0 conv3x3            @R                B0 conv3x3 [+ temporal fuse] @R/2
//!   B1 pool2, conv3x3     @R/2              B1 pool2, conv3x3            @R/4
//!   B2 conv3x3            @R/2              B2 conv3x3                   @R/4
//!   H  conv3x3(up2(B2)‖B0) @R               H  conv3x3(up2(B2)‖B0)       @R/2
//!   head conv1x1, sigmoid @R                head conv1x1, sigmoid, up2   @R
//! ```

use std::collections::HashMap;

use rand::Rng;

use crate::error::{bad_config, Result};
use crate::loss::LayerId;
use crate::nn::{Bind, Conv, ConvBnRelu, State};
use crate::tensor::{Graph, NodeId, Tensor};

/// Head bias giving an initial response of about 0.1.
const HEAD_PRIOR: f64 = -2.19;

/// Node ids of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct NetOutputs {
    pub b0: NodeId,
    pub b1: NodeId,
    pub b2: NodeId,
    pub h: NodeId,
    /// `K×R×R` heatmap in `[0, 1]` at grid resolution.
    pub heatmap: NodeId,
}

impl NetOutputs {
    pub fn layer(&self, id: LayerId) -> NodeId {
        match id {
            LayerId::B0 => self.b0,
            LayerId::B1 => self.b1,
            LayerId::B2 => self.b2,
            LayerId::H => self.h,
        }
    }
}

/// The shared encoder body; `pool_input` selects the student's half resolution.
#[derive(Clone, Debug, PartialEq)]
struct Encoder {
    b0: ConvBnRelu<f64>,
    fuse: Option<ConvBnRelu<f64>>,
    b1: ConvBnRelu<f64>,
    b2: ConvBnRelu<f64>,
    h: ConvBnRelu<f64>,
    head: Conv<f64>,
}

impl Encoder {
    fn new<R: Rng + ?Sized>(
        rng: &mut R,
        c_in: usize,
        c: usize,
        classes: usize,
        temporal: bool,
    ) -> Self {
        Self {
            b0: ConvBnRelu::new(rng, c_in, c, 3),
            fuse: temporal.then(|| ConvBnRelu::new(rng, 2 * c, c, 1)),
            b1: ConvBnRelu::new(rng, c, c, 3),
            b2: ConvBnRelu::new(rng, c, c, 3),
            h: ConvBnRelu::new(rng, 2 * c, c, 3),
            head: Conv::new(rng, c, classes, 1, HEAD_PRIOR),
        }
    }

    fn forward_b0(&mut self, g: &mut Graph<f64>, x: NodeId, bind: &mut Bind) -> Result<NodeId> {
        self.b0.forward(g, x, bind)
    }

    fn forward(
        &mut self,
        g: &mut Graph<f64>,
        x: NodeId,
        prev_b0: Option<&Tensor<f64>>,
        bind: &mut Bind,
    ) -> Result<(NetOutputs, NodeId)> {
        let mut b0 = self.b0.forward(g, x, bind)?;
        if let Some(fuse) = &mut self.fuse {
            let prev = match prev_b0 {
                Some(p) => p.clone(),
                None => Tensor::zeros(g.value(b0).shape()),
            };
            let prev = g.constant(prev);
            let cat = g.concat_channels(b0, prev)?;
            b0 = fuse.forward(g, cat, bind)?;
        }
        let p = g.avg_pool(b0, 2)?;
        let b1 = self.b1.forward(g, p, bind)?;
        let b2 = self.b2.forward(g, b1, bind)?;
        let up = g.upsample_nearest(b2, 2)?;
        let cat = g.concat_channels(up, b0)?;
        let h = self.h.forward(g, cat, bind)?;
        let logits = self.head.forward(g, h, bind)?;
        let heat = g.sigmoid(logits);
        Ok((
            NetOutputs {
                b0,
                b1,
                b2,
                h,
                heatmap: heat,
            },
            heat,
        ))
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        let mut v = self.b0.params_mut();
        if let Some(f) = &mut self.fuse {
            v.extend(f.params_mut());
        }
        v.extend(self.b1.params_mut());
        v.extend(self.b2.params_mut());
        v.extend(self.h.params_mut());
        v.extend(self.head.params_mut());
        v
    }

    fn export(&self, out: &mut State<f64>) {
        self.b0.export("B0", out);
        if let Some(f) = &self.fuse {
            f.export("fuse", out);
        }
        self.b1.export("B1", out);
        self.b2.export("B2", out);
        self.h.export("H", out);
        self.head.export("head", out);
    }

    fn import(&mut self, state: &HashMap<String, Tensor<f64>>) -> Result<()> {
        self.b0.import("B0", state)?;
        if let Some(f) = &mut self.fuse {
            f.import("fuse", state)?;
        }
        self.b1.import("B1", state)?;
        self.b2.import("B2", state)?;
        self.h.import("H", state)?;
        self.head.import("head", state)
    }
}

/// Full-resolution network standing in for the LiDAR detector.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherNet {
    enc: Encoder,
    pub channels: usize,
    pub classes: usize,
}

impl TeacherNet {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        input_channels: usize,
        channels: usize,
        classes: usize,
    ) -> Self {
        Self {
            enc: Encoder::new(rng, input_channels, channels, classes, false),
            channels,
            classes,
        }
    }

    pub fn forward(
        &mut self,
        g: &mut Graph<f64>,
        x: NodeId,
        bind: &mut Bind,
    ) -> Result<NetOutputs> {
        Ok(self.enc.forward(g, x, None, bind)?.0)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        self.enc.params_mut()
    }

    pub fn head(&self) -> &Conv<f64> {
        &self.enc.head
    }

    pub fn state(&self) -> State<f64> {
        let mut out = Vec::new();
        self.enc.export(&mut out);
        out
    }

    pub fn load_state(&mut self, state: &HashMap<String, Tensor<f64>>) -> Result<()> {
        self.enc.import(state)
    }

    /// `C×H×W` shape of a named layer for an `R×R` input.
    pub fn layer_shape(&self, id: LayerId, resolution: usize) -> [usize; 3] {
        let r = match id {
            LayerId::B0 | LayerId::H => resolution,
            LayerId::B1 | LayerId::B2 => resolution / 2,
        };
        [self.channels, r, r]
    }
}

/// Half-resolution network standing in for the camera detector.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentNet {
    enc: Encoder,
    pub channels: usize,
    pub classes: usize,
}

impl StudentNet {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        input_channels: usize,
        channels: usize,
        classes: usize,
        temporal: bool,
    ) -> Self {
        Self {
            enc: Encoder::new(rng, input_channels, channels, classes, temporal),
            channels,
            classes,
        }
    }

    pub fn temporal(&self) -> bool {
        self.enc.fuse.is_some()
    }

    /// `B0` of a detached pass, for temporal fusion into the next frame.
    pub fn b0_features(&mut self, input: &Tensor<f64>, train: bool) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let p = g.avg_pool(x, 2)?;
        let mut bind = Bind {
            train,
            ids: Vec::new(),
        };
        let b0 = self.enc.forward_b0(&mut g, p, &mut bind)?;
        Ok(g.value(b0).clone())
    }

    pub fn forward(
        &mut self,
        g: &mut Graph<f64>,
        x: NodeId,
        prev_b0: Option<&Tensor<f64>>,
        bind: &mut Bind,
    ) -> Result<NetOutputs> {
        let pooled = g.avg_pool(x, 2)?;
        let (mut out, heat) = self.enc.forward(g, pooled, prev_b0, bind)?;
        out.heatmap = g.upsample_nearest(heat, 2)?;
        Ok(out)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        self.enc.params_mut()
    }

    pub fn head(&self) -> &Conv<f64> {
        &self.enc.head
    }

    /// Copies the teacher's detection head.
    pub fn inherit_head(&mut self, teacher: &TeacherNet) -> Result<()> {
        let t = teacher.head();
        let s = &mut self.enc.head;
        if t.weight.shape() != s.weight.shape() || t.bias.shape() != s.bias.shape() {
            return bad_config(format!(
                "teacher head {:?} is incompatible with student head {:?}",
                t.weight.shape(),
                s.weight.shape()
            ));
        }
        *s = t.clone();
        Ok(())
    }

    pub fn state(&self) -> State<f64> {
        let mut out = Vec::new();
        self.enc.export(&mut out);
        out
    }

    pub fn load_state(&mut self, state: &HashMap<String, Tensor<f64>>) -> Result<()> {
        self.enc.import(state)
    }

    pub fn layer_shape(&self, id: LayerId, resolution: usize) -> [usize; 3] {
        let r = match id {
            LayerId::B0 | LayerId::H => resolution / 2,
            LayerId::B1 | LayerId::B2 => resolution / 4,
        };
        [self.channels, r, r]
    }
}
