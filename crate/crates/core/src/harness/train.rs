use std::collections::HashMap;

use rand::seq::SliceRandom;

use super::eval::synthetic_ap;
use super::network::{NetOutputs, StudentNet, TeacherNet};
use super::optim::{cosine_lr, AdamW};
use crate::attention::AdaptationModule;
use crate::error::{bad_config, invalid, Error, Result};
use crate::geometry::{warp_bev, Heatmap};
use crate::loss::{
    total_distill_loss, DistillConfig, DistillTargets, LayerFeatures, LayerId, LayerSpec,
};
use crate::nn::{Bind, State};
use crate::sim::{stream_rng, Dataset, SceneSample};
use crate::tensor::{Graph, NodeId, Tensor};

const STREAM_TEACHER_INIT: u64 = 100;
const STREAM_STUDENT_INIT: u64 = 200;
const STREAM_ADAPTER_INIT: u64 = 300;
const STREAM_SHUFFLE: u64 = 1000;

/// Input channels of both networks (density, occupancy).
pub const INPUT_CHANNELS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub cosine: bool,
    pub seed: u64,
    /// Feature channels of every encoder layer.
    pub channels: usize,
    pub distill: bool,
    /// Multiplier on the distillation loss relative to the detection loss.
    pub distill_weight: f64,
    pub inherit_head: bool,
    /// Fuse the warped previous-frame `B0` into the current frame.
    pub temporal: bool,
    pub distill_config: DistillConfig<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 2e-4,
            weight_decay: 1e-2,
            cosine: true,
            seed: 0,
            channels: 8,
            distill: true,
            distill_weight: 1.0,
            inherit_head: true,
            temporal: false,
            distill_config: DistillConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad_config(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) || !(self.distill_weight >= 0.0) {
            return bad_config("weight decay and distillation weight must be non-negative");
        }
        if self.channels == 0 {
            return bad_config("channels must be positive");
        }
        self.distill_config.validate()
    }
}

fn check_dataset(ds: &Dataset) -> Result<usize> {
    if ds.is_empty() {
        return invalid("dataset is empty");
    }
    let r = ds.config.cells;
    if !r.is_multiple_of(4) {
        return bad_config(format!(
            "grid cells per side must be a multiple of 4, got {r}"
        ));
    }
    Ok(r)
}

fn heatmap_mse(g: &mut Graph<f64>, pred: NodeId, gt: &Heatmap<f64>) -> Result<NodeId> {
    let t = g.constant(gt.tensor().clone());
    let d = g.sub(pred, t)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

fn ensure_finite(v: f64, what: &str, epoch: usize, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!(
            "{what} became {v} at epoch {epoch}, step {step}"
        )))
    }
}

fn grads_for<'a>(
    grads: &'a crate::tensor::Gradients<f64>,
    ids: &[NodeId],
) -> Vec<Option<&'a Tensor<f64>>> {
    ids.iter().map(|&id| grads.get(id)).collect()
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, STREAM_SHUFFLE + epoch as u64));
    order
}

fn learning_rate(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    if cfg.cosine {
        cosine_lr(cfg.lr, step, total)
    } else {
        cfg.lr
    }
}

/// Result of teacher pre-training.
#[derive(Clone, Debug)]
pub struct TeacherRun {
    pub net: TeacherNet,
    /// Mean heatmap MSE over the dataset before the first update.
    pub initial_mse: f64,
    /// Same measurement after the last update.
    pub final_mse: f64,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mean heatmap MSE with batch statistics, leaving the network untouched.
fn teacher_dataset_mse(net: &TeacherNet, ds: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for s in ds.current_frames() {
        let mut n = net.clone();
        let mut g = Graph::new();
        let x = g.constant(s.teacher_input.clone());
        let out = n.forward(&mut g, x, &mut Bind::train())?;
        let l = heatmap_mse(&mut g, out.heatmap, &s.gt_heatmap)?;
        total += g.value(l).data()[0];
    }
    Ok(total / ds.len() as f64)
}

/// Fits the teacher's heatmap to the ground truth.
pub fn train_teacher(ds: &Dataset, cfg: &TrainConfig) -> Result<TeacherRun> {
    cfg.validate()?;
    check_dataset(ds)?;
    let mut net = TeacherNet::new(
        &mut stream_rng(cfg.seed, STREAM_TEACHER_INIT),
        INPUT_CHANNELS,
        cfg.channels,
        ds.config.classes(),
    );
    let initial_mse = teacher_dataset_mse(&net, ds)?;
    let samples: Vec<&SceneSample> = ds.current_frames().collect();
    let total = cfg.epochs * samples.len();
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut step = 0;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for i in shuffled(samples.len(), cfg.seed, epoch) {
            let s = samples[i];
            let mut g = Graph::new();
            let mut bind = Bind::train();
            let x = g.constant(s.teacher_input.clone());
            let out = net.forward(&mut g, x, &mut bind)?;
            let loss = heatmap_mse(&mut g, out.heatmap, &s.gt_heatmap)?;
            let lv = g.value(loss).data()[0];
            ensure_finite(lv, "teacher loss", epoch, step)?;
            sum += lv;
            let grads = g.backward(loss)?;
            opt.step(
                net.params_mut(),
                &grads_for(&grads, &bind.ids),
                learning_rate(cfg, step, total),
            )?;
            step += 1;
        }
        epoch_losses.push(sum / samples.len() as f64);
    }
    let final_mse = teacher_dataset_mse(&net, ds)?;
    Ok(TeacherRun {
        net,
        initial_mse,
        final_mse,
        epoch_losses,
    })
}

/// Frozen teacher outputs for one scene.
#[derive(Clone, Debug)]
pub struct TeacherView {
    pub b0: Tensor<f64>,
    pub b1: Tensor<f64>,
    pub b2: Tensor<f64>,
    pub h: Tensor<f64>,
    pub targets: DistillTargets<f64>,
}

impl TeacherView {
    pub fn layer(&self, id: LayerId) -> &Tensor<f64> {
        match id {
            LayerId::B0 => &self.b0,
            LayerId::B1 => &self.b1,
            LayerId::B2 => &self.b2,
            LayerId::H => &self.h,
        }
    }
}

/// Runs the teacher in inference mode; its parameters are constants.
pub fn teacher_view(teacher: &TeacherNet, s: &SceneSample) -> Result<TeacherView> {
    let mut t = teacher.clone();
    let mut g = Graph::new();
    let x = g.constant(s.teacher_input.clone());
    let mut bind = Bind::infer();
    let out: NetOutputs = t.forward(&mut g, x, &mut bind)?;
    debug_assert!(bind.ids.is_empty() && !g.requires_grad(out.heatmap));
    let v = |id| g.value(id).clone();
    Ok(TeacherView {
        b0: v(out.b0),
        b1: v(out.b1),
        b2: v(out.b2),
        h: v(out.h),
        targets: DistillTargets {
            grid: s.grid,
            boxes: s.boxes.clone(),
            gt_heatmap: s.gt_heatmap.clone(),
            teacher_heatmap: Heatmap::new(v(out.heatmap))?,
        },
    })
}

/// Student network plus one adaptation module per distilled layer.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentModel {
    pub net: StudentNet,
    pub adapters: Vec<AdaptationModule<f64>>,
    pub layers: Vec<LayerSpec>,
}

impl StudentModel {
    pub fn new(
        teacher: &TeacherNet,
        cfg: &TrainConfig,
        resolution: usize,
        classes: usize,
    ) -> Result<Self> {
        let net = StudentNet::new(
            &mut stream_rng(cfg.seed, STREAM_STUDENT_INIT),
            INPUT_CHANNELS,
            cfg.channels,
            classes,
            cfg.temporal,
        );
        let mut rng = stream_rng(cfg.seed, STREAM_ADAPTER_INIT);
        let layers = cfg.distill_config.layers.clone();
        let adapters = layers
            .iter()
            .map(|l| {
                AdaptationModule::for_shapes(
                    &mut rng,
                    l.adapter,
                    &net.layer_shape(l.layer, resolution),
                    &teacher.layer_shape(l.layer, resolution),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            net,
            adapters,
            layers,
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        let mut v = self.net.params_mut();
        for a in &mut self.adapters {
            v.extend(a.params_mut());
        }
        v
    }

    pub fn state(&self) -> State<f64> {
        let mut s = self.net.state();
        for (l, a) in self.layers.iter().zip(&self.adapters) {
            a.export(&format!("adapter.{}", l.layer.name()), &mut s);
        }
        s
    }

    pub fn load_state(&mut self, state: &HashMap<String, Tensor<f64>>) -> Result<()> {
        self.net.load_state(state)?;
        for (l, a) in self.layers.iter().zip(&mut self.adapters) {
            a.import(&format!("adapter.{}", l.layer.name()), state)?;
        }
        Ok(())
    }

    /// Warped `B0` of the previous frame when the network fuses time.
    pub fn previous_b0(&mut self, seq: &[SceneSample], train: bool) -> Result<Option<Tensor<f64>>> {
        if !self.net.temporal() {
            return Ok(None);
        }
        let [.., prev, cur] = seq else {
            return Ok(None);
        };
        let mut n = self.net.clone();
        let b0 = n.b0_features(&prev.student_input, train)?;
        let (_, h, w) = b0.dims3()?;
        let grid = cur.grid.with_cells(h, w)?;
        Ok(Some(warp_bev(&b0, &prev.ego_pose, &cur.ego_pose, &grid)?))
    }

    /// Adapted student pre-head feature in inference mode, or the upsampled
    /// raw feature when `H` is not distilled.
    fn adapted_h(
        &self,
        g: &mut Graph<f64>,
        out: &NetOutputs,
        teacher_h: &Tensor<f64>,
    ) -> Result<Tensor<f64>> {
        let h = match self.layers.iter().position(|l| l.layer == LayerId::H) {
            Some(i) => {
                let mut a = self.adapters[i].clone();
                a.forward(g, out.h, &mut Bind::infer())?
            }
            None => {
                let f = teacher_h.shape()[1] / g.value(out.h).shape()[1];
                g.upsample_nearest(out.h, f)?
            }
        };
        Ok(g.value(h).clone())
    }
}

/// Checks that the head can be inherited and copies it when enabled.
pub fn inherit_head(student: &mut StudentNet, teacher: &TeacherNet, enabled: bool) -> Result<()> {
    if enabled {
        student.inherit_head(teacher)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalMetrics {
    pub synthetic_ap: f64,
    pub feature_mse_to_teacher: f64,
    pub det_mse: f64,
}

/// Inference-mode metrics of a student on a dataset.
pub fn evaluate(model: &StudentModel, teacher: &TeacherNet, ds: &Dataset) -> Result<EvalMetrics> {
    let views = ds
        .current_frames()
        .map(|s| teacher_view(teacher, s))
        .collect::<Result<Vec<_>>>()?;
    evaluate_with(model, &views, ds)
}

fn evaluate_with(model: &StudentModel, views: &[TeacherView], ds: &Dataset) -> Result<EvalMetrics> {
    let mut m = model.clone();
    let mut preds = Vec::with_capacity(ds.len());
    let mut boxes = Vec::with_capacity(ds.len());
    let (mut fmse, mut dmse) = (0.0, 0.0);
    for (seq, view) in ds.sequences.iter().zip(views) {
        let s = seq.last().expect("non-empty sequence");
        let prev = m.previous_b0(seq, false)?;
        let mut g = Graph::new();
        let x = g.constant(s.student_input.clone());
        let out = m
            .net
            .forward(&mut g, x, prev.as_ref(), &mut Bind::infer())?;
        let d = heatmap_mse(&mut g, out.heatmap, &s.gt_heatmap)?;
        dmse += g.value(d).data()[0];
        let adapted = m.adapted_h(&mut g, &out, &view.h)?;
        fmse += adapted.zip_map(&view.h, |a, b| (a - b) * (a - b))?.sum() / view.h.numel() as f64;
        preds.push(Heatmap::new(g.value(out.heatmap).clone())?);
        boxes.push(s.boxes.clone());
    }
    let n = ds.len() as f64;
    let grid = ds.sequences[0].last().expect("non-empty sequence").grid;
    Ok(EvalMetrics {
        synthetic_ap: synthetic_ap(&preds, &boxes, &grid),
        feature_mse_to_teacher: fmse / n,
        det_mse: dmse / n,
    })
}

/// One row of the per-epoch metrics file.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub det_loss: f64,
    pub l_dist: f64,
    pub feature_mse_to_teacher: f64,
    pub synthetic_ap: f64,
}

/// One row of the per-step, per-layer loss file.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerLossRow {
    pub step: usize,
    pub layer_id: String,
    pub l_feat: f64,
    pub l_attn: f64,
}

#[derive(Clone, Debug)]
pub struct StudentRun {
    pub model: StudentModel,
    pub history: Vec<EpochMetrics>,
    pub layer_losses: Vec<LayerLossRow>,
}

/// Trains a student against a frozen teacher.
///
/// Every step minimizes `det + w·L_dist` when distillation is on and `det`
/// otherwise. The adaptation modules run either way, so a zero-weighted
/// distillation loss leaves training identical to no distillation. Epoch
/// metrics come from `eval` (or the training set when absent).
pub fn train_student(
    train: &Dataset,
    eval: Option<&Dataset>,
    teacher: &TeacherNet,
    cfg: &TrainConfig,
) -> Result<StudentRun> {
    cfg.validate()?;
    let r = check_dataset(train)?;
    let eval = eval.unwrap_or(train);
    check_dataset(eval)?;
    if cfg.temporal && train.config.frames < 2 {
        return bad_config("temporal training needs sequences of at least 2 frames");
    }
    let classes = train.config.classes();
    if teacher.classes != classes {
        return bad_config(format!(
            "teacher predicts {} classes, dataset has {classes}",
            teacher.classes
        ));
    }
    let mut model = StudentModel::new(teacher, cfg, r, classes)?;
    inherit_head(&mut model.net, teacher, cfg.inherit_head)?;
    let train_views = train
        .current_frames()
        .map(|s| teacher_view(teacher, s))
        .collect::<Result<Vec<_>>>()?;
    let eval_views = eval
        .current_frames()
        .map(|s| teacher_view(teacher, s))
        .collect::<Result<Vec<_>>>()?;
    let n = train.len();
    let total = cfg.epochs * n;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut layer_losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let (mut det_sum, mut dist_sum) = (0.0, 0.0);
        for i in shuffled(n, cfg.seed, epoch) {
            let seq = &train.sequences[i];
            let s = seq.last().expect("non-empty sequence");
            let view = &train_views[i];
            let prev = model.previous_b0(seq, true)?;
            let mut g = Graph::new();
            let mut bind = Bind::train();
            let x = g.constant(s.student_input.clone());
            let out = model.net.forward(&mut g, x, prev.as_ref(), &mut bind)?;
            let det = heatmap_mse(&mut g, out.heatmap, &s.gt_heatmap)?;
            let features: Vec<LayerFeatures<f64>> = model
                .layers
                .iter()
                .map(|l| LayerFeatures {
                    teacher: view.layer(l.layer).clone(),
                    student: out.layer(l.layer),
                })
                .collect();
            let dist = total_distill_loss(
                &mut g,
                &features,
                &mut model.adapters,
                &view.targets,
                &cfg.distill_config,
                &mut bind,
                None,
            )?;
            let loss = if cfg.distill {
                let w = g.scale(dist.total, cfg.distill_weight);
                g.add(det, w)?
            } else {
                det
            };
            let dv = g.value(det).data()[0];
            let lv = g.value(loss).data()[0];
            ensure_finite(lv, "student loss", epoch, step)?;
            det_sum += dv;
            if cfg.distill {
                dist_sum += g.value(dist.total).data()[0];
                for (layer, l_feat, l_attn) in dist.breakdown(&g) {
                    layer_losses.push(LayerLossRow {
                        step,
                        layer_id: layer.name().into(),
                        l_feat,
                        l_attn,
                    });
                }
            }
            let grads = g.backward(loss)?;
            let lr = learning_rate(cfg, step, total);
            opt.step(model.params_mut(), &grads_for(&grads, &bind.ids), lr)?;
            step += 1;
        }
        let m = evaluate_with(&model, &eval_views, eval)?;
        history.push(EpochMetrics {
            epoch,
            det_loss: det_sum / n as f64,
            l_dist: dist_sum / n as f64,
            feature_mse_to_teacher: m.feature_mse_to_teacher,
            synthetic_ap: m.synthetic_ap,
        });
    }
    Ok(StudentRun {
        model,
        history,
        layer_losses,
    })
}
