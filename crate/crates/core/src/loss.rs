//! Weighted feature imitation, attention imitation and their multi-layer sum.

use crate::attention::{pool_abs_mean, AdaptationModule, AdapterKind, AttentionMaps};
use crate::error::{bad_config, invalid, Result};
use crate::geometry::{rasterize_boxes, BevBox, GridSpec, Heatmap};
use crate::nn::Bind;
use crate::region::{build_mask, compute_fp_cells, decompose, RegionPartition};
use crate::scalar::Scalar;
use crate::scaling::compute_scaling;
use crate::tensor::{Graph, NodeId, Tensor};

/// Named BEV layers of the toy encoders, earliest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerId {
    B0,
    B1,
    B2,
    /// Pre-head layer.
    H,
}

impl LayerId {
    pub fn name(self) -> &'static str {
        match self {
            LayerId::B0 => "B0",
            LayerId::B1 => "B1",
            LayerId::B2 => "B2",
            LayerId::H => "H",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "B0" => Ok(LayerId::B0),
            "B1" => Ok(LayerId::B1),
            "B2" => Ok(LayerId::B2),
            "H" => Ok(LayerId::H),
            _ => bad_config(format!("unknown layer {s:?} (expected B0, B1, B2 or H)")),
        }
    }
}

/// One distilled teacher/student layer pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub layer: LayerId,
    pub adapter: AdapterKind,
    pub include_fp: bool,
}

/// Switches for the individual weighting terms. With everything off the
/// feature loss is plain imitation: `M = M̄ = S = A = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Components {
    pub mask: bool,
    pub scaling: bool,
    pub attention: bool,
    pub fp: bool,
}

impl Components {
    pub const FULL: Self = Self {
        mask: true,
        scaling: true,
        attention: true,
        fp: true,
    };
    pub const PLAIN: Self = Self {
        mask: false,
        scaling: false,
        attention: false,
        fp: false,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig<T> {
    pub alpha: T,
    pub beta: T,
    pub lambda: T,
    pub eta: T,
    pub tau: T,
    pub gamma: T,
    pub layers: Vec<LayerSpec>,
    pub components: Components,
}

/// Encoder layers B1, B2 through intermediate adapters, pre-head layer with FP
/// regions through the pre-head adapter.
pub fn default_layers() -> Vec<LayerSpec> {
    vec![
        LayerSpec {
            layer: LayerId::B1,
            adapter: AdapterKind::Intermediate,
            include_fp: false,
        },
        LayerSpec {
            layer: LayerId::B2,
            adapter: AdapterKind::Intermediate,
            include_fp: false,
        },
        LayerSpec {
            layer: LayerId::H,
            adapter: AdapterKind::Prehead,
            include_fp: true,
        },
    ]
}

impl<T: Scalar> Default for DistillConfig<T> {
    fn default() -> Self {
        Self {
            alpha: T::lit(6e-3),
            beta: T::lit(4e-2),
            lambda: T::lit(2.5e-3),
            eta: T::lit(20.0),
            tau: T::lit(0.5),
            gamma: T::lit(0.1),
            layers: default_layers(),
            components: Components::FULL,
        }
    }
}

impl<T: Scalar> DistillConfig<T> {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("eta", self.eta),
        ] {
            if !(v >= T::zero()) || !v.is_finite() {
                return bad_config(format!(
                    "{name} must be a finite non-negative number, got {v}"
                ));
            }
        }
        if !(self.tau > T::zero()) || !self.tau.is_finite() {
            return bad_config(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.gamma > T::zero() && self.gamma < T::one()) {
            return bad_config(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.layer == LayerId::B0 {
                return bad_config("layer B0 must not be distilled");
            }
            if l.include_fp && l.layer != LayerId::H {
                return bad_config(format!(
                    "FP regions are only allowed on the pre-head layer, not {}",
                    l.layer.name()
                ));
            }
            if self.layers[..i].iter().any(|o| o.layer == l.layer) {
                return bad_config(format!("layer {} configured twice", l.layer.name()));
            }
        }
        Ok(())
    }
}

/// Scene-level inputs to the weight maps, at the finest grid.
#[derive(Clone, Debug)]
pub struct DistillTargets<T> {
    pub grid: GridSpec<T>,
    pub boxes: Vec<BevBox<T>>,
    pub gt_heatmap: Heatmap<T>,
    pub teacher_heatmap: Heatmap<T>,
}

/// `M`, `M̄`, `S` and `A` at one layer's resolution, plus the partition.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMaps<T> {
    pub m: Tensor<T>,
    pub m_bar: Tensor<T>,
    pub s: Tensor<T>,
    pub a: Tensor<T>,
    pub partition: RegionPartition,
    pub attention: AttentionMaps<T>,
}

impl<T: Scalar> WeightMaps<T> {
    /// Per-cell weight of the squared residual, `α·M·S·A + β·M̄·S·A`.
    pub fn residual_weight(&self, alpha: T, beta: T) -> Result<Tensor<T>> {
        let sa = self.s.zip_map(&self.a, |s, a| s * a)?;
        let mw = self.m.zip_map(&self.m_bar, |m, mb| alpha * m + beta * mb)?;
        mw.zip_map(&sa, |w, sa| w * sa)
    }
}

/// Builds the weight maps for one layer pair. Boxes are re-rasterized at the
/// layer's resolution; heatmaps are max-pooled to it.
pub fn layer_weight_maps<T: Scalar>(
    targets: &DistillTargets<T>,
    f_teacher: &Tensor<T>,
    f_student_adapted: &Tensor<T>,
    include_fp: bool,
    cfg: &DistillConfig<T>,
) -> Result<WeightMaps<T>> {
    let (_, h, w) = f_teacher.dims3()?;
    if f_student_adapted.shape() != f_teacher.shape() {
        return bad_config(format!(
            "adapted student feature {:?} does not match teacher feature {:?}",
            f_student_adapted.shape(),
            f_teacher.shape()
        ));
    }
    let (gh, gw) = targets.grid.shape();
    if gh % h != 0 || gw % w != 0 || gh / h != gw / w {
        return bad_config(format!(
            "layer resolution {h}×{w} does not divide the scene grid {gh}×{gw}"
        ));
    }
    let grid = targets.grid.with_cells(h, w)?;
    let h_t = targets.teacher_heatmap.at_resolution(h, w)?;
    let h_g = targets.gt_heatmap.at_resolution(h, w)?;
    let owners = rasterize_boxes(&targets.boxes, &grid);
    let fp = compute_fp_cells(&h_t, &h_g, cfg.gamma)?;
    let partition = decompose(&owners, &fp, &h_t, cfg.gamma)?;
    let c = cfg.components;
    let ones = Tensor::full(&[h, w], T::one());
    let (m, m_bar) = if c.mask {
        let mask = build_mask(&partition, cfg.eta, include_fp && c.fp)?;
        (mask.m, mask.m_bar)
    } else {
        (ones.clone(), ones.clone())
    };
    let s = if c.scaling {
        compute_scaling(&partition, &targets.boxes, &grid)?
    } else {
        ones.clone()
    };
    let attention = AttentionMaps::compute(f_teacher, f_student_adapted, cfg.tau)?;
    let a = if c.attention {
        attention.a.clone()
    } else {
        ones
    };
    Ok(WeightMaps {
        m,
        m_bar,
        s,
        a,
        partition,
        attention,
    })
}

/// `α Σ M·S·A·(F_t − F_s)² + β Σ M̄·S·A·(F_t − F_s)²`, summed over channels
/// and cells. The weights are constants.
pub fn feature_imitation_loss<T: Scalar>(
    g: &mut Graph<T>,
    f_teacher: NodeId,
    f_student: NodeId,
    maps: &WeightMaps<T>,
    alpha: T,
    beta: T,
) -> Result<NodeId> {
    let d = g.sub(f_teacher, f_student)?;
    let sq = g.square(d);
    let w = maps.residual_weight(alpha, beta)?;
    let weighted = g.mul_spatial(sq, &w)?;
    Ok(g.sum(weighted))
}

/// `Σ |P_t − P_s|` over cells.
pub fn attention_imitation_loss<T: Scalar>(
    g: &mut Graph<T>,
    p_teacher: NodeId,
    p_student: NodeId,
) -> Result<NodeId> {
    let d = g.sub(p_teacher, p_student)?;
    let a = g.abs(d);
    Ok(g.sum(a))
}

/// Teacher features (constants) and the matching raw student node of one pair.
pub struct LayerFeatures<T> {
    pub teacher: Tensor<T>,
    pub student: NodeId,
}

pub struct LayerLoss<T> {
    pub layer: LayerId,
    pub l_feat: NodeId,
    pub l_attn: NodeId,
    /// `l_feat + λ·l_attn`.
    pub total: NodeId,
    pub adapted: NodeId,
    pub maps: WeightMaps<T>,
}

pub struct DistillOutput<T> {
    pub total: NodeId,
    pub layers: Vec<LayerLoss<T>>,
}

impl<T: Scalar> DistillOutput<T> {
    /// `(layer, l_feat, l_attn)` values.
    pub fn breakdown(&self, g: &Graph<T>) -> Vec<(LayerId, T, T)> {
        self.layers
            .iter()
            .map(|l| {
                (
                    l.layer,
                    g.value(l.l_feat).data()[0],
                    g.value(l.l_attn).data()[0],
                )
            })
            .collect()
    }
}

/// Records the summed distillation loss over the configured layer pairs.
///
/// `frozen` supplies precomputed weight maps; otherwise they are derived from
/// the current teacher and adapted student values.
pub fn total_distill_loss<T: Scalar>(
    g: &mut Graph<T>,
    features: &[LayerFeatures<T>],
    adapters: &mut [AdaptationModule<T>],
    targets: &DistillTargets<T>,
    cfg: &DistillConfig<T>,
    bind: &mut Bind,
    frozen: Option<&[WeightMaps<T>]>,
) -> Result<DistillOutput<T>> {
    cfg.validate()?;
    if features.len() != cfg.layers.len() || adapters.len() != cfg.layers.len() {
        return bad_config(format!(
            "{} layer pairs configured but {} feature pairs and {} adapters supplied",
            cfg.layers.len(),
            features.len(),
            adapters.len()
        ));
    }
    if frozen.is_some_and(|f| f.len() != cfg.layers.len()) {
        return invalid("one frozen weight map set per layer pair required");
    }
    let mut layers = Vec::with_capacity(features.len());
    let mut total: Option<NodeId> = None;
    for (i, ((spec, feat), adapter)) in cfg
        .layers
        .iter()
        .zip(features)
        .zip(adapters.iter_mut())
        .enumerate()
    {
        if adapter.kind != spec.adapter {
            return bad_config(format!(
                "layer {} expects a {} adapter",
                spec.layer.name(),
                spec.adapter.name()
            ));
        }
        let adapted = adapter.forward(g, feat.student, bind)?;
        let maps = match frozen {
            Some(f) => f[i].clone(),
            None => layer_weight_maps(
                targets,
                &feat.teacher,
                g.value(adapted),
                spec.include_fp,
                cfg,
            )?,
        };
        if g.value(adapted).shape() != feat.teacher.shape() {
            return bad_config(format!(
                "layer {}: adapted student shape mismatch",
                spec.layer.name()
            ));
        }
        let ft = g.constant(feat.teacher.clone());
        let l_feat = feature_imitation_loss(g, ft, adapted, &maps, cfg.alpha, cfg.beta)?;
        let p_t = g.constant(pool_abs_mean(&feat.teacher)?);
        let p_s = g.pool_abs_mean(adapted)?;
        let l_attn = attention_imitation_loss(g, p_t, p_s)?;
        let scaled = g.scale(l_attn, cfg.lambda);
        let layer_total = g.add(l_feat, scaled)?;
        total = Some(match total {
            Some(t) => g.add(t, layer_total)?,
            None => layer_total,
        });
        layers.push(LayerLoss {
            layer: spec.layer,
            l_feat,
            l_attn,
            total: layer_total,
            adapted,
            maps,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    Ok(DistillOutput { total, layers })
}

/// `Σ_n (L_feat_n + λ·L_attn_n)` from per-layer values.
pub fn combine_layer_losses<T: Scalar>(l_feat: &[T], l_attn: &[T], lambda: T) -> Result<T> {
    if l_feat.len() != l_attn.len() {
        return invalid("per-layer loss lists differ in length");
    }
    Ok(l_feat
        .iter()
        .zip(l_attn)
        .fold(T::zero(), |acc, (&f, &a)| acc + (f + lambda * a)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::Region;

    fn maps_1x1(m: f64, m_bar: f64) -> WeightMaps<f64> {
        let one = Tensor::full(&[1, 1], 1.0);
        let f = Tensor::full(&[1, 1, 1], 1.0);
        WeightMaps {
            m: Tensor::full(&[1, 1], m),
            m_bar: Tensor::full(&[1, 1], m_bar),
            s: one.clone(),
            a: one,
            partition: RegionPartition {
                height: 1,
                width: 1,
                label: vec![Region::TrueNegative],
                owner: vec![None],
            },
            attention: AttentionMaps::compute(&f, &f, 0.5).unwrap(),
        }
    }

    fn feat_loss(ft: f64, fs: f64, maps: &WeightMaps<f64>) -> f64 {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[1, 1, 1], ft));
        let b = g.constant(Tensor::full(&[1, 1, 1], fs));
        let l = feature_imitation_loss(&mut g, a, b, maps, 6e-3, 4e-2).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn feature_loss_examples() {
        assert_eq!(feat_loss(1.0, 0.0, &maps_1x1(1.0, 0.0)), 6e-3);
        assert_eq!(feat_loss(1.0, 0.0, &maps_1x1(0.0, 1.0)), 4e-2);
        assert_eq!(feat_loss(0.7, 0.7, &maps_1x1(1.0, 0.0)), 0.0);
    }

    fn attn(pt: &[f64], ps: &[f64]) -> f64 {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, pt.len()], pt.to_vec()).unwrap());
        let b = g.constant(Tensor::new(vec![1, ps.len()], ps.to_vec()).unwrap());
        let l = attention_imitation_loss(&mut g, a, b).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn attention_loss_examples() {
        assert_eq!(attn(&[1.0, 0.0], &[0.0, 1.0]), 2.0);
        assert_eq!(attn(&[0.3, 0.4], &[0.3, 0.4]), 0.0);
        let base = attn(&[0.5, 2.0, 1.0], &[1.0, 0.25, 3.0]);
        assert!((attn(&[1.5, 6.0, 3.0], &[3.0, 0.75, 9.0]) - 3.0 * base).abs() < 1e-12);
    }

    #[test]
    fn combine_example() {
        let v: f64 = combine_layer_losses(&[0.4, 0.6], &[2.0, 1.0], 2.5e-3).unwrap();
        assert!((v - 1.0075).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut c = DistillConfig::<f64>::default();
        assert!(c.validate().is_ok());
        c.layers.push(LayerSpec {
            layer: LayerId::B0,
            adapter: AdapterKind::Intermediate,
            include_fp: false,
        });
        assert!(matches!(c.validate(), Err(crate::Error::InvalidConfig(_))));
        let mut c = DistillConfig::<f64>::default();
        c.layers[0].include_fp = true;
        assert!(c.validate().is_err());
        let c = DistillConfig::<f64> {
            tau: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn defaults() {
        let c = DistillConfig::<f64>::default();
        assert_eq!((c.eta, c.tau, c.gamma), (20.0, 0.5, 0.1));
        assert_eq!((c.alpha, c.beta, c.lambda), (6e-3, 4e-2, 2.5e-3));
    }
}
