//! Strict TOML experiment configuration.

use std::path::{Path, PathBuf};

use distillbev::attention::AdapterKind;
use distillbev::harness::TrainConfig;
use distillbev::loss::{Components, DistillConfig, LayerId, LayerSpec};
use distillbev::sim::SceneConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds dataset generation and every network initialization.
    pub seed: u64,
    /// Root for every default input and output path.
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub scene: SceneConfig,
    pub train: TrainSection,
    pub distill: DistillSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Leading scenes of the dataset used for training.
    pub train_scenes: usize,
    /// Scenes following the training split used for evaluation.
    pub eval_scenes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub cosine: bool,
    pub channels: usize,
    pub distill: bool,
    pub distill_weight: f64,
    pub inherit_head: bool,
    pub temporal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub eta: f64,
    pub tau: f64,
    pub gamma: f64,
    pub mask: bool,
    pub scaling: bool,
    pub attention: bool,
    pub fp: bool,
    pub layers: Vec<LayerEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    /// `B1`, `B2` or `H`.
    pub layer: String,
    /// `intermediate` or `prehead`.
    pub adapter: String,
    #[serde(default)]
    pub include_fp: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            data: DataSection::default(),
            scene: SceneConfig::default(),
            train: TrainSection::default(),
            distill: DistillSection::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_scenes: 256,
            eval_scenes: 64,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            lr: t.lr,
            weight_decay: t.weight_decay,
            cosine: t.cosine,
            channels: t.channels,
            distill: t.distill,
            distill_weight: t.distill_weight,
            inherit_head: t.inherit_head,
            temporal: t.temporal,
        }
    }
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::<f64>::default();
        Self {
            alpha: d.alpha,
            beta: d.beta,
            lambda: d.lambda,
            eta: d.eta,
            tau: d.tau,
            gamma: d.gamma,
            mask: d.components.mask,
            scaling: d.components.scaling,
            attention: d.components.attention,
            fp: d.components.fp,
            layers: d
                .layers
                .iter()
                .map(|l| LayerEntry {
                    layer: l.layer.name().into(),
                    adapter: l.adapter.name().into(),
                    include_fp: l.include_fp,
                })
                .collect(),
        }
    }
}

fn parse_adapter(s: &str) -> Result<AdapterKind, Failure> {
    match s {
        "prehead" => Ok(AdapterKind::Prehead),
        "intermediate" => Ok(AdapterKind::Intermediate),
        _ => Err(Failure::Config(format!(
            "unknown adapter {s:?} (expected prehead or intermediate)"
        ))),
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
            }
        };
        cfg.scene.validate()?;
        cfg.train_config()?.validate()?;
        Ok(cfg)
    }

    pub fn default_toml() -> String {
        toml::to_string(&Self::default()).expect("default config serializes")
    }

    pub fn distill_config(&self) -> Result<DistillConfig<f64>, Failure> {
        let d = &self.distill;
        let layers = d
            .layers
            .iter()
            .map(|l| {
                Ok(LayerSpec {
                    layer: LayerId::parse(&l.layer)?,
                    adapter: parse_adapter(&l.adapter)?,
                    include_fp: l.include_fp,
                })
            })
            .collect::<Result<Vec<_>, Failure>>()?;
        Ok(DistillConfig {
            alpha: d.alpha,
            beta: d.beta,
            lambda: d.lambda,
            eta: d.eta,
            tau: d.tau,
            gamma: d.gamma,
            layers,
            components: Components {
                mask: d.mask,
                scaling: d.scaling,
                attention: d.attention,
                fp: d.fp,
            },
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig, Failure> {
        let t = &self.train;
        Ok(TrainConfig {
            epochs: t.epochs,
            lr: t.lr,
            weight_decay: t.weight_decay,
            cosine: t.cosine,
            seed: self.seed,
            channels: t.channels,
            distill: t.distill,
            distill_weight: t.distill_weight,
            inherit_head: t.inherit_head,
            temporal: t.temporal,
            distill_config: self.distill_config()?,
        })
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.out_dir.join("teacher.dbw")
    }

    pub fn run_dir(&self, distill: bool) -> PathBuf {
        self.out_dir
            .join(if distill { "distill-on" } else { "distill-off" })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let text = ExperimentConfig::default_toml();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, ExperimentConfig::default());
        assert_eq!(
            back.distill_config().unwrap(),
            DistillConfig::<f64>::default()
        );
    }

    #[test]
    fn typo_is_rejected() {
        let err = toml::from_str::<ExperimentConfig>("[distill]\ngama = 0.2\n").unwrap_err();
        assert!(err.to_string().contains("gama"));
        assert!(toml::from_str::<ExperimentConfig>("[scene]\ncels = 3\n").is_err());
        assert!(toml::from_str::<ExperimentConfig>("sed = 3\n").is_err());
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let cfg: ExperimentConfig = toml::from_str("seed = 4\n[train]\nepochs = 2\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.lr, 2e-4);
        assert_eq!(cfg.distill.eta, 20.0);
    }
}
