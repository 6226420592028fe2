//! Cross-modal BEV feature distillation at desk scale.
//!
//! A teacher network sees a clean BEV raster, a student sees a blurred,
//! half-resolution one, and the student is trained to imitate the teacher's
//! intermediate features under region-aware weights:
//!
//! - [`region`] splits the grid into TP/FN/FP/TN cells and builds the mask `M`,
//! - [`scaling`] equalizes objects of different sizes (`S`),
//! - [`attention`] derives temperature-softmax spatial attention (`A`) and the
//!   student adaptation modules,
//! - [`loss`] assembles per-layer feature and attention imitation losses.
//!
//! Everything runs on the small reverse-mode engine in [`tensor`]. The
//! [`sim`] module generates the synthetic benchmark and [`harness`] trains
//! and evaluates the toy detectors.
//!
//! The numeric core is generic over [`Scalar`]; the aliases below fix it to `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod scalar;
pub mod tensor;

pub mod attention;
pub mod geometry;
pub mod harness;
pub mod loss;
pub mod nn;
pub mod region;
pub mod scaling;
pub mod sim;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = tensor::Graph<f64>;
pub type GridSpec = geometry::GridSpec<f64>;
pub type BevBox = geometry::BevBox<f64>;
pub type Heatmap = geometry::Heatmap<f64>;
pub type EgoPose = geometry::EgoPose<f64>;
pub type RegionMask = region::RegionMask<f64>;
pub type AttentionMaps = attention::AttentionMaps<f64>;
pub type AdaptationModule = attention::AdaptationModule<f64>;
pub type DistillConfig = loss::DistillConfig<f64>;
pub type DistillTargets = loss::DistillTargets<f64>;
pub type WeightMaps = loss::WeightMaps<f64>;
