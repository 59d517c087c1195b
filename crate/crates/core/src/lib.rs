//! Weakly-supervised self-distillation for fine-grained cross-view
//! localization on synthetic worlds.
//!
//! Modules build on each other bottom-up: [`gridmap`] (heat-map algebra),
//! [`synthcv`] (world generator), [`locmodel`] (matcher and training),
//! [`evalkit`] (metrics), [`distill`] (the pipeline) and [`baselines`].

pub mod baselines;
pub mod distill;
pub mod evalkit;
pub mod experiments;
pub mod gridmap;
pub mod locmodel;
pub mod synthcv;

pub use distill::{DistillConfig, FilterReport, PipelineOutcome, PseudoGtVariant, Variant};
pub use evalkit::{ComparisonRecord, EvalResult};
pub use gridmap::{GridLoc, HeatMap, ScoreGrid};
pub use locmodel::{ModelParams, TrainConfig};
pub use synthcv::{CrossViewPair, DatasetSplit, DomainSpec, SplitRole, World, WorldConfig};
