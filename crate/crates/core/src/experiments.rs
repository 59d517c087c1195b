//! Experiment configuration and the drivers behind the reported comparisons:
//! the main pipeline, the ablation over seeds, the entropy-minimization and
//! noisy-ground-truth sweeps, and the filtering head-to-head.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{self, EmConfig, EmMode, NoisyGtConfig};
use crate::distill::{self, DistillConfig, DistillError, PipelineOutcome, PseudoGtVariant, Variant};
use crate::evalkit::{self, EvalError};
use crate::locmodel::{ModelError, ModelParams, TrainConfig};
use crate::synthcv::{self, DomainSpec, SplitCounts, SynthError, World, WorldConfig, WorldGeometry};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid experiment config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub init_seed: u64,
    /// Standard deviation multiplier of the random initialization.
    pub init_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    /// Label width of source supervision, finest-level cells.
    pub sigma: f64,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmSweepConfig {
    pub omegas: Vec<f64>,
    pub mode: EmMode,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisySweepConfig {
    /// Per-axis offset bounds, world meters.
    pub bounds_m: Vec<f64>,
    pub seed: u64,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    /// Seed offsets of the ablation runs.
    pub ablation_seeds: Vec<u64>,
    /// Seed offsets of the filtering head-to-head.
    pub filter_seeds: Vec<u64>,
}

/// Every knob of a reproducible experiment, seeds included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub em: EmSweepConfig,
    pub noisy: NoisySweepConfig,
    pub suite: SuiteConfig,
}

const SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

fn shift(seed: u64, offset: u64) -> u64 {
    seed.wrapping_add(offset.wrapping_mul(SEED_STRIDE))
}

impl ExperimentConfig {
    /// The reference gapped world and hyperparameters.
    pub fn reference() -> Self {
        let channels = 8;
        let (weak, strong) = (0.75, 1.25);
        let mut source = DomainSpec::clean("source", channels, 3.0, 101);
        source.gain = [vec![weak; 4], vec![strong; 4]].concat();
        source.noise_std = 0.4;
        let mut target = DomainSpec::clean("target", channels, 3.0, 102);
        target.gain = [vec![strong; 4], vec![weak; 4]].concat();
        target.noise_std = 0.4;
        let student = TrainConfig {
            lr: 0.03,
            momentum: 0.9,
            epochs: 10,
            batch: 32,
            k_prime: 3,
            seed: 303,
            grad_clip: None,
        };
        Self {
            world: WorldConfig {
                source,
                target,
                geometry: WorldGeometry {
                    rows: 64,
                    cols: 64,
                    levels: 3,
                },
                counts: SplitCounts {
                    teacher_train: 1500,
                    source_val: 300,
                    adapt_train: 2000,
                    validation: 286,
                    test: 572,
                },
                scale_s: 0.5,
                map_factor: 4,
            },
            model: ModelConfig {
                embed_dim: 8,
                init_seed: 7,
                init_scale: 0.5,
            },
            teacher: TeacherConfig {
                sigma: 2.0,
                train: TrainConfig {
                    lr: 0.01,
                    momentum: 0.9,
                    epochs: 8,
                    batch: 32,
                    k_prime: 3,
                    seed: 202,
                    grad_clip: None,
                },
            },
            distill: DistillConfig {
                sigma: 4.0,
                t_percent: 80.0,
                student: student.clone(),
                validation_stopping: false,
            },
            em: EmSweepConfig {
                omegas: vec![0.0, 0.01, 0.1, 1.0],
                mode: EmMode::Joint,
                train: TrainConfig {
                    seed: 404,
                    ..student.clone()
                },
            },
            noisy: NoisySweepConfig {
                bounds_m: vec![0.0, 1.0, 2.5, 5.0, 10.0],
                seed: 505,
                train: TrainConfig {
                    seed: 606,
                    ..student
                },
            },
            suite: SuiteConfig {
                ablation_seeds: vec![0, 1, 2, 3, 4],
                filter_seeds: vec![0, 1, 2],
            },
        }
    }

    /// Same experiment with every seed moved by `offset`; offset 0 is the identity.
    pub fn reseeded(&self, offset: u64) -> Self {
        let mut c = self.clone();
        c.world.source.seed = shift(c.world.source.seed, offset);
        c.world.target.seed = shift(c.world.target.seed, offset);
        c.model.init_seed = shift(c.model.init_seed, offset);
        for t in [
            &mut c.teacher.train,
            &mut c.distill.student,
            &mut c.em.train,
            &mut c.noisy.train,
        ] {
            t.seed = shift(t.seed, offset);
        }
        c.noisy.seed = shift(c.noisy.seed, offset);
        c
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.world.validate()?;
        if self.model.embed_dim == 0 {
            return Err(ExperimentError::Config("embed_dim must be positive".into()));
        }
        if !(self.model.init_scale.is_finite() && self.model.init_scale >= 0.0) {
            return Err(ExperimentError::Config("init_scale must be finite and >= 0".into()));
        }
        let k = self.world.geometry.levels;
        for (name, t) in [
            ("teacher", &self.teacher.train),
            ("student", &self.distill.student),
            ("em", &self.em.train),
            ("noisy", &self.noisy.train),
        ] {
            if t.k_prime == 0 || t.k_prime > k {
                return Err(ExperimentError::Config(format!("{name}.k_prime must be in 1..={k}")));
            }
            if !(t.lr.is_finite() && t.lr >= 0.0) || t.batch == 0 {
                return Err(ExperimentError::Config(format!("{name}: lr must be >= 0 and batch > 0")));
            }
        }
        if !(self.distill.t_percent > 0.0 && self.distill.t_percent <= 100.0) {
            return Err(ExperimentError::Config("t_percent must be in (0, 100]".into()));
        }
        for s in [self.teacher.sigma, self.distill.sigma] {
            if !(s >= 0.0) {
                return Err(ExperimentError::Config("sigma must be >= 0".into()));
            }
        }
        if self.em.omegas.iter().any(|w| !(*w >= 0.0)) {
            return Err(ExperimentError::Config("omega must be >= 0".into()));
        }
        if self.noisy.bounds_m.iter().any(|b| !(*b >= 0.0)) {
            return Err(ExperimentError::Config("noise bound must be >= 0".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        synthcv::config_hash(self)
    }

    pub fn init_params(&self) -> Result<ModelParams, ModelError> {
        ModelParams::random(
            self.world.geometry.levels,
            self.world.channels(),
            self.model.embed_dim,
            self.model.init_seed,
            self.model.init_scale,
        )
    }
}

/// Teacher trained from the configured initialization.
pub fn teacher(cfg: &ExperimentConfig, world: &World) -> Result<(ModelParams, usize), ExperimentError> {
    let out = distill::train_teacher(world, &cfg.init_params()?, cfg.teacher.sigma, &cfg.teacher.train)?;
    Ok((out.params, out.selected_epoch))
}

/// World, teacher and the requested student variants.
pub fn run_pipeline(cfg: &ExperimentConfig, variants: &[Variant]) -> Result<(World, PipelineOutcome), ExperimentError> {
    cfg.validate()?;
    let world = synthcv::generate_world(&cfg.world)?;
    let (teacher, epoch) = teacher(cfg, &world)?;
    let mut out = distill::run_students(&world, &teacher, &cfg.distill, variants)?;
    out.teacher_eval.selected_epoch = epoch;
    Ok((world, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    /// Test mean error per variant, teacher included.
    pub test_mean: BTreeMap<Variant, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub runs: Vec<AblationRun>,
    pub median: BTreeMap<Variant, f64>,
}

/// Median of a non-empty sample (mean of the two middle values for even length).
pub fn median(values: &[f64]) -> f64 {
    evalkit::summarize(values).map(|s| s.median).unwrap_or(f64::NAN)
}

pub fn ablation(cfg: &ExperimentConfig) -> Result<AblationResult, ExperimentError> {
    let mut runs = Vec::new();
    for &seed in &cfg.suite.ablation_seeds {
        let (_, out) = run_pipeline(&cfg.reseeded(seed), &Variant::STUDENTS)?;
        let test_mean = [Variant::Teacher]
            .into_iter()
            .chain(Variant::STUDENTS)
            .filter_map(|v| out.test_mean(v).map(|m| (v, m)))
            .collect();
        runs.push(AblationRun { seed, test_mean });
    }
    let mut median_by = BTreeMap::new();
    for v in [Variant::Teacher].into_iter().chain(Variant::STUDENTS) {
        let xs: Vec<f64> = runs.iter().filter_map(|r| r.test_mean.get(&v).copied()).collect();
        median_by.insert(v, median(&xs));
    }
    Ok(AblationResult { runs, median: median_by })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub x: f64,
    pub validation_mean: f64,
    pub test_mean: f64,
}

/// Entropy minimization from the teacher for every `ω`.
pub fn em_sweep(cfg: &ExperimentConfig, world: &World, teacher: &ModelParams) -> Result<Vec<SweepPoint>, ExperimentError> {
    cfg.em
        .omegas
        .iter()
        .map(|&omega| {
            let em = EmConfig {
                omega,
                mode: cfg.em.mode,
                sigma: cfg.teacher.sigma,
            };
            let out = baselines::train_entropy_min(
                teacher,
                Some(&world.teacher_train),
                &world.adapt_train,
                &em,
                &cfg.em.train,
                None,
            )?;
            Ok(SweepPoint {
                x: omega,
                validation_mean: evalkit::mean_error(&out.params, &world.validation)?,
                test_mean: evalkit::mean_error(&out.params, &world.test)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyPoint {
    pub bound_m: f64,
    pub validation_mean: f64,
    pub test_mean: f64,
    pub clamped: usize,
}

/// Supervised finetuning from the teacher on corrupted target ground truth.
pub fn noisy_sweep(cfg: &ExperimentConfig, world: &World, teacher: &ModelParams) -> Result<Vec<NoisyPoint>, ExperimentError> {
    let target = world.adapt_train.unlock_gt();
    cfg.noisy
        .bounds_m
        .iter()
        .map(|&bound_m| {
            let noisy = NoisyGtConfig {
                bound_m,
                seed: cfg.noisy.seed,
                sigma: cfg.distill.sigma,
            };
            let (out, report) = baselines::train_noisy_supervised(teacher, &target, &noisy, &cfg.noisy.train, None)?;
            Ok(NoisyPoint {
                bound_m,
                validation_mean: evalkit::mean_error(&out.params, &world.validation)?,
                test_mean: evalkit::mean_error(&out.params, &world.test)?,
                clamped: report.clamped,
            })
        })
        .collect()
}

/// Number of adjacent decreases in a sequence.
pub fn inversions(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] < w[0]).count()
}

/// Smallest swept bound whose noisy-supervised test error exceeds `reference`.
pub fn crossover(points: &[NoisyPoint], reference: f64) -> Option<f64> {
    points.iter().find(|p| p.test_mean > reference).map(|p| p.bound_m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDuel {
    pub seed: u64,
    pub distance_test_mean: f64,
    pub entropy_test_mean: f64,
}

/// Distance-based vs entropy-based filtering at the same `T`, one run per seed.
pub fn filter_head_to_head(cfg: &ExperimentConfig) -> Result<Vec<FilterDuel>, ExperimentError> {
    let mut out = Vec::new();
    for &seed in &cfg.suite.filter_seeds {
        let c = cfg.reseeded(seed);
        let world = synthcv::generate_world(&c.world)?;
        let (teacher, _) = teacher(&c, &world)?;
        let adapt = &world.adapt_train;
        let pseudo = distill::make_pseudo_gt(&teacher, adapt, PseudoGtVariant::ModeBased, c.distill.sigma)?;
        let aux = distill::train_aux_student(&teacher, adapt, &pseudo, &c.distill.student, None)?;
        let by_distance = distill::filter_outliers(&teacher, &aux.params, adapt, c.distill.t_percent)?;
        let by_entropy = baselines::filter_by_entropy(&teacher, adapt, c.distill.t_percent)?;
        let mut means = Vec::new();
        for report in [&by_distance, &by_entropy] {
            let student = distill::train_final_student(&teacher, adapt, &pseudo, report, &c.distill.student, None)?;
            means.push(evalkit::mean_error(&student.params, &world.test)?);
        }
        out.push(FilterDuel {
            seed,
            distance_test_mean: means[0],
            entropy_test_mean: means[1],
        });
    }
    Ok(out)
}
