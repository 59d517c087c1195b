//! Comparison methods: entropy minimization, supervised finetuning on noisy
//! ground truth, and entropy-ranked sample filtering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{self, DistillError, FilterCriterion, FilterReport};
use crate::gridmap::{self, GridLoc};
use crate::locmodel::{
    self, EntropyObjective, GtLabels, LabelObjective, ModelError, ModelParams, Objective, TrainConfig, TrainOutcome,
};
use crate::synthcv::DatasetSplit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmMode {
    /// Source-supervised loss plus target entropy.
    Joint,
    /// Target entropy only.
    FinetuneOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    /// Entropy weight, nats.
    pub omega: f64,
    pub mode: EmMode,
    /// Label width for the source-supervised stream.
    pub sigma: f64,
}

/// Trains with `ω · entropy(H_K)` on unlabeled target pairs.
///
/// In joint mode every step takes one source batch and one target batch; with
/// `ω = 0` the target stream is dropped and the run is plain source training.
pub fn train_entropy_min(
    init: &ModelParams,
    source: Option<&DatasetSplit>,
    target: &DatasetSplit,
    em: &EmConfig,
    cfg: &TrainConfig,
    validation: Option<&DatasetSplit>,
) -> Result<TrainOutcome, ModelError> {
    if !(em.omega >= 0.0) {
        return Err(ModelError::Config(format!("omega must be >= 0, got {}", em.omega)));
    }
    let entropy = EntropyObjective {
        split: target,
        weight: em.omega,
    };
    match em.mode {
        EmMode::Joint => {
            let source = source.ok_or_else(|| ModelError::Config("joint mode needs a labeled source split".into()))?;
            let labels = GtLabels::new(source, em.sigma)?;
            let supervised = LabelObjective {
                split: source,
                labels: &labels,
                k_prime: cfg.k_prime,
            };
            let mut streams: Vec<&dyn Objective> = vec![&supervised];
            if em.omega > 0.0 {
                streams.push(&entropy);
            }
            locmodel::train_objectives(init, &streams, cfg, validation)
        }
        EmMode::FinetuneOnly => locmodel::train_objectives(init, &[&entropy], cfg, validation),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyGtConfig {
    /// Per-axis offset range, world meters.
    pub bound_m: f64,
    pub seed: u64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyGtReport {
    pub corrupted: Vec<GridLoc>,
    /// Corrupted locations pulled back into the grid interior.
    pub clamped: usize,
}

/// Shifts every location by a uniform offset in `[-bound, bound]` meters per axis.
///
/// Offsets depend only on `seed` and the sample index, so regenerating them
/// yields the same dataset.
pub fn corrupt_locations(split: &DatasetSplit, bound_m: f64, seed: u64) -> Result<NoisyGtReport, ModelError> {
    if !(bound_m >= 0.0) {
        return Err(ModelError::Config(format!("bound must be >= 0, got {bound_m}")));
    }
    let gt = split.gt_locs()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clamped = 0;
    let corrupted = split
        .pairs()
        .iter()
        .zip(gt)
        .map(|(pair, loc)| {
            let (dr, dc) = if bound_m > 0.0 {
                (rng.random_range(-bound_m..=bound_m), rng.random_range(-bound_m..=bound_m))
            } else {
                (0.0, 0.0)
            };
            let shift = |v: usize, d: f64, n: usize| {
                let moved = v as f64 + (d / pair.scale_s).round();
                let lo = 1.0;
                let hi = (n - 2) as f64;
                (moved.clamp(lo, hi) as usize, !(lo..=hi).contains(&moved))
            };
            let (row, cr) = shift(loc.row, dr, pair.geometry.rows);
            let (col, cc) = shift(loc.col, dc, pair.geometry.cols);
            if cr || cc {
                clamped += 1;
            }
            GridLoc::new(row, col)
        })
        .collect();
    Ok(NoisyGtReport { corrupted, clamped })
}

/// Supervised finetuning on corrupted target ground truth.
pub fn train_noisy_supervised(
    init: &ModelParams,
    target: &DatasetSplit,
    noisy: &NoisyGtConfig,
    cfg: &TrainConfig,
    validation: Option<&DatasetSplit>,
) -> Result<(TrainOutcome, NoisyGtReport), ModelError> {
    let report = corrupt_locations(target, noisy.bound_m, noisy.seed)?;
    let labels = GtLabels::at(report.corrupted.clone(), noisy.sigma);
    let out = locmodel::train(init, target, &labels, cfg, validation)?;
    Ok((out, report))
}

/// Keeps the `⌈T%·n⌉` pairs on which the teacher is most certain.
pub fn filter_by_entropy(teacher: &ModelParams, split: &DatasetSplit, t_percent: f64) -> Result<FilterReport, DistillError> {
    distill::kept_count(split.len(), t_percent)?;
    let keys = split
        .pairs()
        .iter()
        .map(|p| Ok((p.pair_id, gridmap::entropy(&locmodel::predict_heatmap(teacher, p)?))))
        .collect::<Result<Vec<_>, ModelError>>()?;
    distill::select_smallest(&keys, t_percent, FilterCriterion::Entropy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::filter_outliers;
    use crate::synthcv::{fixtures::small_config, generate_world, World};

    fn world() -> World {
        generate_world(&small_config(77)).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            lr: 0.05,
            epochs: 2,
            batch: 8,
            k_prime: 3,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_omega_is_plain_source_training() {
        let w = world();
        let init = ModelParams::random(3, 4, 4, 2, 1.0).unwrap();
        let em = EmConfig {
            omega: 0.0,
            mode: EmMode::Joint,
            sigma: 1.0,
        };
        let a = train_entropy_min(&init, Some(&w.teacher_train), &w.adapt_train, &em, &cfg(), None).unwrap();
        let labels = GtLabels::new(&w.teacher_train, 1.0).unwrap();
        let b = locmodel::train(&init, &w.teacher_train, &labels, &cfg(), None).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn positive_omega_changes_the_model() {
        let w = world();
        let init = ModelParams::random(3, 4, 4, 2, 1.0).unwrap();
        let em = EmConfig {
            omega: 1.0,
            mode: EmMode::Joint,
            sigma: 1.0,
        };
        let a = train_entropy_min(&init, Some(&w.teacher_train), &w.adapt_train, &em, &cfg(), None).unwrap();
        let labels = GtLabels::new(&w.teacher_train, 1.0).unwrap();
        let b = locmodel::train(&init, &w.teacher_train, &labels, &cfg(), None).unwrap();
        assert_ne!(a.params, b.params);
    }

    #[test]
    fn joint_mode_needs_source() {
        let w = world();
        let init = ModelParams::random(3, 4, 4, 2, 1.0).unwrap();
        let em = EmConfig {
            omega: 0.1,
            mode: EmMode::Joint,
            sigma: 1.0,
        };
        assert!(train_entropy_min(&init, None, &w.adapt_train, &em, &cfg(), None).is_err());
        let neg = EmConfig { omega: -1.0, ..em };
        assert!(train_entropy_min(&init, Some(&w.teacher_train), &w.adapt_train, &neg, &cfg(), None).is_err());
    }

    #[test]
    fn zero_bound_is_true_gt_and_offsets_are_stable() {
        let w = world();
        let target = w.adapt_train.unlock_gt();
        let r0 = corrupt_locations(&target, 0.0, 5).unwrap();
        assert_eq!(r0.corrupted, target.gt_locs().unwrap());
        assert_eq!(r0.clamped, 0);
        let a = corrupt_locations(&target, 2.5, 5).unwrap();
        let b = corrupt_locations(&target, 2.5, 5).unwrap();
        assert_eq!(a, b);
        let max_cells = (2.5 / target.pairs()[0].scale_s).round() as usize;
        for (c, g) in a.corrupted.iter().zip(target.gt_locs().unwrap()) {
            assert!(c.row >= 1 && c.row <= 14 && c.col >= 1 && c.col <= 14);
            assert!(c.row.abs_diff(g.row) <= max_cells && c.col.abs_diff(g.col) <= max_cells);
        }
        let huge = corrupt_locations(&target, 100.0, 5).unwrap();
        assert!(huge.clamped > 0);
    }

    #[test]
    fn noisy_training_needs_unlocked_gt() {
        let w = world();
        let init = ModelParams::random(3, 4, 4, 2, 1.0).unwrap();
        let noisy = NoisyGtConfig {
            bound_m: 1.0,
            seed: 1,
            sigma: 1.0,
        };
        assert!(train_noisy_supervised(&init, &w.adapt_train, &noisy, &cfg(), None).is_err());
        let zero = NoisyGtConfig { bound_m: 0.0, ..noisy };
        let target = w.adapt_train.unlock_gt();
        let (a, _) = train_noisy_supervised(&init, &target, &zero, &cfg(), None).unwrap();
        let labels = GtLabels::new(&target, 1.0).unwrap();
        let b = locmodel::train(&init, &target, &labels, &cfg(), None).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn uniform_teacher_ranks_by_pair_id() {
        let w = world();
        let flat = ModelParams::zeros(3, 4, 4).unwrap();
        let report = filter_by_entropy(&flat, &w.adapt_train, 50.0).unwrap();
        let mut ids: Vec<u64> = w.adapt_train.pairs().iter().map(|p| p.pair_id).collect();
        ids.sort_unstable();
        let expected: std::collections::BTreeSet<u64> = ids[..report.kept_count].iter().copied().collect();
        assert_eq!(report.kept_ids(), expected);
    }

    #[test]
    fn full_keep_matches_distance_filter() {
        let w = world();
        let a = ModelParams::random(3, 4, 4, 2, 1.0).unwrap();
        let b = ModelParams::random(3, 4, 4, 3, 1.0).unwrap();
        let e = filter_by_entropy(&a, &w.adapt_train, 100.0).unwrap();
        let d = filter_outliers(&a, &b, &w.adapt_train, 100.0).unwrap();
        assert_eq!(e.kept_ids(), d.kept_ids());
    }
}
