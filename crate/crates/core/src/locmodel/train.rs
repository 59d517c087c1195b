use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{backward, entropy_backward, supervised_labels, Gradient, ModelError, ModelParams};
use crate::evalkit;
use crate::gridmap::{GridLoc, HeatMap};
use crate::synthcv::DatasetSplit;

/// SGD-with-momentum settings shared by every training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Supervise levels `1..=k_prime` only.
    pub k_prime: usize,
    pub seed: u64,
    /// Rescale the batch gradient to at most this norm.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            momentum: 0.9,
            epochs: 10,
            batch: 16,
            k_prime: 3,
            seed: 0,
            grad_clip: None,
        }
    }
}

/// Supplies the per-level label pyramid of a split sample.
pub trait LabelProvider: Sync {
    fn labels(&self, split: &DatasetSplit, idx: usize) -> Result<Cow<'_, [HeatMap]>, ModelError>;
}

/// Gaussian labels at the true locations; reads ground truth up front.
#[derive(Debug, Clone)]
pub struct GtLabels {
    locs: Vec<GridLoc>,
    sigma: f64,
}

impl GtLabels {
    pub fn new(split: &DatasetSplit, sigma: f64) -> Result<Self, ModelError> {
        Ok(Self {
            locs: split.gt_locs()?,
            sigma,
        })
    }

    /// Labels at arbitrary (for instance corrupted) locations, one per sample.
    pub fn at(locs: Vec<GridLoc>, sigma: f64) -> Self {
        Self { locs, sigma }
    }
}

impl LabelProvider for GtLabels {
    fn labels(&self, split: &DatasetSplit, idx: usize) -> Result<Cow<'_, [HeatMap]>, ModelError> {
        let pair = &split.pairs()[idx];
        Ok(Cow::Owned(supervised_labels(self.locs[idx], pair.geometry, self.sigma)?))
    }
}

/// A per-sample differentiable objective over an indexed dataset.
pub trait Objective: Sync {
    fn len(&self) -> usize;
    fn name(&self) -> &str;
    fn loss_grad(&self, params: &ModelParams, idx: usize) -> Result<(f64, Gradient), ModelError>;
}

/// Weighted infoNCE against a label provider.
pub struct LabelObjective<'a> {
    pub split: &'a DatasetSplit,
    pub labels: &'a dyn LabelProvider,
    pub k_prime: usize,
}

impl Objective for LabelObjective<'_> {
    fn len(&self) -> usize {
        self.split.len()
    }

    fn name(&self) -> &str {
        "weighted-infonce"
    }

    fn loss_grad(&self, params: &ModelParams, idx: usize) -> Result<(f64, Gradient), ModelError> {
        let labels = self.labels.labels(self.split, idx)?;
        backward(params, &self.split.pairs()[idx], &labels, self.k_prime)
    }
}

/// `weight · entropy(H_K)` on unlabeled pairs.
pub struct EntropyObjective<'a> {
    pub split: &'a DatasetSplit,
    pub weight: f64,
}

impl Objective for EntropyObjective<'_> {
    fn len(&self) -> usize {
        self.split.len()
    }

    fn name(&self) -> &str {
        "entropy"
    }

    fn loss_grad(&self, params: &ModelParams, idx: usize) -> Result<(f64, Gradient), ModelError> {
        entropy_backward(params, &self.split.pairs()[idx], self.weight)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_mean_error: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Epoch of the returned snapshot (1-based); 0 when no epoch ran.
    pub selected_epoch: usize,
    pub history: Vec<EpochStats>,
}

/// Trains on one labeled split. See [`train_objectives`].
pub fn train(
    params: &ModelParams,
    split: &DatasetSplit,
    labels: &dyn LabelProvider,
    cfg: &TrainConfig,
    validation: Option<&DatasetSplit>,
) -> Result<TrainOutcome, ModelError> {
    let objective = LabelObjective {
        split,
        labels,
        k_prime: cfg.k_prime,
    };
    train_objectives(params, &[&objective], cfg, validation)
}

struct Stream<'a> {
    objective: &'a dyn Objective,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Stream<'_> {
    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Minibatch SGD with momentum over one or more objectives.
///
/// An epoch is one pass over the first objective; each step draws one batch
/// from every objective and sums their batch-mean gradients. Sample order is
/// a function of `cfg.seed` alone. With `validation`, the returned snapshot is
/// the epoch with the lowest validation mean error (earliest on ties);
/// otherwise it is the final epoch.
pub fn train_objectives(
    params: &ModelParams,
    objectives: &[&dyn Objective],
    cfg: &TrainConfig,
    validation: Option<&DatasetSplit>,
) -> Result<TrainOutcome, ModelError> {
    let Some(primary) = objectives.first() else {
        return Err(ModelError::EmptySplit);
    };
    if objectives.iter().any(|o| o.len() == 0) || cfg.batch == 0 {
        return Err(ModelError::EmptySplit);
    }
    if cfg.k_prime == 0 || cfg.k_prime > params.levels() {
        return Err(ModelError::InvalidKPrime {
            k_prime: cfg.k_prime,
            levels: params.levels(),
        });
    }
    let mut streams: Vec<Stream<'_>> = objectives
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED_0000 * i as u64));
            let mut order: Vec<usize> = (0..o.len()).collect();
            order.shuffle(&mut rng);
            Stream {
                objective: *o,
                order,
                cursor: 0,
                rng,
            }
        })
        .collect();

    let mut current = params.clone();
    let mut velocity = vec![0.0; current.flat().len()];
    let steps_per_epoch = primary.len().div_ceil(cfg.batch);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for step in 0..steps_per_epoch {
            let mut grad = Gradient::zeros_like(&current);
            for (si, stream) in streams.iter_mut().enumerate() {
                // The primary stream covers each sample exactly once per epoch.
                let size = if si == 0 {
                    cfg.batch.min(primary.len() - step * cfg.batch)
                } else {
                    cfg.batch
                };
                let batch = stream.next_batch(size);
                let objective = stream.objective;
                let results: Vec<Result<(f64, Gradient), ModelError>> = batch
                    .par_iter()
                    .map(|&idx| objective.loss_grad(&current, idx))
                    .collect();
                let inv = 1.0 / batch.len() as f64;
                for r in results {
                    let (loss, mut g) = r?;
                    if !loss.is_finite() {
                        return Err(ModelError::NonFiniteLoss {
                            epoch,
                            step,
                            loss,
                            objective: objective.name().to_owned(),
                        });
                    }
                    loss_sum += loss;
                    loss_count += 1;
                    g.scale(inv);
                    grad.add_assign(&g);
                }
            }
            if let Some(clip) = cfg.grad_clip {
                let n = grad.norm();
                if n > clip {
                    grad.scale(clip / n);
                }
            }
            for ((p, v), g) in current.flat_mut().iter_mut().zip(velocity.iter_mut()).zip(&grad.data) {
                *v = cfg.momentum * *v + g;
                *p -= cfg.lr * *v;
            }
            if !current.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    epoch,
                    step,
                    loss: f64::NAN,
                    objective: "parameter update".into(),
                });
            }
        }
        let val_mean_error = match validation {
            Some(v) => Some(evalkit::mean_error(&current, v)?),
            None => None,
        };
        if let Some(err) = val_mean_error {
            if best.as_ref().is_none_or(|(b, _, _)| err < *b) {
                best = Some((err, epoch, current.clone()));
            }
        }
        history.push(EpochStats {
            epoch,
            mean_loss: loss_sum / loss_count.max(1) as f64,
            val_mean_error,
        });
    }

    let (params, selected_epoch) = match best {
        Some((_, epoch, p)) => (p, epoch),
        None => (current, cfg.epochs),
    };
    Ok(TrainOutcome {
        params,
        selected_epoch,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcv::{fixtures::small_config, generate_world, DomainSpec};

    fn cfg() -> TrainConfig {
        TrainConfig {
            lr: 0.05,
            epochs: 3,
            batch: 8,
            k_prime: 3,
            seed: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let w = generate_world(&small_config(1)).unwrap();
        let params = ModelParams::random(3, 4, 4, 2, 1.0).unwrap();
        let labels = GtLabels::new(&w.teacher_train, 1.0).unwrap();
        let out = train(&params, &w.teacher_train, &labels, &TrainConfig { lr: 0.0, ..cfg() }, None).unwrap();
        assert_eq!(out.params, params);
    }

    #[test]
    fn training_is_deterministic() {
        let w = generate_world(&small_config(2)).unwrap();
        let params = ModelParams::random(3, 4, 4, 2, 1.0).unwrap();
        let labels = GtLabels::new(&w.teacher_train, 1.0).unwrap();
        let a = train(&params, &w.teacher_train, &labels, &cfg(), Some(&w.source_val)).unwrap();
        let b = train(&params, &w.teacher_train, &labels, &cfg(), Some(&w.source_val)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
        assert!(a.selected_epoch >= 1);
    }

    #[test]
    fn hidden_split_cannot_supply_gt_labels() {
        let w = generate_world(&small_config(3)).unwrap();
        assert!(GtLabels::new(&w.adapt_train, 1.0).is_err());
    }

    #[test]
    fn supervised_training_beats_random_init() {
        let mut c = small_config(5);
        c.source = DomainSpec::clean("source", 4, 1.5, 50);
        c.counts.teacher_train = 200;
        c.counts.source_val = 40;
        let w = generate_world(&c).unwrap();
        let params = ModelParams::random(3, 4, 4, 9, 0.5).unwrap();
        let before = evalkit::mean_error(&params, &w.source_val).unwrap();
        let labels = GtLabels::new(&w.teacher_train, 1.0).unwrap();
        let out = train(
            &params,
            &w.teacher_train,
            &labels,
            &TrainConfig { epochs: 8, lr: 0.05, ..cfg() },
            Some(&w.source_val),
        )
        .unwrap();
        let after = evalkit::mean_error(&out.params, &w.source_val).unwrap();
        assert!(after <= 0.5 * before, "before {before}, after {after}");
    }

    #[test]
    fn zero_epochs_return_the_input() {
        let w = generate_world(&small_config(6)).unwrap();
        let params = ModelParams::random(3, 4, 4, 2, 1.0).unwrap();
        let labels = GtLabels::new(&w.teacher_train, 1.0).unwrap();
        let out = train(&params, &w.teacher_train, &labels, &TrainConfig { epochs: 0, ..cfg() }, None).unwrap();
        assert_eq!(out.params, params);
        assert!(out.history.is_empty());
    }

    #[test]
    fn divergence_aborts_with_diagnostics() {
        let w = generate_world(&small_config(7)).unwrap();
        let params = ModelParams::random(3, 4, 4, 2, 1.0).unwrap();
        let labels = GtLabels::new(&w.teacher_train, 1.0).unwrap();
        let err = train(&params, &w.teacher_train, &labels, &TrainConfig { lr: 1e200, ..cfg() }, None).unwrap_err();
        assert!(matches!(err, ModelError::NonFiniteLoss { .. }), "{err}");
    }
}
