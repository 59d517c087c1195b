//! A small coarse-to-fine cross-view matcher with hand-derived gradients.
//!
//! Level `k` scores every aerial cell `a` of the level-`k` patch against the
//! ground observation `g` by `s_k(a) = (G_kᵀ g) · (W_a^kᵀ a) / sqrt(E)`. The
//! ground projection is a residual sum over the per-level blocks,
//! `G_k = Σ_{j ≤ k} W_g^j`: the coarsest block is a ground encoder shared by every
//! level and finer levels add corrections. Aerial projections are per level.
//! Supervising coarse levels therefore moves the final heat map through the
//! shared ground encoder only.

mod io;
mod train;

pub use io::{load_params, read_params, save_params, write_params, PARAMS_FORMAT_VERSION};
pub use train::{
    train, train_objectives, EntropyObjective, EpochStats, GtLabels, LabelObjective, LabelProvider,
    Objective, TrainConfig, TrainOutcome,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::gridmap::{self, GridError, GridLoc, HeatMap, ScoreGrid};
use crate::synthcv::{AerialView, CrossViewPair, SynthError, WorldGeometry};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("k_prime must be in 1..={levels}, got {k_prime}")]
    InvalidKPrime { k_prime: usize, levels: usize },
    #[error("label pyramid mismatch: {0}")]
    LabelMismatch(String),
    #[error("empty training split")]
    EmptySplit,
    #[error("non-finite loss {loss} at epoch {epoch}, step {step} ({objective})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        loss: f64,
        objective: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid model file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// All learnable projections of the matcher, stored flat.
///
/// Layout: for each level `k` (coarsest first) the ground block `W_g^k` then the
/// aerial block `W_a^k`, each `channels × embed_dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    levels: usize,
    channels: usize,
    embed_dim: usize,
    init_seed: u64,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(levels: usize, channels: usize, embed_dim: usize) -> Result<Self, ModelError> {
        if levels < 2 {
            return Err(ModelError::DimensionMismatch(format!(
                "coarse-to-fine model needs >= 2 levels, got {levels}"
            )));
        }
        if channels == 0 || embed_dim == 0 {
            return Err(ModelError::DimensionMismatch("empty projection".into()));
        }
        Ok(Self {
            levels,
            channels,
            embed_dim,
            init_seed: 0,
            data: vec![0.0; 2 * levels * channels * embed_dim],
        })
    }

    /// Entries drawn from `N(0, scale² / channels)`.
    pub fn random(
        levels: usize,
        channels: usize,
        embed_dim: usize,
        seed: u64,
        scale: f64,
    ) -> Result<Self, ModelError> {
        let mut p = Self::zeros(levels, channels, embed_dim)?;
        let normal = Normal::new(0.0, scale / (channels as f64).sqrt())
            .map_err(|e| ModelError::DimensionMismatch(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.data.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        p.init_seed = seed;
        Ok(p)
    }

    /// Every level's ground and aerial projections equal the identity-padded
    /// `channels × embed_dim` matrix.
    pub fn identity(levels: usize, channels: usize, embed_dim: usize) -> Result<Self, ModelError> {
        let mut p = Self::zeros(levels, channels, embed_dim)?;
        for i in 0..channels.min(embed_dim) {
            p.ground_mut(0)[i * embed_dim + i] = 1.0;
            for k in 0..levels {
                p.aerial_mut(k)[i * embed_dim + i] = 1.0;
            }
        }
        Ok(p)
    }

    pub(crate) fn from_parts(
        levels: usize,
        channels: usize,
        embed_dim: usize,
        init_seed: u64,
        data: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let mut p = Self::zeros(levels, channels, embed_dim)?;
        if data.len() != p.data.len() {
            return Err(ModelError::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                p.data.len(),
                data.len()
            )));
        }
        p.data = data;
        p.init_seed = init_seed;
        Ok(p)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    fn block(&self) -> usize {
        self.channels * self.embed_dim
    }

    pub fn ground(&self, k: usize) -> &[f64] {
        let b = self.block();
        &self.data[2 * k * b..(2 * k + 1) * b]
    }

    pub fn aerial(&self, k: usize) -> &[f64] {
        let b = self.block();
        &self.data[(2 * k + 1) * b..(2 * k + 2) * b]
    }

    pub fn ground_mut(&mut self, k: usize) -> &mut [f64] {
        let b = self.block();
        &mut self.data[2 * k * b..(2 * k + 1) * b]
    }

    pub fn aerial_mut(&mut self, k: usize) -> &mut [f64] {
        let b = self.block();
        &mut self.data[(2 * k + 1) * b..(2 * k + 2) * b]
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Multiplies every parameter by `c`; level scores scale by `c²`.
    pub fn scaled(&self, c: f64) -> ModelParams {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= c);
        out
    }

    fn check_pair(&self, pair: &CrossViewPair) -> Result<(), ModelError> {
        if pair.channels() != self.channels {
            return Err(ModelError::DimensionMismatch(format!(
                "pair has {} channels, model expects {}",
                pair.channels(),
                self.channels
            )));
        }
        if pair.levels() != self.levels {
            return Err(ModelError::DimensionMismatch(format!(
                "pair pyramid has {} levels, model has {}",
                pair.levels(),
                self.levels
            )));
        }
        Ok(())
    }
}

/// Gradient with the same flat layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub data: Vec<f64>,
}

impl Gradient {
    pub fn zeros_like(p: &ModelParams) -> Self {
        Self {
            data: vec![0.0; p.data.len()],
        }
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Per-level scores and heat maps for one pair.
#[derive(Debug, Clone)]
pub struct PredictionPyramid {
    pub scores: Vec<ScoreGrid>,
    pub heatmaps: Vec<HeatMap>,
    pub final_loc: GridLoc,
}

impl PredictionPyramid {
    pub fn levels(&self) -> usize {
        self.scores.len()
    }

    pub fn final_heatmap(&self) -> &HeatMap {
        self.heatmaps.last().expect("non-empty pyramid")
    }
}

/// Intermediate values of one level, kept for the backward pass.
struct LevelPass {
    ground_embed: Vec<f64>,
    scores: Vec<f64>,
}

fn level_pass(
    g_eff: &[f64],
    a_eff: &[f64],
    ground: &[f64],
    view: &AerialView<'_>,
    embed_dim: usize,
) -> LevelPass {
    let ch = ground.len();
    let mut ground_embed = vec![0.0; embed_dim];
    for (f, gf) in ground.iter().enumerate() {
        for (e, v) in ground_embed.iter_mut().enumerate() {
            *v += gf * g_eff[f * embed_dim + e];
        }
    }
    // query = A v / sqrt(E); score(cell) = query · a(cell)
    let inv = 1.0 / (embed_dim as f64).sqrt();
    let query: Vec<f64> = (0..ch)
        .map(|f| {
            let row = &a_eff[f * embed_dim..(f + 1) * embed_dim];
            row.iter().zip(&ground_embed).map(|(a, v)| a * v).sum::<f64>() * inv
        })
        .collect();
    let mut scores = Vec::with_capacity(view.rows * view.cols);
    for r in 0..view.rows {
        for cell in view.row(r).chunks_exact(ch) {
            scores.push(cell.iter().zip(&query).map(|(a, q)| a * q).sum());
        }
    }
    LevelPass { ground_embed, scores }
}

/// Accumulates `∂L/∂W^k` given `∂L/∂b_k` per cell.
fn level_backward(
    params: &ModelParams,
    level: usize,
    pass: &LevelPass,
    match_grad: &[f64],
    ground: &[f64],
    view: &AerialView<'_>,
    grad: &mut Gradient,
) {
    let ch = params.channels;
    let ed = params.embed_dim;
    let inv = 1.0 / (ed as f64).sqrt();
    let mut z = vec![0.0; ch];
    let mut i = 0;
    for r in 0..view.rows {
        for cell in view.row(r).chunks_exact(ch) {
            let d = match_grad[i];
            i += 1;
            if d != 0.0 {
                z.iter_mut().zip(cell).for_each(|(zf, a)| *zf += d * a);
            }
        }
    }
    z.iter_mut().for_each(|v| *v *= inv);

    let w_a = params.aerial(level);
    let mut d_embed = vec![0.0; ed];
    for f in 0..ch {
        for (e, d) in d_embed.iter_mut().enumerate() {
            *d += w_a[f * ed + e] * z[f];
        }
    }
    let block = ch * ed;
    let a_off = (2 * level + 1) * block;
    for f in 0..ch {
        for e in 0..ed {
            grad.data[a_off + f * ed + e] += z[f] * pass.ground_embed[e];
        }
    }
    // G_k sums ground blocks 0..=k, so each of them receives the same gradient.
    for j in 0..=level {
        let g_off = 2 * j * block;
        for f in 0..ch {
            for e in 0..ed {
                grad.data[g_off + f * ed + e] += ground[f] * d_embed[e];
            }
        }
    }
}

/// Per-level passes for levels `0..upto`.
fn run_levels(params: &ModelParams, pair: &CrossViewPair, upto: usize) -> Vec<LevelPass> {
    let mut g_eff = vec![0.0; params.block()];
    (0..upto)
        .map(|k| {
            g_eff.iter_mut().zip(params.ground(k)).for_each(|(s, v)| *s += v);
            level_pass(&g_eff, params.aerial(k), &pair.ground, &pair.aerial_level(k), params.embed_dim)
        })
        .collect()
}

/// Backpropagates per-level score gradients into every projection.
fn backward_levels(params: &ModelParams, pair: &CrossViewPair, passes: &[LevelPass], score_grads: &[Vec<f64>], grad: &mut Gradient) {
    for (k, (pass, d)) in passes.iter().zip(score_grads).enumerate() {
        level_backward(params, k, pass, d, &pair.ground, &pair.aerial_level(k), grad);
    }
}

/// Runs every level on one pair.
pub fn forward(params: &ModelParams, pair: &CrossViewPair) -> Result<PredictionPyramid, ModelError> {
    params.check_pair(pair)?;
    let logits = run_levels(params, pair, params.levels).into_iter().map(|p| p.scores);
    let mut scores = Vec::with_capacity(params.levels);
    let mut heatmaps = Vec::with_capacity(params.levels);
    for (k, s) in logits.enumerate() {
        let (rows, cols) = pair.geometry.level_dims(k);
        let grid = ScoreGrid::new(rows, cols, s)?;
        heatmaps.push(gridmap::normalize(&grid)?);
        scores.push(grid);
    }
    let final_loc = gridmap::argmax_loc(heatmaps.last().expect("levels >= 2"));
    Ok(PredictionPyramid {
        scores,
        heatmaps,
        final_loc,
    })
}

fn final_logits(params: &ModelParams, pair: &CrossViewPair) -> Result<Vec<f64>, ModelError> {
    params.check_pair(pair)?;
    let mut passes = run_levels(params, pair, params.levels);
    Ok(passes.pop().expect("levels >= 2").scores)
}

/// Final-level argmax only.
pub fn predict(params: &ModelParams, pair: &CrossViewPair) -> Result<GridLoc, ModelError> {
    let s = final_logits(params, pair)?;
    let idx = gridmap::argmax_index(&s);
    Ok(GridLoc::new(idx / pair.geometry.cols, idx % pair.geometry.cols))
}

/// Final-level heat map only.
pub fn predict_heatmap(params: &ModelParams, pair: &CrossViewPair) -> Result<HeatMap, ModelError> {
    let s = final_logits(params, pair)?;
    Ok(gridmap::normalize(&ScoreGrid::new(pair.geometry.rows, pair.geometry.cols, s)?)?)
}

/// Weighted infoNCE of one level: `Σ P(m,n) · (−log softmax(s)(m,n)) / Σ P`, temperature 1.
pub fn weighted_info_nce(scores: &ScoreGrid, label: &HeatMap) -> Result<f64, ModelError> {
    if (scores.rows(), scores.cols()) != label.dims() {
        return Err(ModelError::LabelMismatch(format!(
            "scores {}x{}, label {}x{}",
            scores.rows(),
            scores.cols(),
            label.rows(),
            label.cols()
        )));
    }
    Ok(info_nce_values(scores.values(), label.values()))
}

fn log_sum_exp(s: &[f64]) -> f64 {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn info_nce_values(scores: &[f64], label: &[f64]) -> f64 {
    let lse = log_sum_exp(scores);
    let mass: f64 = label.iter().sum();
    scores
        .iter()
        .zip(label)
        .filter(|(_, p)| **p > 0.0)
        .map(|(s, p)| p * (lse - s))
        .sum::<f64>()
        / mass
}

fn check_labels(levels: usize, labels: &[HeatMap], k_prime: usize) -> Result<(), ModelError> {
    if k_prime == 0 || k_prime > levels {
        return Err(ModelError::InvalidKPrime { k_prime, levels });
    }
    if labels.len() < k_prime {
        return Err(ModelError::LabelMismatch(format!(
            "{} label levels for k_prime {k_prime}",
            labels.len()
        )));
    }
    Ok(())
}

/// Mean weighted infoNCE over levels `1..=k_prime`.
pub fn pyramid_loss(
    pyr: &PredictionPyramid,
    labels: &[HeatMap],
    k_prime: usize,
) -> Result<f64, ModelError> {
    check_labels(pyr.levels(), labels, k_prime)?;
    let mut total = 0.0;
    for k in 0..k_prime {
        total += weighted_info_nce(&pyr.scores[k], &labels[k])?;
    }
    Ok(total / k_prime as f64)
}

/// Gaussian labels for a known location at every level; `σ_k = σ · res_k / res_K`.
pub fn supervised_labels(
    gt: GridLoc,
    geometry: WorldGeometry,
    sigma: f64,
) -> Result<Vec<HeatMap>, ModelError> {
    let fine = (geometry.rows, geometry.cols);
    (0..geometry.levels)
        .map(|k| {
            let dims = geometry.level_dims(k);
            let center = gt.rescale(fine, dims);
            let ratio = dims.0 as f64 / fine.0 as f64;
            Ok(gridmap::gaussian_pseudo_gt(center, dims.0, dims.1, sigma * ratio)?)
        })
        .collect()
}

/// Loss against Gaussian-smoothed fine ground truth, averaged over all levels.
pub fn supervised_loss(pyr: &PredictionPyramid, gt: GridLoc, sigma: f64) -> Result<f64, ModelError> {
    let last = pyr.heatmaps.last().expect("non-empty pyramid");
    let levels = pyr.levels();
    let geometry = WorldGeometry {
        rows: last.rows(),
        cols: last.cols(),
        levels,
    };
    let labels = supervised_labels(gt, geometry, sigma)?;
    pyramid_loss(pyr, &labels, levels)
}

/// Loss and exact gradient of the mean weighted infoNCE over levels `1..=k_prime`.
pub fn backward(
    params: &ModelParams,
    pair: &CrossViewPair,
    labels: &[HeatMap],
    k_prime: usize,
) -> Result<(f64, Gradient), ModelError> {
    params.check_pair(pair)?;
    check_labels(params.levels, labels, k_prime)?;
    for (k, label) in labels.iter().take(k_prime).enumerate() {
        let dims = pair.geometry.level_dims(k);
        if label.dims() != dims {
            return Err(ModelError::LabelMismatch(format!(
                "level {k}: label {}x{}, output {}x{}",
                label.rows(),
                label.cols(),
                dims.0,
                dims.1
            )));
        }
    }
    let passes = run_levels(params, pair, k_prime);
    let w = 1.0 / k_prime as f64;
    let mut loss = 0.0;
    let mut score_grads = Vec::with_capacity(k_prime);
    for (pass, label) in passes.iter().zip(labels) {
        let s = &pass.scores;
        loss += w * info_nce_values(s, label.values());
        let mass: f64 = label.values().iter().sum();
        let p = gridmap::softmax(s);
        score_grads.push(
            p.iter()
                .zip(label.values())
                .map(|(pi, li)| w * (pi - li / mass))
                .collect(),
        );
    }
    let mut grad = Gradient::zeros_like(params);
    backward_levels(params, pair, &passes, &score_grads, &mut grad);
    Ok((loss, grad))
}

/// `weight · entropy(H_K)` and its exact gradient.
pub fn entropy_backward(
    params: &ModelParams,
    pair: &CrossViewPair,
    weight: f64,
) -> Result<(f64, Gradient), ModelError> {
    params.check_pair(pair)?;
    let passes = run_levels(params, pair, params.levels);
    let last = passes.len() - 1;
    let p = gridmap::softmax(&passes[last].scores);
    let h = gridmap::entropy_of(&p);
    // ∂H/∂s_i = −p_i (ln p_i + H)
    let dscore: Vec<f64> = p
        .iter()
        .map(|pi| if *pi > 0.0 { -weight * pi * (pi.ln() + h) } else { 0.0 })
        .collect();
    let mut grad = Gradient::zeros_like(params);
    level_backward(params, last, &passes[last], &dscore, &pair.ground, &pair.aerial_level(last), &mut grad);
    Ok((weight * h, grad))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::synthcv::{fixtures::small_config, generate_world, DomainSpec};
    use rand::Rng;

    /// Loss of a parameter vector, recomputed from scratch through `forward`.
    fn loss_at(params: &ModelParams, pair: &CrossViewPair, labels: &[HeatMap], k_prime: usize) -> f64 {
        let pyr = forward(params, pair).unwrap();
        pyramid_loss(&pyr, labels, k_prime).unwrap()
    }

    pub(crate) fn fd_check(
        params: &ModelParams,
        analytic: &Gradient,
        f: impl Fn(&ModelParams) -> f64,
    ) -> f64 {
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..params.flat().len() {
            let mut plus = params.clone();
            plus.flat_mut()[i] += h;
            let mut minus = params.clone();
            minus.flat_mut()[i] -= h;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            let a = analytic.data[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
        worst
    }

    fn world() -> crate::synthcv::World {
        generate_world(&small_config(21)).unwrap()
    }

    #[test]
    fn zero_ground_projection_gives_uniform_maps() {
        let w = world();
        let mut params = ModelParams::random(3, 4, 4, 1, 1.0).unwrap();
        for k in 0..3 {
            params.ground_mut(k).iter_mut().for_each(|v| *v = 0.0);
        }
        let pyr = forward(&params, &w.test.pairs()[0]).unwrap();
        for (s, h) in pyr.scores.iter().zip(&pyr.heatmaps) {
            assert!(s.values().iter().all(|v| *v == 0.0));
            let u = 1.0 / (h.rows() * h.cols()) as f64;
            assert!(h.values().iter().all(|v| (v - u).abs() < 1e-15));
        }
    }

    #[test]
    fn identity_model_self_match_is_maximal() {
        let mut cfg = small_config(8);
        cfg.target = DomainSpec::clean("target", 4, 1.5, 9);
        let w = generate_world(&cfg).unwrap();
        let params = ModelParams::identity(3, 4, 4).unwrap();
        for (i, pair) in w.test.pairs().iter().enumerate() {
            let gt = w.test.gt_loc(i).unwrap();
            let pyr = forward(&params, pair).unwrap();
            let fine = &pyr.scores[2];
            let best = (0..fine.rows())
                .flat_map(|r| (0..fine.cols()).map(move |c| (r, c)))
                .map(|(r, c)| fine.get(r, c))
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(fine.get(gt.row, gt.col), best);
        }
    }

    #[test]
    fn heatmaps_sum_to_one() {
        let w = world();
        let params = ModelParams::random(3, 4, 6, 4, 3.0).unwrap();
        for pair in w.teacher_train.pairs().iter().take(5) {
            let pyr = forward(&params, pair).unwrap();
            assert_eq!(pyr.heatmaps[0].dims(), (4, 4));
            assert_eq!(pyr.heatmaps[2].dims(), (16, 16));
            for h in &pyr.heatmaps {
                assert!((h.mass() - 1.0).abs() < 1e-9);
            }
            assert_eq!(pyr.final_loc, gridmap::argmax_loc(&pyr.heatmaps[2]));
            assert_eq!(predict(&params, pair).unwrap(), pyr.final_loc);
        }
    }

    #[test]
    fn scaling_projections_scales_scores_quadratically() {
        let w = world();
        let params = ModelParams::random(3, 4, 4, 5, 1.0).unwrap();
        let pair = &w.test.pairs()[1];
        let a = forward(&params, pair).unwrap();
        let b = forward(&params.scaled(3.0), pair).unwrap();
        for (sa, sb) in a.scores.iter().zip(&b.scores) {
            for (x, y) in sa.values().iter().zip(sb.values()) {
                assert!((9.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
        assert_eq!(a.final_loc, b.final_loc);
    }

    #[test]
    fn uniform_scores_loss_is_mean_log_cells() {
        let w = world();
        let params = ModelParams::zeros(3, 4, 4).unwrap();
        let pyr = forward(&params, &w.test.pairs()[0]).unwrap();
        let loss = supervised_loss(&pyr, GridLoc::new(5, 7), 2.0).unwrap();
        let expected = (16f64.ln() + 64f64.ln() + 256f64.ln()) / 3.0;
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn saturated_one_hot_loss_vanishes() {
        let mut s = vec![0.0; 16];
        s[5] = 800.0;
        let scores = ScoreGrid::new(4, 4, s).unwrap();
        let label = HeatMap::one_hot(4, 4, GridLoc::new(1, 1)).unwrap();
        assert!(weighted_info_nce(&scores, &label).unwrap() < 1e-300);
    }

    #[test]
    fn info_nce_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let raw: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
        let scores = ScoreGrid::new(3, 4, raw.clone()).unwrap();
        let label = HeatMap::from_weights(3, 4, w).unwrap();
        let mut expected = 0.0;
        for m in 0..3 {
            for n in 0..4 {
                let pos = raw[m * 4 + n].exp();
                let all: f64 = raw.iter().map(|v| v.exp()).sum();
                expected += label.get(m, n) * -(pos / all).ln();
            }
        }
        assert!((weighted_info_nce(&scores, &label).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let w = world();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..6 {
            let params = ModelParams::random(3, 4, 3, trial, 1.5).unwrap();
            let pair = &w.teacher_train.pairs()[trial as usize];
            let gt = GridLoc::new(rng.random_range(0..16), rng.random_range(0..16));
            let labels = supervised_labels(gt, pair.geometry, 1.0 + trial as f64).unwrap();
            for k_prime in 1..=3 {
                let (_, grad) = backward(&params, pair, &labels, k_prime).unwrap();
                let err = fd_check(&params, &grad, |p| loss_at(p, pair, &labels, k_prime));
                assert!(err < 1e-4, "trial {trial} k' {k_prime}: rel err {err}");
            }
        }
    }

    #[test]
    fn entropy_gradient_matches_central_differences() {
        let w = world();
        for trial in 0..4 {
            let params = ModelParams::random(3, 4, 3, 100 + trial, 2.0).unwrap();
            let pair = &w.test.pairs()[trial as usize];
            let (_, grad) = entropy_backward(&params, pair, 0.7).unwrap();
            let err = fd_check(&params, &grad, |p| 0.7 * gridmap::entropy(&predict_heatmap(p, pair).unwrap()));
            assert!(err < 1e-4, "rel err {err}");
        }
    }

    #[test]
    fn k_prime_bounds() {
        let w = world();
        let params = ModelParams::random(3, 4, 3, 1, 1.0).unwrap();
        let pair = &w.test.pairs()[0];
        let labels = supervised_labels(GridLoc::new(3, 3), pair.geometry, 1.0).unwrap();
        assert!(matches!(backward(&params, pair, &labels, 0), Err(ModelError::InvalidKPrime { .. })));
        assert!(matches!(backward(&params, pair, &labels, 4), Err(ModelError::InvalidKPrime { .. })));
    }

    #[test]
    fn levels_beyond_cutoff_do_not_matter() {
        let w = world();
        let params = ModelParams::random(3, 4, 3, 2, 1.0).unwrap();
        let pair = &w.test.pairs()[0];
        let labels = supervised_labels(GridLoc::new(3, 3), pair.geometry, 1.0).unwrap();
        let mut other = labels.clone();
        other[2] = HeatMap::uniform(16, 16);
        let (la, ga) = backward(&params, pair, &labels, 2).unwrap();
        let (lb, gb) = backward(&params, pair, &other[..2], 2).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga, gb);
        let block = 4 * 3;
        assert!(ga.data[2 * 2 * block..].iter().all(|v| *v == 0.0));

        let mut pyr = forward(&params, pair).unwrap();
        let before = pyramid_loss(&pyr, &labels, 2).unwrap();
        pyr.scores[2] = pyr.scores[2].scaled(-5.0);
        assert_eq!(before, pyramid_loss(&pyr, &labels, 2).unwrap());
    }

    #[test]
    fn full_cutoff_sums_every_level() {
        let w = world();
        let params = ModelParams::random(3, 4, 3, 6, 1.0).unwrap();
        let pair = &w.test.pairs()[2];
        let labels = supervised_labels(GridLoc::new(9, 2), pair.geometry, 2.0).unwrap();
        let (loss, grad) = backward(&params, pair, &labels, 3).unwrap();
        let mut sum = Gradient::zeros_like(&params);
        let mut lsum = 0.0;
        for k in 0..3 {
            // One-level objective: only level k labeled, weight 1/3.
            let (l, g) = backward_single_level(&params, pair, &labels, k);
            lsum += l / 3.0;
            let mut g = g;
            g.scale(1.0 / 3.0);
            sum.add_assign(&g);
        }
        assert!((loss - lsum).abs() < 1e-12);
        for (a, b) in grad.data.iter().zip(&sum.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn backward_single_level(
        params: &ModelParams,
        pair: &CrossViewPair,
        labels: &[HeatMap],
        k: usize,
    ) -> (f64, Gradient) {
        // Differences of cumulative cutoffs isolate one level.
        let (lk, gk) = backward(params, pair, labels, k + 1).unwrap();
        if k == 0 {
            return (lk, gk);
        }
        let (lp, gp) = backward(params, pair, labels, k).unwrap();
        let n = (k + 1) as f64;
        let m = k as f64;
        let mut g = gk.clone();
        g.scale(n);
        let mut sub = gp;
        sub.scale(-m);
        g.add_assign(&sub);
        (n * lk - m * lp, g)
    }

    #[test]
    fn rejects_mismatched_pair() {
        let w = world();
        let params = ModelParams::random(3, 5, 3, 1, 1.0).unwrap();
        assert!(matches!(forward(&params, &w.test.pairs()[0]), Err(ModelError::DimensionMismatch(_))));
        assert!(ModelParams::zeros(1, 4, 4).is_err());
    }
}
