//! Weakly-supervised self-distillation: pseudo labels from a teacher, an
//! auxiliary student for outlier detection, and the final student trained on
//! the retained samples.
//!
//! ```text
//! teacher ──► pseudo GT (all adapt pairs) ──► aux student
//!    │                                          │
//!    └──────── d = |y_teacher − y_aux| ◄────────┘
//!                      │ keep the ⌈T%·N⌉ smallest
//!                      ▼
//!        final student on the kept pairs
//! ```

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalkit::{self, ComparisonRecord, EvalError, EvalResult};
use crate::gridmap::{self, GridError, GridLoc, HeatMap};
use crate::locmodel::{self, LabelProvider, ModelError, ModelParams, TrainConfig, TrainOutcome};
use crate::synthcv::{DatasetSplit, World};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("pseudo labels must be built on a split whose ground truth is hidden ({0})")]
    GtVisible(String),
    #[error("empty training set: {0}")]
    EmptyTrainingSet(String),
    #[error("no pseudo label for pair {0}")]
    MissingPseudoLabel(u64),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<DistillError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// How the full-resolution pseudo label `X` is formed from the teacher's final heat map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PseudoGtVariant {
    /// Gaussian centered on the teacher's mode.
    ModeBased,
    /// The teacher's heat map itself.
    RawTeacher,
}

#[derive(Debug, Clone)]
pub struct PseudoGtEntry {
    /// `P_1..P_K`, coarsest first.
    pub pyramid: Vec<HeatMap>,
    pub teacher_mode: GridLoc,
}

/// Frozen pseudo labels keyed by pair id.
#[derive(Debug, Clone)]
pub struct PseudoGtSet {
    pub variant: PseudoGtVariant,
    pub sigma: f64,
    pub entries: BTreeMap<u64, PseudoGtEntry>,
}

impl PseudoGtSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, pair_id: u64) -> Option<&PseudoGtEntry> {
        self.entries.get(&pair_id)
    }
}

impl LabelProvider for PseudoGtSet {
    fn labels(&self, split: &DatasetSplit, idx: usize) -> Result<Cow<'_, [HeatMap]>, ModelError> {
        let id = split.pairs()[idx].pair_id;
        self.entries
            .get(&id)
            .map(|e| Cow::Borrowed(e.pyramid.as_slice()))
            .ok_or_else(|| ModelError::LabelMismatch(format!("no pseudo label for pair {id}")))
    }
}

/// Builds `X` from the teacher's final heat map and pools it to every level.
pub fn make_pseudo_gt(
    teacher: &ModelParams,
    split: &DatasetSplit,
    variant: PseudoGtVariant,
    sigma: f64,
) -> Result<PseudoGtSet, DistillError> {
    if split.gt_visible() {
        return Err(DistillError::GtVisible(split.role.to_string()));
    }
    let entries: Vec<(u64, PseudoGtEntry)> = split
        .pairs()
        .par_iter()
        .map(|pair| -> Result<(u64, PseudoGtEntry), DistillError> {
            let h = locmodel::predict_heatmap(teacher, pair)?;
            let mode = gridmap::argmax_loc(&h);
            let x = match variant {
                PseudoGtVariant::ModeBased => gridmap::gaussian_pseudo_gt(mode, h.rows(), h.cols(), sigma)?,
                PseudoGtVariant::RawTeacher => h,
            };
            let levels = pair.levels();
            let mut pyramid = Vec::with_capacity(levels);
            for k in 0..levels - 1 {
                let (r, c) = pair.geometry.level_dims(k);
                pyramid.push(gridmap::downsample(&x, r, c)?);
            }
            pyramid.push(x);
            Ok((
                pair.pair_id,
                PseudoGtEntry {
                    pyramid,
                    teacher_mode: mode,
                },
            ))
        })
        .collect::<Result<_, _>>()?;
    Ok(PseudoGtSet {
        variant,
        sigma,
        entries: entries.into_iter().collect(),
    })
}

/// Student initialized from the teacher and trained on pseudo labels for every pair of `split`.
pub fn train_aux_student(
    teacher: &ModelParams,
    split: &DatasetSplit,
    pseudo: &PseudoGtSet,
    cfg: &TrainConfig,
    validation: Option<&DatasetSplit>,
) -> Result<TrainOutcome, DistillError> {
    if split.is_empty() {
        return Err(DistillError::EmptyTrainingSet(split.role.to_string()));
    }
    for p in split.pairs() {
        if pseudo.get(p.pair_id).is_none() {
            return Err(DistillError::MissingPseudoLabel(p.pair_id));
        }
    }
    Ok(locmodel::train(teacher, split, pseudo, cfg, validation)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterCriterion {
    /// Distance between teacher and auxiliary-student predictions, in cells.
    Distance,
    /// Entropy of the teacher's final heat map, in nats.
    Entropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterEntry {
    pub pair_id: u64,
    pub key: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub criterion: FilterCriterion,
    pub t_percent: f64,
    /// Largest key among kept samples.
    pub threshold: f64,
    pub kept_count: usize,
    pub total: usize,
    /// In split order.
    pub entries: Vec<FilterEntry>,
}

impl FilterReport {
    pub fn kept_ids(&self) -> BTreeSet<u64> {
        self.entries.iter().filter(|e| e.kept).map(|e| e.pair_id).collect()
    }

    pub fn keys(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.key).collect()
    }

    pub fn kept_flags(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.kept).collect()
    }
}

/// `⌈T/100 · n⌉`, robust to floating-point noise in `T · n / 100`.
pub fn kept_count(n: usize, t_percent: f64) -> Result<usize, DistillError> {
    if !(t_percent > 0.0) {
        return Err(DistillError::EmptyTrainingSet(format!("T = {t_percent}%")));
    }
    let t = t_percent.min(100.0);
    let x = t * n as f64 / 100.0;
    let nearest = x.round();
    let k = if (x - nearest).abs() < 1e-9 { nearest } else { x.ceil() };
    Ok(k as usize)
}

/// Keeps the `⌈T%·n⌉` entries with the smallest key; ties go to the smaller pair id.
pub fn select_smallest(
    keys: &[(u64, f64)],
    t_percent: f64,
    criterion: FilterCriterion,
) -> Result<FilterReport, DistillError> {
    let n_keep = kept_count(keys.len(), t_percent)?;
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[a].1.total_cmp(&keys[b].1).then(keys[a].0.cmp(&keys[b].0)));
    let mut kept = vec![false; keys.len()];
    for &i in &order[..n_keep] {
        kept[i] = true;
    }
    let threshold = order[..n_keep].last().map(|&i| keys[i].1).unwrap_or(0.0);
    Ok(FilterReport {
        criterion,
        t_percent,
        threshold,
        kept_count: n_keep,
        total: keys.len(),
        entries: keys
            .iter()
            .zip(kept)
            .map(|(&(pair_id, key), kept)| FilterEntry { pair_id, key, kept })
            .collect(),
    })
}

/// Ranks pairs by how far the auxiliary student moved away from the teacher.
pub fn filter_outliers(
    teacher: &ModelParams,
    aux: &ModelParams,
    split: &DatasetSplit,
    t_percent: f64,
) -> Result<FilterReport, DistillError> {
    kept_count(split.len(), t_percent)?;
    let yt = evalkit::predict_all(teacher, split)?;
    let yo = evalkit::predict_all(aux, split)?;
    let keys: Vec<(u64, f64)> = split
        .pairs()
        .iter()
        .zip(yt.iter().zip(&yo))
        .map(|(p, (a, b))| (p.pair_id, a.distance(b)))
        .collect();
    select_smallest(&keys, t_percent, FilterCriterion::Distance)
}

/// Final student on the kept subset, initialized from the teacher.
pub fn train_final_student(
    teacher: &ModelParams,
    split: &DatasetSplit,
    pseudo: &PseudoGtSet,
    report: &FilterReport,
    cfg: &TrainConfig,
    validation: Option<&DatasetSplit>,
) -> Result<TrainOutcome, DistillError> {
    let kept = split.subset(&report.kept_ids());
    if kept.is_empty() {
        return Err(DistillError::EmptyTrainingSet("no pair survived filtering".into()));
    }
    train_aux_student(teacher, &kept, pseudo, cfg, validation)
}

/// The ablation variants of the distillation pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Teacher deployed as is.
    #[serde(rename = "teacher")]
    Teacher,
    /// Raw teacher heat maps, no filtering.
    #[serde(rename = "st-m-of")]
    StRawNoFilter,
    /// Mode-based labels, no filtering.
    #[serde(rename = "st+m-of")]
    StModeNoFilter,
    /// Mode-based labels with distance filtering (the full method).
    #[serde(rename = "st+m+of")]
    StModeFiltered,
    /// Mode-based labels from the auxiliary student, no filtering.
    #[serde(rename = "st+m+a")]
    StModeAux,
}

impl Variant {
    pub const STUDENTS: [Variant; 4] = [
        Variant::StRawNoFilter,
        Variant::StModeNoFilter,
        Variant::StModeFiltered,
        Variant::StModeAux,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Teacher => "teacher",
            Variant::StRawNoFilter => "st-m-of",
            Variant::StModeNoFilter => "st+m-of",
            Variant::StModeFiltered => "st+m+of",
            Variant::StModeAux => "st+m+a",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        [Variant::Teacher]
            .into_iter()
            .chain(Variant::STUDENTS)
            .find(|v| v.name() == s)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Distillation hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Gaussian width of mode-based labels, in finest-level cells.
    pub sigma: f64,
    pub t_percent: f64,
    /// Training settings of the auxiliary and final students; `k_prime` is the level cutoff.
    pub student: TrainConfig,
    /// Select the student epoch on the labeled target validation split instead of a fixed budget.
    #[serde(default)]
    pub validation_stopping: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            sigma: 4.0,
            t_percent: 80.0,
            student: TrainConfig {
                k_prime: 2,
                ..TrainConfig::default()
            },
            validation_stopping: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Evaluations of one trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelEval {
    pub validation: EvalResult,
    pub test: EvalResult,
    pub selected_epoch: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Teacher vs auxiliary student on the adapt split (ground truth unlocked for analysis only).
    pub adapt_teacher_vs_aux: ComparisonRecord,
    /// Spearman correlation of `d^{α,o}` with the teacher error on the adapt split.
    pub d_error_spearman: f64,
    /// Teacher vs final student on the test split.
    pub test_teacher_vs_final: Option<ComparisonRecord>,
}

/// Everything produced by one pipeline run, except timings, is a pure function of its inputs.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub teacher: ModelParams,
    pub teacher_eval: ModelEval,
    pub aux: Option<(ModelParams, ModelEval)>,
    pub students: BTreeMap<Variant, (ModelParams, ModelEval)>,
    pub filter: Option<FilterReport>,
    pub diagnostics: Option<Diagnostics>,
    pub timings: Vec<StageTiming>,
}

impl PipelineOutcome {
    pub fn test_mean(&self, v: Variant) -> Option<f64> {
        match v {
            Variant::Teacher => Some(self.teacher_eval.test.mean()),
            _ => self.students.get(&v).map(|(_, e)| e.test.mean()),
        }
    }
}

pub fn eval_model(params: &ModelParams, world: &World, selected_epoch: usize) -> Result<ModelEval, DistillError> {
    Ok(ModelEval {
        validation: evalkit::evaluate(params, &world.validation)?,
        test: evalkit::evaluate(params, &world.test)?,
        selected_epoch,
    })
}

fn stage<T>(
    name: &'static str,
    timings: &mut Vec<StageTiming>,
    f: impl FnOnce() -> Result<T, DistillError>,
) -> Result<T, DistillError> {
    let start = Instant::now();
    let out = f().map_err(|e| DistillError::Stage {
        stage: name,
        source: Box::new(e),
    })?;
    timings.push(StageTiming {
        stage: name.to_owned(),
        seconds: start.elapsed().as_secs_f64(),
    });
    Ok(out)
}

/// Runs the requested student variants from an already trained teacher.
///
/// The auxiliary student is shared: it is the `st+m-of` student, the outlier
/// detector of `st+m+of`, and the label source of `st+m+a`.
pub fn run_students(
    world: &World,
    teacher: &ModelParams,
    cfg: &DistillConfig,
    variants: &[Variant],
) -> Result<PipelineOutcome, DistillError> {
    let mut timings = Vec::new();
    let adapt = &world.adapt_train;
    let validation = cfg.validation_stopping.then_some(&world.validation);
    let teacher_eval = stage("eval-teacher", &mut timings, || eval_model(teacher, world, 0))?;
    let mut students = BTreeMap::new();

    let wants = |v: Variant| variants.contains(&v);
    if wants(Variant::StRawNoFilter) {
        let pseudo = stage("pseudo-gt-raw", &mut timings, || {
            make_pseudo_gt(teacher, adapt, PseudoGtVariant::RawTeacher, cfg.sigma)
        })?;
        let out = stage("student-raw", &mut timings, || {
            train_aux_student(teacher, adapt, &pseudo, &cfg.student, validation)
        })?;
        let eval = eval_model(&out.params, world, out.selected_epoch)?;
        students.insert(Variant::StRawNoFilter, (out.params, eval));
    }

    let needs_aux = wants(Variant::StModeNoFilter) || wants(Variant::StModeFiltered) || wants(Variant::StModeAux);
    let mut aux = None;
    let mut filter = None;
    let mut diagnostics = None;
    if needs_aux {
        let pseudo = stage("pseudo-gt-mode", &mut timings, || {
            make_pseudo_gt(teacher, adapt, PseudoGtVariant::ModeBased, cfg.sigma)
        })?;
        let aux_out = stage("aux-student", &mut timings, || {
            train_aux_student(teacher, adapt, &pseudo, &cfg.student, validation)
        })?;
        let aux_eval = eval_model(&aux_out.params, world, aux_out.selected_epoch)?;
        if wants(Variant::StModeNoFilter) {
            students.insert(Variant::StModeNoFilter, (aux_out.params.clone(), aux_eval.clone()));
        }

        let report = stage("filter", &mut timings, || filter_outliers(teacher, &aux_out.params, adapt, cfg.t_percent))?;
        let unlocked = adapt.unlock_gt();
        let teacher_adapt = evalkit::evaluate(teacher, &unlocked)?;
        let aux_adapt = evalkit::evaluate(&aux_out.params, &unlocked)?;
        let adapt_cmp = evalkit::compare(&teacher_adapt, &aux_adapt, 1.0)?;
        let spearman = evalkit::rank_correlation(&report.keys(), &teacher_adapt.errors()).unwrap_or(0.0);

        let mut test_cmp = None;
        if wants(Variant::StModeFiltered) {
            let out = stage("final-student", &mut timings, || {
                train_final_student(teacher, adapt, &pseudo, &report, &cfg.student, validation)
            })?;
            let eval = eval_model(&out.params, world, out.selected_epoch)?;
            test_cmp = Some(evalkit::compare(&teacher_eval.test, &eval.test, 1.0)?);
            students.insert(Variant::StModeFiltered, (out.params, eval));
        }
        if wants(Variant::StModeAux) {
            let pseudo_aux = stage("pseudo-gt-aux", &mut timings, || {
                make_pseudo_gt(&aux_out.params, adapt, PseudoGtVariant::ModeBased, cfg.sigma)
            })?;
            let out = stage("student-aux-labels", &mut timings, || {
                train_aux_student(teacher, adapt, &pseudo_aux, &cfg.student, validation)
            })?;
            let eval = eval_model(&out.params, world, out.selected_epoch)?;
            students.insert(Variant::StModeAux, (out.params, eval));
        }
        diagnostics = Some(Diagnostics {
            adapt_teacher_vs_aux: adapt_cmp,
            d_error_spearman: spearman,
            test_teacher_vs_final: test_cmp,
        });
        filter = Some(report);
        aux = Some((aux_out.params, aux_eval));
    }

    Ok(PipelineOutcome {
        teacher: teacher.clone(),
        teacher_eval,
        aux,
        students,
        filter,
        diagnostics,
        timings,
    })
}

/// Source-supervised teacher with stopping on the labeled source validation split.
pub fn train_teacher(
    world: &World,
    init: &ModelParams,
    sigma: f64,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, DistillError> {
    let labels = locmodel::GtLabels::new(&world.teacher_train, sigma)?;
    Ok(locmodel::train(init, &world.teacher_train, &labels, cfg, Some(&world.source_val))?)
}
