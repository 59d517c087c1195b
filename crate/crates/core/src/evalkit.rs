//! Localization metrics, paired comparisons and CSV exports.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridmap::GridLoc;
use crate::locmodel::{self, ModelError, ModelParams};
use crate::synthcv::{DatasetSplit, SynthError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("split mismatch: {0}")]
    SplitMismatch(String),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("rank correlation undefined for constant input")]
    ConstantInput,
    #[error("aggregate self-check failed: {0}")]
    SelfCheck(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub pair_id: u64,
    pub pred: GridLoc,
    pub gt: GridLoc,
    pub scale_s: f64,
    /// Displacement error in meters.
    pub err_m: f64,
    /// Absolute error along the heading.
    pub lon_m: f64,
    /// Absolute error across the heading.
    pub lat_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub samples: Vec<SampleEval>,
    pub error: Summary,
    pub longitudinal: Summary,
    pub lateral: Summary,
}

impl EvalResult {
    pub fn mean(&self) -> f64 {
        self.error.mean
    }

    pub fn median(&self) -> f64 {
        self.error.median
    }

    pub fn errors(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.err_m).collect()
    }
}

/// Error of one prediction with its longitudinal/lateral split.
///
/// `heading` is a unit vector in `(col, row)` cell axes.
pub fn sample_error(pred: GridLoc, gt: GridLoc, heading: [f64; 2], scale_s: f64) -> (f64, f64, f64) {
    let dx = pred.col as f64 - gt.col as f64;
    let dy = pred.row as f64 - gt.row as f64;
    let lon = dx * heading[0] + dy * heading[1];
    let lat = -dx * heading[1] + dy * heading[0];
    (scale_s * dx.hypot(dy), scale_s * lon.abs(), scale_s * lat.abs())
}

/// Final-level argmax for every pair, in split order.
pub fn predict_all(model: &ModelParams, split: &DatasetSplit) -> Result<Vec<GridLoc>, ModelError> {
    split
        .pairs()
        .par_iter()
        .map(|p| locmodel::predict(model, p))
        .collect()
}

/// Mean displacement error in meters; used for stopping-epoch selection.
pub fn mean_error(model: &ModelParams, split: &DatasetSplit) -> Result<f64, ModelError> {
    let preds = predict_all(model, split)?;
    let mut total = 0.0;
    for (i, (pred, pair)) in preds.iter().zip(split.pairs()).enumerate() {
        total += pair.scale_s * pred.distance(&split.gt_loc(i)?);
    }
    Ok(total / split.len().max(1) as f64)
}

fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Mean and median (even length: average of the two middle values), verified
/// against an independent full-sort recomputation.
pub fn summarize(values: &[f64]) -> Result<Summary, EvalError> {
    let n = values.len();
    if n == 0 {
        return Ok(Summary { mean: 0.0, median: 0.0 });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut work = values.to_vec();
    let hi_idx = n / 2;
    let (_, hi, _) = work.select_nth_unstable_by(hi_idx, f64::total_cmp);
    let hi = *hi;
    let median = if n % 2 == 1 {
        hi
    } else {
        let lo = work[..hi_idx].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    };

    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let check_median = median_sorted(&sorted);
    let check_mean = sorted.iter().sum::<f64>() / n as f64;
    if check_median != median {
        return Err(EvalError::SelfCheck(format!("median {median} vs {check_median}")));
    }
    if (check_mean - mean).abs() > 1e-9 * (1.0 + mean.abs()) {
        return Err(EvalError::SelfCheck(format!("mean {mean} vs {check_mean}")));
    }
    Ok(Summary { mean, median })
}

/// Scores given predictions against the split's ground truth.
pub fn evaluate_predictions(split: &DatasetSplit, preds: &[GridLoc]) -> Result<EvalResult, EvalError> {
    if preds.len() != split.len() {
        return Err(EvalError::SplitMismatch(format!(
            "{} predictions for {} pairs",
            preds.len(),
            split.len()
        )));
    }
    let mut samples = Vec::with_capacity(split.len());
    for (i, (pair, pred)) in split.pairs().iter().zip(preds).enumerate() {
        let gt = split.gt_loc(i)?;
        let (err_m, lon_m, lat_m) = sample_error(*pred, gt, pair.heading, pair.scale_s);
        samples.push(SampleEval {
            pair_id: pair.pair_id,
            pred: *pred,
            gt,
            scale_s: pair.scale_s,
            err_m,
            lon_m,
            lat_m,
        });
    }
    let pick = |f: fn(&SampleEval) -> f64| samples.iter().map(f).collect::<Vec<_>>();
    Ok(EvalResult {
        error: summarize(&pick(|s| s.err_m))?,
        longitudinal: summarize(&pick(|s| s.lon_m))?,
        lateral: summarize(&pick(|s| s.lat_m))?,
        samples,
    })
}

/// Per-sample and aggregate displacement errors of `model` on `split`.
pub fn evaluate(model: &ModelParams, split: &DatasetSplit) -> Result<EvalResult, EvalError> {
    let preds = predict_all(model, split)?;
    evaluate_predictions(split, &preds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedError {
    pub pair_id: u64,
    pub eps_a: f64,
    pub eps_b: f64,
    /// `eps_b − eps_a`; negative means `b` improved.
    pub delta: f64,
    /// Distance between the two predictions in meters.
    pub change_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub pairs: Vec<PairedError>,
    pub improved: usize,
    pub worsened: usize,
    pub unchanged: usize,
    pub histogram: Vec<HistogramBin>,
}

/// Paired per-sample comparison of two evaluations of the same split.
pub fn compare(a: &EvalResult, b: &EvalResult, bin_width: f64) -> Result<ComparisonRecord, EvalError> {
    if a.samples.len() != b.samples.len() {
        return Err(EvalError::SplitMismatch(format!(
            "{} vs {} samples",
            a.samples.len(),
            b.samples.len()
        )));
    }
    let mut pairs = Vec::with_capacity(a.samples.len());
    for (sa, sb) in a.samples.iter().zip(&b.samples) {
        if sa.pair_id != sb.pair_id || sa.gt != sb.gt {
            return Err(EvalError::SplitMismatch(format!(
                "pair {} vs {}",
                sa.pair_id, sb.pair_id
            )));
        }
        pairs.push(PairedError {
            pair_id: sa.pair_id,
            eps_a: sa.err_m,
            eps_b: sb.err_m,
            delta: sb.err_m - sa.err_m,
            change_m: sa.scale_s * sa.pred.distance(&sb.pred),
        });
    }
    let improved = pairs.iter().filter(|p| p.delta < 0.0).count();
    let worsened = pairs.iter().filter(|p| p.delta > 0.0).count();
    let deltas: Vec<f64> = pairs.iter().map(|p| p.delta).collect();
    Ok(ComparisonRecord {
        improved,
        worsened,
        unchanged: pairs.len() - improved - worsened,
        histogram: histogram(&deltas, bin_width),
        pairs,
    })
}

/// Fixed-width bins aligned to multiples of `width`; `[lo, hi)` per bin.
pub fn histogram(values: &[f64], width: f64) -> Vec<HistogramBin> {
    if values.is_empty() || !(width > 0.0) {
        return Vec::new();
    }
    let index = |v: f64| (v / width).floor() as i64;
    let lo = values.iter().map(|v| index(*v)).min().unwrap_or(0);
    let hi = values.iter().map(|v| index(*v)).max().unwrap_or(0);
    let mut bins: Vec<HistogramBin> = (lo..=hi)
        .map(|i| HistogramBin {
            lo: i as f64 * width,
            hi: (i + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for v in values {
        bins[(index(*v) - lo) as usize].count += 1;
    }
    bins
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank ties.
pub fn rank_correlation(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::SplitMismatch(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(EvalError::TooFewSamples(x.len()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::ConstantInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// One row of the per-sample export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub pair_id: u64,
    pub eps: f64,
    pub eps_lon: f64,
    pub eps_lat: f64,
    pub d: Option<f64>,
    pub kept: Option<bool>,
}

/// Rows from an evaluation, optionally annotated with change distances and filter flags.
pub fn sample_rows(
    eval: &EvalResult,
    d: Option<&[f64]>,
    kept: Option<&[bool]>,
) -> Vec<SampleRow> {
    eval.samples
        .iter()
        .enumerate()
        .map(|(i, s)| SampleRow {
            pair_id: s.pair_id,
            eps: s.err_m,
            eps_lon: s.lon_m,
            eps_lat: s.lat_m,
            d: d.map(|d| d[i]),
            kept: kept.map(|k| k[i]),
        })
        .collect()
}

/// Columns: `pair_id,eps,eps_lon,eps_lat,d,kept` (empty cells when absent).
pub fn write_sample_table<W: Write>(rows: &[SampleRow], w: W) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["pair_id", "eps", "eps_lon", "eps_lat", "d", "kept"])?;
    for r in rows {
        out.write_record([
            r.pair_id.to_string(),
            r.eps.to_string(),
            r.eps_lon.to_string(),
            r.eps_lat.to_string(),
            r.d.map(|v| v.to_string()).unwrap_or_default(),
            r.kept.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Columns: `lo,hi,count`.
pub fn write_histogram<W: Write>(bins: &[HistogramBin], w: W) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["lo", "hi", "count"])?;
    for b in bins {
        out.write_record([b.lo.to_string(), b.hi.to_string(), b.count.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Columns: `pair_id,change_m,eps_a,eps_b,delta`.
pub fn write_scatter<W: Write>(cmp: &ComparisonRecord, w: W) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["pair_id", "change_m", "eps_a", "eps_b", "delta"])?;
    for p in &cmp.pairs {
        out.write_record([
            p.pair_id.to_string(),
            p.change_m.to_string(),
            p.eps_a.to_string(),
            p.eps_b.to_string(),
            p.delta.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
