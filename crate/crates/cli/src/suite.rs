//! `reproduce-all`: the main comparison, the seed ablation, both baseline sweeps
//! and the filtering head-to-head, with the directional checks evaluated on
//! the results.

use std::fmt::Write as _;
use std::fs;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use xvkd_core::distill::{StageTiming, Variant};
use xvkd_core::experiments::{self, AblationResult, ExperimentConfig, FilterDuel, NoisyPoint, SweepPoint};
use xvkd_core::locmodel;
use xvkd_core::synthcv;

use crate::commands::{self, Ctx};
use crate::error::CliError;
use crate::registry::StageRecord;

/// Relative reduction the final student must reach over the teacher.
pub const MIN_REDUCTION: f64 = 0.10;
/// Lower bound on the rank correlation between change distance and teacher error.
pub const MIN_SPEARMAN: f64 = 0.2;
/// Adjacent decreases tolerated in the noisy-label sweep.
pub const MAX_NOISY_INVERSIONS: usize = 1;
pub const MIN_ABLATION_SEEDS: usize = 5;
pub const MIN_FILTER_SEEDS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub test_mean: f64,
    pub test_median: f64,
    pub validation_mean: f64,
    /// Relative change of the test mean against the teacher, percent.
    pub change_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainMetrics {
    pub rows: Vec<MethodRow>,
    pub d_error_spearman: f64,
    pub kept_count: usize,
    pub adapt_total: usize,
    pub threshold_cells: f64,
    /// Test samples on which the final student beats / loses to the teacher.
    pub improved: usize,
    pub worsened: usize,
    pub unchanged: usize,
}

impl MainMetrics {
    pub fn row(&self, v: Variant) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == v.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Everything `reproduce-all` measures; a pure function of the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteMetrics {
    pub config_hash: String,
    pub world_hash: String,
    pub main: MainMetrics,
    pub ablation: AblationResult,
    pub em_sweep: Vec<SweepPoint>,
    pub noisy_sweep: Vec<NoisyPoint>,
    pub noisy_inversions: usize,
    /// Smallest swept bound at which the noisy-label model is worse than the final student.
    pub noisy_crossover_m: Option<f64>,
    pub filter_duels: Vec<FilterDuel>,
    pub filter_median_distance: f64,
    pub filter_median_entropy: f64,
    pub checks: Vec<Check>,
}

impl SuiteMetrics {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Wall-clock seconds per part of the suite.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SuiteTimings {
    pub main: f64,
    pub em_sweep: f64,
    pub noisy_sweep: f64,
    pub ablation: f64,
    pub filter_duel: f64,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub metrics: SuiteMetrics,
    pub timings: SuiteTimings,
    pub summary: String,
}

fn check(name: &str, pass: bool, detail: String) -> Check {
    Check {
        name: name.to_owned(),
        pass,
        detail,
    }
}

/// Directional checks on a finished suite. `NaN` anywhere fails the affected check.
pub fn directional_checks(m: &SuiteMetrics) -> Vec<Check> {
    let mut out = Vec::new();
    let mean = |v: Variant| m.main.row(v).map(|r| r.test_mean).unwrap_or(f64::NAN);

    let (t, f) = (mean(Variant::Teacher), mean(Variant::StModeFiltered));
    let reduction = (t - f) / t;
    out.push(check(
        "main-result",
        f < t && reduction >= MIN_REDUCTION,
        format!("teacher {t:.3} m, st+m+of {f:.3} m, reduction {:.1}% (need >= {:.0}%)", 100.0 * reduction, 100.0 * MIN_REDUCTION),
    ));

    let med = |v: Variant| m.ablation.median.get(&v).copied().unwrap_or(f64::NAN);
    let (raw, mode, fin, aux) = (
        med(Variant::StRawNoFilter),
        med(Variant::StModeNoFilter),
        med(Variant::StModeFiltered),
        med(Variant::StModeAux),
    );
    let seeds = m.ablation.runs.len();
    out.push(check(
        "ablation-order",
        seeds >= MIN_ABLATION_SEEDS && fin <= mode && mode <= raw && fin <= aux,
        format!("{seeds} seeds, medians st+m+of {fin:.3} <= st+m-of {mode:.3} <= st-m-of {raw:.3}, st+m+of <= st+m+a {aux:.3}"),
    ));

    let rho = m.main.d_error_spearman;
    out.push(check(
        "filter-diagnostic",
        rho > MIN_SPEARMAN,
        format!("spearman(d, teacher error) = {rho:.3} (need > {MIN_SPEARMAN})"),
    ));

    let em_ok = match m.em_sweep.split_first() {
        Some((zero, rest)) => zero.x == 0.0 && rest.iter().all(|p| zero.validation_mean < p.validation_mean),
        None => false,
    };
    let em_vals: Vec<String> = m.em_sweep.iter().map(|p| format!("{}:{:.3}", p.x, p.validation_mean)).collect();
    out.push(check(
        "entropy-min",
        em_ok,
        format!("validation mean by omega {}", em_vals.join(" ")),
    ));

    let noisy_vals: Vec<String> = m.noisy_sweep.iter().map(|p| format!("{}:{:.3}", p.bound_m, p.test_mean)).collect();
    out.push(check(
        "noisy-gt",
        !m.noisy_sweep.is_empty() && m.noisy_inversions <= MAX_NOISY_INVERSIONS && m.noisy_crossover_m.is_some(),
        format!(
            "test mean by bound {}; {} inversion(s), crossover {:?} m",
            noisy_vals.join(" "),
            m.noisy_inversions,
            m.noisy_crossover_m
        ),
    ));

    let (d, e) = (m.filter_median_distance, m.filter_median_entropy);
    out.push(check(
        "filter-duel",
        m.filter_duels.len() >= MIN_FILTER_SEEDS && d <= e,
        format!("{} seeds, median test mean distance {d:.3} vs entropy {e:.3}", m.filter_duels.len()),
    ));
    out
}

pub fn render_summary(m: &SuiteMetrics) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "config {}", m.config_hash);
    let _ = writeln!(s, "world  {}", m.world_hash);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<10} {:>9} {:>11} {:>8}", "method", "mean (m)", "median (m)", "change");
    for r in &m.main.rows {
        let change = if r.method == Variant::Teacher.name() {
            String::from("-")
        } else {
            format!("{:+.1}%", r.change_pct)
        };
        let _ = writeln!(s, "{:<10} {:>9.3} {:>11.3} {:>8}", r.method, r.test_mean, r.test_median, change);
    }
    let _ = writeln!(
        s,
        "\nkept {}/{} adapt pairs (d <= {:.3} cells), spearman(d, teacher error) {:.3}",
        m.main.kept_count, m.main.adapt_total, m.main.threshold_cells, m.main.d_error_spearman
    );
    let _ = writeln!(
        s,
        "final vs teacher on test: {} improved, {} worsened, {} unchanged",
        m.main.improved, m.main.worsened, m.main.unchanged
    );

    let _ = writeln!(s, "\nablation, test mean (m) per seed offset");
    let variants: Vec<Variant> = [Variant::Teacher].into_iter().chain(Variant::STUDENTS).collect();
    let head: Vec<String> = variants.iter().map(|v| format!("{:>9}", v.name())).collect();
    let _ = writeln!(s, "{:<8}{}", "seed", head.join(""));
    for run in &m.ablation.runs {
        let cells: Vec<String> = variants
            .iter()
            .map(|v| format!("{:>9.3}", run.test_mean.get(v).copied().unwrap_or(f64::NAN)))
            .collect();
        let _ = writeln!(s, "{:<8}{}", run.seed, cells.join(""));
    }
    let cells: Vec<String> = variants
        .iter()
        .map(|v| format!("{:>9.3}", m.ablation.median.get(v).copied().unwrap_or(f64::NAN)))
        .collect();
    let _ = writeln!(s, "{:<8}{}", "median", cells.join(""));

    let _ = writeln!(s, "\nentropy minimization");
    let _ = writeln!(s, "{:<8} {:>9} {:>9}", "omega", "val (m)", "test (m)");
    for p in &m.em_sweep {
        let _ = writeln!(s, "{:<8} {:>9.3} {:>9.3}", p.x, p.validation_mean, p.test_mean);
    }

    let _ = writeln!(s, "\nnoisy ground truth finetuning");
    let _ = writeln!(s, "{:<8} {:>9} {:>9} {:>8}", "bound m", "val (m)", "test (m)", "clamped");
    for p in &m.noisy_sweep {
        let _ = writeln!(s, "{:<8} {:>9.3} {:>9.3} {:>8}", p.bound_m, p.validation_mean, p.test_mean, p.clamped);
    }
    let _ = writeln!(s, "crossover bound: {:?}", m.noisy_crossover_m);

    let _ = writeln!(s, "\nfiltering criterion, final student test mean (m)");
    let _ = writeln!(s, "{:<8} {:>9} {:>9}", "seed", "distance", "entropy");
    for d in &m.filter_duels {
        let _ = writeln!(s, "{:<8} {:>9.3} {:>9.3}", d.seed, d.distance_test_mean, d.entropy_test_mean);
    }
    let _ = writeln!(s, "{:<8} {:>9.3} {:>9.3}", "median", m.filter_median_distance, m.filter_median_entropy);

    let _ = writeln!(s, "\nchecks");
    for c in &m.checks {
        let _ = writeln!(s, "{} {:<18} {}", if c.pass { "ok    " } else { "FAILED" }, c.name, c.detail);
    }
    s
}

fn timed<T>(f: impl FnOnce() -> Result<T, CliError>) -> Result<(T, f64), CliError> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64()))
}

/// Runs the whole suite and writes `summary.txt`, `metrics.json` (no timings),
/// the main run's models and tables, and a `reproduce-all` record entry.
pub fn reproduce_all(ctx: &Ctx) -> Result<SuiteReport, CliError> {
    let cfg: &ExperimentConfig = &ctx.cfg;
    cfg.validate()?;
    let mut stage = StageRecord::new("reproduce-all", cfg, &ctx.overrides);
    let mut timings = SuiteTimings::default();

    eprintln!("[reproduce-all] main pipeline");
    let ((world, out), secs) = timed(|| Ok(experiments::run_pipeline(cfg, &Variant::STUDENTS)?))?;
    timings.main = secs;
    synthcv::save_world(&world, &ctx.run.world_dir())?;
    stage.artifacts.push("world/manifest.json".into());
    let teacher_path = ctx.run.output("teacher.params")?;
    locmodel::save_params(&out.teacher, &commands::teacher_hash(cfg), &teacher_path)?;
    stage.artifacts.push("teacher.params".into());
    commands::record_pipeline(ctx, &world, &out, &mut stage)?;

    let t = out.teacher_eval.test.mean();
    let mut rows = Vec::new();
    for v in [Variant::Teacher].into_iter().chain(Variant::STUDENTS) {
        let eval = match v {
            Variant::Teacher => &out.teacher_eval,
            _ => &out.students[&v].1,
        };
        rows.push(MethodRow {
            method: v.name().to_owned(),
            test_mean: eval.test.mean(),
            test_median: eval.test.median(),
            validation_mean: eval.validation.mean(),
            change_pct: 100.0 * (eval.test.mean() - t) / t,
        });
    }
    let diag = out.diagnostics.as_ref().ok_or_else(|| CliError::Runtime("pipeline produced no diagnostics".into()))?;
    let filter = out.filter.as_ref().ok_or_else(|| CliError::Runtime("pipeline produced no filter report".into()))?;
    let final_cmp = diag
        .test_teacher_vs_final
        .as_ref()
        .ok_or_else(|| CliError::Runtime("pipeline produced no final comparison".into()))?;
    let main = MainMetrics {
        rows,
        d_error_spearman: diag.d_error_spearman,
        kept_count: filter.kept_count,
        adapt_total: filter.total,
        threshold_cells: filter.threshold,
        improved: final_cmp.improved,
        worsened: final_cmp.worsened,
        unchanged: final_cmp.unchanged,
    };

    eprintln!("[reproduce-all] entropy-minimization sweep");
    let (em_sweep, secs) = timed(|| Ok(experiments::em_sweep(cfg, &world, &out.teacher)?))?;
    timings.em_sweep = secs;

    eprintln!("[reproduce-all] noisy ground truth sweep");
    let (noisy_sweep, secs) = timed(|| Ok(experiments::noisy_sweep(cfg, &world, &out.teacher)?))?;
    timings.noisy_sweep = secs;
    let noisy_means: Vec<f64> = noisy_sweep.iter().map(|p| p.test_mean).collect();
    let final_mean = main.row(Variant::StModeFiltered).map(|r| r.test_mean).unwrap_or(f64::NAN);

    eprintln!("[reproduce-all] ablation over {} seeds", cfg.suite.ablation_seeds.len());
    let (ablation, secs) = timed(|| Ok(experiments::ablation(cfg)?))?;
    timings.ablation = secs;

    eprintln!("[reproduce-all] filtering head-to-head over {} seeds", cfg.suite.filter_seeds.len());
    let (filter_duels, secs) = timed(|| Ok(experiments::filter_head_to_head(cfg)?))?;
    timings.filter_duel = secs;
    let dist: Vec<f64> = filter_duels.iter().map(|d| d.distance_test_mean).collect();
    let ent: Vec<f64> = filter_duels.iter().map(|d| d.entropy_test_mean).collect();

    let mut metrics = SuiteMetrics {
        config_hash: cfg.hash(),
        world_hash: world.hash.clone(),
        main,
        ablation,
        noisy_inversions: experiments::inversions(&noisy_means),
        noisy_crossover_m: experiments::crossover(&noisy_sweep, final_mean),
        em_sweep,
        noisy_sweep,
        filter_duels,
        filter_median_distance: experiments::median(&dist),
        filter_median_entropy: experiments::median(&ent),
        checks: Vec::new(),
    };
    metrics.checks = directional_checks(&metrics);

    let summary = render_summary(&metrics);
    fs::write(ctx.run.output("summary.txt")?, &summary)?;
    fs::write(ctx.run.output("metrics.json")?, serde_json::to_string_pretty(&metrics)? + "\n")?;
    stage.artifacts.extend(["summary.txt".into(), "metrics.json".into()]);
    stage.timings.extend(out.timings.iter().cloned());
    for (name, seconds) in [
        ("suite-main", timings.main),
        ("suite-em-sweep", timings.em_sweep),
        ("suite-noisy-sweep", timings.noisy_sweep),
        ("suite-ablation", timings.ablation),
        ("suite-filter-duel", timings.filter_duel),
    ] {
        stage.timings.push(StageTiming {
            stage: name.into(),
            seconds,
        });
    }
    ctx.run.record_stage("reproduce-all", stage)?;
    Ok(SuiteReport {
        metrics,
        timings,
        summary,
    })
}
