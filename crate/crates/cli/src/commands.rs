//! One function per subcommand. Each reads its dependencies from the run
//! directory, checks their config hashes, and adds an entry to `record.json`.

use std::fs;
use std::path::{Path, PathBuf};

use xvkd_core::baselines::{self, EmConfig, EmMode, NoisyGtConfig};
use xvkd_core::distill::{self, PipelineOutcome, PseudoGtVariant, StageTiming, Variant};
use xvkd_core::evalkit::{self, EvalResult};
use xvkd_core::experiments::{self, ExperimentConfig};
use xvkd_core::locmodel::{self, ModelParams, TrainOutcome};
use xvkd_core::synthcv::{self, DatasetSplit, SplitRole, World};

use crate::error::CliError;
use crate::registry::{RunDir, StageRecord};

/// Resolved inputs of one invocation.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub run: RunDir,
    pub cfg: ExperimentConfig,
    /// Overrides as given on the command line, already applied to `cfg`.
    pub overrides: Vec<String>,
}

/// Hash embedded in teacher files: the world, the initialization and the teacher stage.
pub fn teacher_hash(cfg: &ExperimentConfig) -> String {
    synthcv::config_hash(&(&cfg.world, &cfg.model, &cfg.teacher))
}

fn timed<T>(timings: &mut Vec<StageTiming>, name: &str, f: impl FnOnce() -> Result<T, CliError>) -> Result<T, CliError> {
    let start = std::time::Instant::now();
    let out = f()?;
    timings.push(StageTiming {
        stage: name.to_owned(),
        seconds: start.elapsed().as_secs_f64(),
    });
    Ok(out)
}

pub fn load_world(ctx: &Ctx) -> Result<World, CliError> {
    let dir = ctx.run.world_dir();
    ctx.run.require("world/manifest.json", "gen-world")?;
    let manifest = synthcv::read_manifest(&dir)?;
    let computed = ctx.cfg.world.hash();
    if manifest.world_hash != computed {
        return Err(CliError::HashMismatch {
            what: format!("world at {}", dir.display()),
            stored: manifest.world_hash,
            computed,
        });
    }
    Ok(synthcv::load_world(&dir)?)
}

pub fn load_teacher(ctx: &Ctx) -> Result<ModelParams, CliError> {
    let path = ctx.run.require("teacher.params", "train-teacher")?;
    let (params, stored) = locmodel::load_params(&path)?;
    let computed = teacher_hash(&ctx.cfg);
    if stored != computed {
        return Err(CliError::HashMismatch {
            what: format!("teacher at {}", path.display()),
            stored,
            computed,
        });
    }
    Ok(params)
}

fn save_model(ctx: &Ctx, stage: &mut StageRecord, rel: &str, params: &ModelParams, hash: &str) -> Result<(), CliError> {
    locmodel::save_params(params, hash, &ctx.run.output(rel)?)?;
    stage.artifacts.push(rel.to_owned());
    Ok(())
}

fn write_table(
    ctx: &Ctx,
    stage: &mut StageRecord,
    rel: &str,
    f: impl FnOnce(fs::File) -> Result<(), evalkit::EvalError>,
) -> Result<(), CliError> {
    f(fs::File::create(ctx.run.output(rel)?)?)?;
    stage.artifacts.push(rel.to_owned());
    Ok(())
}

fn eval_both(stage: &mut StageRecord, name: &str, params: &ModelParams, world: &World) -> Result<EvalResult, CliError> {
    stage.eval(name, "validation", evalkit::evaluate(params, &world.validation)?);
    let test = evalkit::evaluate(params, &world.test)?;
    stage.eval(name, "test", test.clone());
    Ok(test)
}

fn report(name: &str, test: &EvalResult) {
    println!("{name:<24} test mean {:.3} m  median {:.3} m", test.mean(), test.median());
}

pub fn gen_world(ctx: &Ctx) -> Result<(), CliError> {
    ctx.cfg.world.validate()?;
    let mut stage = StageRecord::new("gen-world", &ctx.cfg, &ctx.overrides);
    let world = timed(&mut stage.timings, "generate", || Ok(synthcv::generate_world(&ctx.cfg.world)?))?;
    synthcv::save_world(&world, &ctx.run.world_dir())?;
    stage.artifacts.push("world/manifest.json".into());
    println!("world {} written to {}", world.hash, ctx.run.world_dir().display());
    for role in SplitRole::ALL {
        println!("  {:<14} {} pairs", role.name(), world.split(role).len());
    }
    ctx.run.record_stage("gen-world", stage)
}

pub fn train_teacher(ctx: &Ctx) -> Result<(), CliError> {
    ctx.cfg.validate()?;
    let world = load_world(ctx)?;
    let mut stage = StageRecord::new("train-teacher", &ctx.cfg, &ctx.overrides);
    let (params, epoch) = timed(&mut stage.timings, "train-teacher", || Ok(experiments::teacher(&ctx.cfg, &world)?))?;
    save_model(ctx, &mut stage, "teacher.params", &params, &teacher_hash(&ctx.cfg))?;
    let test = eval_both(&mut stage, "teacher", &params, &world)?;
    report(&format!("teacher (epoch {epoch})"), &test);
    ctx.run.record_stage("train-teacher", stage)
}

/// Models, evaluations, filter report and per-sample tables of a pipeline run.
pub fn record_pipeline(ctx: &Ctx, world: &World, out: &PipelineOutcome, stage: &mut StageRecord) -> Result<(), CliError> {
    let hash = ctx.cfg.hash();
    stage.eval("teacher", "validation", out.teacher_eval.validation.clone());
    stage.eval("teacher", "test", out.teacher_eval.test.clone());
    write_table(ctx, stage, "tables/test_teacher.csv", |f| {
        evalkit::write_sample_table(&evalkit::sample_rows(&out.teacher_eval.test, None, None), f)
    })?;
    if let Some((aux, eval)) = &out.aux {
        save_model(ctx, stage, "aux.params", aux, &hash)?;
        stage.eval("aux", "validation", eval.validation.clone());
        stage.eval("aux", "test", eval.test.clone());
    }
    for (v, (params, eval)) in &out.students {
        save_model(ctx, stage, &format!("students/{}.params", v.name()), params, &hash)?;
        stage.eval(v.name(), "validation", eval.validation.clone());
        stage.eval(v.name(), "test", eval.test.clone());
        write_table(ctx, stage, &format!("tables/test_{}.csv", v.name()), |f| {
            evalkit::write_sample_table(&evalkit::sample_rows(&eval.test, None, None), f)
        })?;
    }
    if let Some(filter) = &out.filter {
        // Ground truth of the adapt split is opened for this analysis table only.
        let adapt = evalkit::evaluate(&out.teacher, &world.adapt_train.unlock_gt())?;
        let rows = evalkit::sample_rows(&adapt, Some(&filter.keys()), Some(&filter.kept_flags()));
        write_table(ctx, stage, "tables/adapt_filter.csv", |f| evalkit::write_sample_table(&rows, f))?;
        stage.filter = Some(filter.clone());
    }
    if let Some(diag) = &out.diagnostics {
        write_table(ctx, stage, "tables/adapt_teacher_vs_aux_scatter.csv", |f| {
            evalkit::write_scatter(&diag.adapt_teacher_vs_aux, f)
        })?;
        if let Some(cmp) = &diag.test_teacher_vs_final {
            write_table(ctx, stage, "tables/test_teacher_vs_final_scatter.csv", |f| evalkit::write_scatter(cmp, f))?;
            write_table(ctx, stage, "tables/test_teacher_vs_final_hist.csv", |f| {
                evalkit::write_histogram(&cmp.histogram, f)
            })?;
        }
        println!("spearman(d, teacher error) on adapt: {:.3}", diag.d_error_spearman);
    }
    Ok(())
}

pub fn distill(ctx: &Ctx, variant: Variant) -> Result<(), CliError> {
    ctx.cfg.validate()?;
    let world = load_world(ctx)?;
    let teacher = load_teacher(ctx)?;
    let mut stage = StageRecord::new("distill", &ctx.cfg, &ctx.overrides);
    let out = distill::run_students(&world, &teacher, &ctx.cfg.distill, &[variant])?;
    stage.timings.extend(out.timings.iter().cloned());
    record_pipeline(ctx, &world, &out, &mut stage)?;
    report("teacher", &out.teacher_eval.test);
    for (v, (_, eval)) in &out.students {
        report(v.name(), &eval.test);
    }
    if let Some(f) = &out.filter {
        println!("kept {}/{} adapt pairs, d <= {:.3} cells", f.kept_count, f.total, f.threshold);
    }
    ctx.run.record_stage(&format!("distill:{}", variant.name()), stage)
}

pub fn baseline_em(ctx: &Ctx) -> Result<(), CliError> {
    ctx.cfg.validate()?;
    let world = load_world(ctx)?;
    let teacher = load_teacher(ctx)?;
    let cfg = &ctx.cfg;
    let mut stage = StageRecord::new("baseline-em", cfg, &ctx.overrides);
    for &omega in &cfg.em.omegas {
        let name = format!("em-omega-{omega}");
        let em = EmConfig {
            omega,
            mode: cfg.em.mode,
            sigma: cfg.teacher.sigma,
        };
        let source = (cfg.em.mode == EmMode::Joint).then_some(&world.teacher_train);
        let out: TrainOutcome = timed(&mut stage.timings, &name, || {
            Ok(baselines::train_entropy_min(&teacher, source, &world.adapt_train, &em, &cfg.em.train, None)?)
        })?;
        save_model(ctx, &mut stage, &format!("baselines/{name}.params"), &out.params, &cfg.hash())?;
        let val = evalkit::evaluate(&out.params, &world.validation)?;
        println!("omega {omega:<6} validation mean {:.3} m", val.mean());
        let test = eval_both(&mut stage, &name, &out.params, &world)?;
        report(&name, &test);
    }
    ctx.run.record_stage("baseline-em", stage)
}

pub fn baseline_noisy(ctx: &Ctx) -> Result<(), CliError> {
    ctx.cfg.validate()?;
    let world = load_world(ctx)?;
    let teacher = load_teacher(ctx)?;
    let cfg = &ctx.cfg;
    let mut stage = StageRecord::new("baseline-noisy-ft", cfg, &ctx.overrides);
    // Supervised finetuning is the one place target ground truth is used for training.
    let target = world.adapt_train.unlock_gt();
    for &bound_m in &cfg.noisy.bounds_m {
        let name = format!("noisy-bound-{bound_m}");
        let noisy = NoisyGtConfig {
            bound_m,
            seed: cfg.noisy.seed,
            sigma: cfg.distill.sigma,
        };
        let (out, corrupted) = timed(&mut stage.timings, &name, || {
            Ok(baselines::train_noisy_supervised(&teacher, &target, &noisy, &cfg.noisy.train, None)?)
        })?;
        save_model(ctx, &mut stage, &format!("baselines/{name}.params"), &out.params, &cfg.hash())?;
        let test = eval_both(&mut stage, &name, &out.params, &world)?;
        report(&format!("{name} ({} clamped)", corrupted.clamped), &test);
    }
    ctx.run.record_stage("baseline-noisy-ft", stage)
}

pub fn baseline_entropy_filter(ctx: &Ctx) -> Result<(), CliError> {
    ctx.cfg.validate()?;
    let world = load_world(ctx)?;
    let teacher = load_teacher(ctx)?;
    let cfg = &ctx.cfg;
    let mut stage = StageRecord::new("baseline-entropy-filter", cfg, &ctx.overrides);
    let adapt = &world.adapt_train;
    let pseudo = timed(&mut stage.timings, "pseudo-gt-mode", || {
        Ok(distill::make_pseudo_gt(&teacher, adapt, PseudoGtVariant::ModeBased, cfg.distill.sigma)?)
    })?;
    let filter = timed(&mut stage.timings, "entropy-filter", || {
        Ok(baselines::filter_by_entropy(&teacher, adapt, cfg.distill.t_percent)?)
    })?;
    let out = timed(&mut stage.timings, "final-student", || {
        Ok(distill::train_final_student(&teacher, adapt, &pseudo, &filter, &cfg.distill.student, None)?)
    })?;
    let name = "entropy-filtered";
    save_model(ctx, &mut stage, &format!("baselines/{name}.params"), &out.params, &cfg.hash())?;
    let unlocked = evalkit::evaluate(&teacher, &adapt.unlock_gt())?;
    let rows = evalkit::sample_rows(&unlocked, Some(&filter.keys()), Some(&filter.kept_flags()));
    write_table(ctx, &mut stage, "tables/adapt_entropy_filter.csv", |f| evalkit::write_sample_table(&rows, f))?;
    let test = eval_both(&mut stage, name, &out.params, &world)?;
    println!("kept {}/{} adapt pairs, entropy <= {:.4} nats", filter.kept_count, filter.total, filter.threshold);
    report(name, &test);
    stage.filter = Some(filter);
    ctx.run.record_stage("baseline-entropy-filter", stage)
}

/// Model files are looked up as given, then relative to the run directory.
fn resolve_model(ctx: &Ctx, path: &Path) -> Result<PathBuf, CliError> {
    if path.exists() {
        return Ok(path.to_path_buf());
    }
    let in_run = ctx.run.root.join(path);
    if in_run.exists() {
        return Ok(in_run);
    }
    Err(CliError::MissingDependency {
        path: path.to_path_buf(),
        producer: "train-teacher, distill or a baseline",
    })
}

fn split_by_name(world: &World, name: &str) -> Result<DatasetSplit, CliError> {
    let role = SplitRole::ALL
        .into_iter()
        .find(|r| r.name() == name)
        .ok_or_else(|| CliError::InvalidConfig(format!("unknown split `{name}`")))?;
    // Evaluation always needs ground truth; the adapt split is opened for analysis.
    Ok(world.split(role).unlock_gt())
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

pub fn eval(ctx: &Ctx, model: &Path, split: &str) -> Result<(), CliError> {
    let world = load_world(ctx)?;
    let data = split_by_name(&world, split)?;
    let path = resolve_model(ctx, model)?;
    let (params, _) = locmodel::load_params(&path)?;
    let mut stage = StageRecord::new("eval", &ctx.cfg, &ctx.overrides);
    let result = evalkit::evaluate(&params, &data)?;
    let name = stem(&path);
    write_table(ctx, &mut stage, &format!("tables/eval_{name}_{split}.csv"), |f| {
        evalkit::write_sample_table(&evalkit::sample_rows(&result, None, None), f)
    })?;
    println!(
        "{name} on {split}: mean {:.3} m, median {:.3} m, longitudinal {:.3}/{:.3} m, lateral {:.3}/{:.3} m",
        result.error.mean,
        result.error.median,
        result.longitudinal.mean,
        result.longitudinal.median,
        result.lateral.mean,
        result.lateral.median
    );
    stage.eval(&name, split, result);
    ctx.run.record_stage(&format!("eval:{name}:{split}"), stage)
}

pub fn compare(ctx: &Ctx, a: &Path, b: &Path, split: &str, bin_width: f64) -> Result<(), CliError> {
    if !(bin_width > 0.0) {
        return Err(CliError::InvalidConfig("bin width must be > 0".into()));
    }
    let world = load_world(ctx)?;
    let data = split_by_name(&world, split)?;
    let (pa, pb) = (resolve_model(ctx, a)?, resolve_model(ctx, b)?);
    let (ma, _) = locmodel::load_params(&pa)?;
    let (mb, _) = locmodel::load_params(&pb)?;
    let mut stage = StageRecord::new("compare", &ctx.cfg, &ctx.overrides);
    let (ea, eb) = (evalkit::evaluate(&ma, &data)?, evalkit::evaluate(&mb, &data)?);
    let cmp = evalkit::compare(&ea, &eb, bin_width)?;
    let (na, nb) = (stem(&pa), stem(&pb));
    let tag = format!("{na}_vs_{nb}_{split}");
    write_table(ctx, &mut stage, &format!("tables/compare_{tag}_scatter.csv"), |f| evalkit::write_scatter(&cmp, f))?;
    write_table(ctx, &mut stage, &format!("tables/compare_{tag}_hist.csv"), |f| {
        evalkit::write_histogram(&cmp.histogram, f)
    })?;
    println!("{na}: mean {:.3} m   {nb}: mean {:.3} m", ea.mean(), eb.mean());
    println!(
        "{nb} vs {na}: {} improved, {} worsened, {} unchanged",
        cmp.improved, cmp.worsened, cmp.unchanged
    );
    stage.eval(&na, split, ea);
    stage.eval(&nb, split, eb);
    ctx.run.record_stage(&format!("compare:{tag}"), stage)
}
