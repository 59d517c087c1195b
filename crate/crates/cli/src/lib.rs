//! Command-line runner for the distillation experiments.
//!
//! Every subcommand resolves an [`ExperimentConfig`](xvkd_core::experiments::ExperimentConfig)
//! (the built-in reference, or a TOML file, then `--set` overrides and
//! subcommand flags), works inside one run directory and appends to its
//! `record.json`. See [`error::exit`] for exit codes.

pub mod commands;
pub mod config;
pub mod error;
pub mod registry;
pub mod suite;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use xvkd_core::baselines::EmMode;
use xvkd_core::distill::Variant;

use crate::commands::Ctx;
use crate::error::{exit, CliError};
use crate::registry::{RunDir, OUT_ENV};

#[derive(Debug, Parser)]
#[command(name = "xvkd", version, about = "Self-distillation for cross-view localization on synthetic worlds")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Root of the run registry.
    #[arg(long, global = true, env = OUT_ENV, default_value = "runs")]
    pub out: PathBuf,
    /// Run id; all stages of one experiment share it.
    #[arg(long, global = true, default_value = "default")]
    pub run: String,
    /// Experiment config (TOML). Defaults to the built-in reference experiment.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// World section alone (both domain specs, geometry, counts) as TOML; replaces the config's world.
    #[arg(long, global = true)]
    pub world_config: Option<PathBuf>,
    /// Override a config value, e.g. `--set teacher.train.epochs=4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and persist the synthetic world.
    GenWorld,
    /// Train the source teacher.
    TrainTeacher {
        #[arg(long)]
        k_prime: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one student variant from the stored teacher.
    Distill {
        /// st-m-of, st+m-of, st+m+of or st+m+a.
        #[arg(long, value_parser = parse_variant)]
        variant: Variant,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        t_percent: Option<f64>,
        #[arg(long)]
        k_prime: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Entropy minimization from the teacher, one model per weight.
    BaselineEm {
        /// Entropy weight; repeat for several. Defaults to the config's sweep.
        #[arg(long)]
        omega: Vec<f64>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<EmMode>,
    },
    /// Supervised finetuning on target ground truth shifted by up to `bound` meters per axis.
    BaselineNoisyFt {
        /// Offset bound in meters; repeat for several. Defaults to the config's sweep.
        #[arg(long)]
        bound: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Final student trained on the pairs with the lowest teacher entropy.
    BaselineEntropyFilter {
        #[arg(long)]
        t_percent: Option<f64>,
    },
    /// Evaluate a stored model on one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Paired per-sample comparison of two stored models.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Histogram bin width of the error change, meters.
        #[arg(long, default_value_t = 1.0)]
        bin_width: f64,
    },
    /// Run every experiment and write `summary.txt` and `metrics.json`.
    ReproduceAll,
    /// Print the effective config as TOML.
    PrintConfig,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    match Variant::parse(s) {
        Some(Variant::Teacher) | None => Err(format!("expected one of st-m-of, st+m-of, st+m+of, st+m+a; got `{s}`")),
        Some(v) => Ok(v),
    }
}

fn parse_mode(s: &str) -> Result<EmMode, String> {
    match s {
        "joint" => Ok(EmMode::Joint),
        "finetune-only" => Ok(EmMode::FinetuneOnly),
        _ => Err(format!("expected joint or finetune-only; got `{s}`")),
    }
}

fn list(values: &[f64]) -> String {
    let items: Vec<String> = values.iter().map(|v| format!("{v:?}")).collect();
    format!("[{}]", items.join(", "))
}

/// Subcommand flags as `path=value` overrides, in a fixed order.
fn flag_overrides(cmd: &Command) -> Vec<String> {
    let mut out = Vec::new();
    let mut push = |path: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push(format!("{path}={v}"));
        }
    };
    match cmd {
        Command::TrainTeacher {
            k_prime,
            sigma,
            epochs,
            seed,
        } => {
            push("teacher.train.k_prime", k_prime.map(|v| v.to_string()));
            push("teacher.sigma", sigma.map(|v| format!("{v:?}")));
            push("teacher.train.epochs", epochs.map(|v| v.to_string()));
            push("teacher.train.seed", seed.map(|v| v.to_string()));
        }
        Command::Distill {
            sigma,
            t_percent,
            k_prime,
            seed,
            ..
        } => {
            push("distill.sigma", sigma.map(|v| format!("{v:?}")));
            push("distill.t_percent", t_percent.map(|v| format!("{v:?}")));
            push("distill.student.k_prime", k_prime.map(|v| v.to_string()));
            push("distill.student.seed", seed.map(|v| v.to_string()));
        }
        Command::BaselineEm { omega, mode } => {
            push("em.omegas", (!omega.is_empty()).then(|| list(omega)));
            push(
                "em.mode",
                mode.map(|m| match m {
                    EmMode::Joint => "\"joint\"".to_owned(),
                    EmMode::FinetuneOnly => "\"finetune-only\"".to_owned(),
                }),
            );
        }
        Command::BaselineNoisyFt { bound, seed } => {
            push("noisy.bounds_m", (!bound.is_empty()).then(|| list(bound)));
            push("noisy.seed", seed.map(|v| v.to_string()));
        }
        Command::BaselineEntropyFilter { t_percent } => {
            push("distill.t_percent", t_percent.map(|v| format!("{v:?}")));
        }
        _ => {}
    }
    out
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = config::load(cli.global.config.as_deref())?;
    if let Some(p) = &cli.global.world_config {
        cfg.world = config::load_world(p)?;
    }
    let mut overrides = cli.global.set.clone();
    overrides.extend(flag_overrides(&cli.command));
    let cfg = config::apply_overrides(&cfg, &overrides)?;
    if let Command::PrintConfig = cli.command {
        print!("{}", config::to_toml(&cfg)?);
        return Ok(());
    }
    let ctx = Ctx {
        run: RunDir::new(&cli.global.out, &cli.global.run)?,
        cfg,
        overrides,
    };
    match &cli.command {
        Command::GenWorld => commands::gen_world(&ctx),
        Command::TrainTeacher { .. } => commands::train_teacher(&ctx),
        Command::Distill { variant, .. } => commands::distill(&ctx, *variant),
        Command::BaselineEm { .. } => commands::baseline_em(&ctx),
        Command::BaselineNoisyFt { .. } => commands::baseline_noisy(&ctx),
        Command::BaselineEntropyFilter { .. } => commands::baseline_entropy_filter(&ctx),
        Command::Eval { model, split } => commands::eval(&ctx, model, split),
        Command::Compare {
            a,
            b,
            split,
            bin_width,
        } => commands::compare(&ctx, a, b, split, *bin_width),
        Command::ReproduceAll => {
            let report = suite::reproduce_all(&ctx)?;
            print!("{}", report.summary);
            let failed: Vec<&str> = report
                .metrics
                .checks
                .iter()
                .filter(|c| !c.pass)
                .map(|c| c.name.as_str())
                .collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::CheckFailed(failed.join(", ")))
            }
        }
        Command::PrintConfig => unreachable!("handled above"),
    }
}

/// Parses `args` (program name first) and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("xvkd: {e}");
            e.exit_code()
        }
    }
}
