//! One flat directory per run id holding every artifact and `record.json`.
//!
//! Layout of a run directory:
//!
//! ```text
//! record.json             ExperimentRecord, one entry per executed stage
//! world/                  manifest.json + binary maps and splits
//! teacher.params
//! aux.params
//! students/<variant>.params
//! baselines/<name>.params
//! tables/*.csv
//! summary.txt, metrics.json   (reproduce-all)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xvkd_core::distill::StageTiming;
use xvkd_core::experiments::ExperimentConfig;
use xvkd_core::{EvalResult, FilterReport};

use crate::error::CliError;

pub const OUT_ENV: &str = "XVKD_OUT";
pub const RECORD_FILE: &str = "record.json";

#[derive(Debug, Clone)]
pub struct RunDir {
    pub id: String,
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(out_root: &Path, id: &str) -> Result<Self, CliError> {
        if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
            return Err(CliError::InvalidConfig(format!("bad run id `{id}`")));
        }
        Ok(Self {
            id: id.to_owned(),
            root: out_root.join(id),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn world_dir(&self) -> PathBuf {
        self.path("world")
    }

    /// Creates the parent directory of `rel` and returns the full path.
    pub fn output(&self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    /// Fails with a missing-dependency error unless `rel` exists.
    pub fn require(&self, rel: &str, producer: &'static str) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::MissingDependency { path: p, producer })
        }
    }

    pub fn load_record(&self) -> Result<ExperimentRecord, CliError> {
        let p = self.path(RECORD_FILE);
        if !p.exists() {
            return Ok(ExperimentRecord {
                run_id: self.id.clone(),
                stages: BTreeMap::new(),
            });
        }
        Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
    }

    /// Adds or replaces one stage entry of `record.json`.
    pub fn record_stage(&self, key: &str, stage: StageRecord) -> Result<(), CliError> {
        let mut rec = self.load_record()?;
        rec.stages.insert(key.to_owned(), stage);
        let p = self.output(RECORD_FILE)?;
        fs::write(p, serde_json::to_string_pretty(&rec)? + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub run_id: String,
    pub stages: BTreeMap<String, StageRecord>,
}

/// What one subcommand did. Everything except `timings` is reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub command: String,
    /// Hash of `config`, also embedded in every model file this stage wrote.
    pub config_hash: String,
    pub world_hash: String,
    /// Command-line overrides as given, in order.
    pub overrides: Vec<String>,
    pub config: ExperimentConfig,
    pub timings: Vec<StageTiming>,
    /// Evaluations keyed by model name then split name.
    pub evals: BTreeMap<String, BTreeMap<String, EvalResult>>,
    pub filter: Option<FilterReport>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
}

impl StageRecord {
    pub fn new(command: &str, cfg: &ExperimentConfig, overrides: &[String]) -> Self {
        Self {
            command: command.to_owned(),
            config_hash: cfg.hash(),
            world_hash: cfg.world.hash(),
            overrides: overrides.to_vec(),
            config: cfg.clone(),
            timings: Vec::new(),
            evals: BTreeMap::new(),
            filter: None,
            artifacts: Vec::new(),
        }
    }

    pub fn eval(&mut self, model: &str, split: &str, result: EvalResult) {
        self.evals.entry(model.to_owned()).or_default().insert(split.to_owned(), result);
    }
}
