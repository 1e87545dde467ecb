//! Run configuration for `dpsynth fit`.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use dpsynth_core::ingest::{infer_spec_from_csv, load_table};
use dpsynth_core::schema::PreprocSpec;
use dpsynth_core::{DiscreteTable, EngineConfig, Error, Result, TrainConfig, WorkloadSpec};

pub const RUN_CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    /// Input dataset.
    pub data_csv: PathBuf,
    /// Inline preprocessing spec; mutually exclusive with
    /// `preprocessing_path`. When neither is given, the spec is inferred
    /// from the CSV (fully numeric columns binned, the rest categorical).
    #[serde(default)]
    pub preprocessing: Option<PreprocSpec>,
    #[serde(default)]
    pub preprocessing_path: Option<PathBuf>,
    pub workload: WorkloadSpec,
    pub epsilon: f64,
    pub delta: f64,
    /// Overrides `engine.rng_seed` when set (DPSYNTH_SEED overrides both).
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub engine: EngineConfig,
    /// Overrides `engine.train` when set.
    #[serde(default)]
    pub train: Option<TrainConfig>,
    pub outputs: Outputs,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    pub model: PathBuf,
    /// JSON-lines round log; defaults to the model path with extension
    /// `rounds.jsonl`.
    #[serde(default)]
    pub round_log: Option<PathBuf>,
    /// Budget ledger JSON; defaults to the model path with extension
    /// `ledger.json`.
    #[serde(default)]
    pub ledger: Option<PathBuf>,
    /// When set, progress is checkpointed here after every round and
    /// `fit --resume` restarts from it.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.format_version != RUN_CONFIG_FORMAT_VERSION {
            return Err(Error::config(format!(
                "unsupported config format_version {}",
                self.format_version
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config(format!(
                "delta must lie in (0,1), got {}",
                self.delta
            )));
        }
        if self.preprocessing.is_some() && self.preprocessing_path.is_some() {
            return Err(Error::config(
                "give either preprocessing or preprocessing_path, not both",
            ));
        }
        if !self.data_csv.is_file() {
            return Err(Error::config(format!(
                "data_csv not found: {}",
                self.data_csv.display()
            )));
        }
        if let Some(p) = &self.preprocessing_path {
            if !p.is_file() {
                return Err(Error::config(format!(
                    "preprocessing_path not found: {}",
                    p.display()
                )));
            }
        }
        if let Some(spec) = &self.preprocessing {
            spec.validate()?;
        }
        self.engine.validate()?;
        if let Some(t) = &self.train {
            t.validate()?;
        }
        Ok(())
    }

    /// Engine settings after folding in the top-level and environment
    /// overrides.
    pub fn resolved_engine(&self, env_seed: Option<u64>) -> EngineConfig {
        let mut engine = self.engine.clone();
        if let Some(train) = self.train {
            engine.train = train;
        }
        if let Some(seed) = self.seed {
            engine.rng_seed = seed;
        }
        if let Some(seed) = env_seed {
            engine.rng_seed = seed;
        }
        engine
    }

    pub fn load_data(&self) -> Result<DiscreteTable> {
        let spec = match (&self.preprocessing, &self.preprocessing_path) {
            (Some(spec), None) => spec.clone(),
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path)?;
                let spec: PreprocSpec = serde_json::from_str(&text)?;
                spec.validate()?;
                spec
            }
            (None, None) => infer_spec_from_csv(&self.data_csv)?,
            (Some(_), Some(_)) => unreachable!("rejected in validate"),
        };
        load_table(&self.data_csv, &spec)
    }

    pub fn round_log_path(&self) -> PathBuf {
        self.outputs
            .round_log
            .clone()
            .unwrap_or_else(|| self.outputs.model.with_extension("rounds.jsonl"))
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.outputs
            .ledger
            .clone()
            .unwrap_or_else(|| self.outputs.model.with_extension("ledger.json"))
    }
}
