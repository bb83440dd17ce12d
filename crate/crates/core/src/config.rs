//! Experiment files, command-line overrides and multi-seed runs.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::env::{Env, EnvConfig};
use crate::error::{Error, Result};
use crate::intrinsic::IntrinsicConfig;
use crate::training::{Algo, Learner, MetricsWriter, MixerConfig, NetworkConfig, RunSummary, Trainer, TrainerConfig};

/// Name of the marker written once a seed has finished.
pub const COMPLETE_MARKER: &str = "COMPLETE";

/// A parameter sweep: one sub-experiment per value of a dotted key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub key: String,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub mixer: MixerConfig,
    pub intrinsic: IntrinsicConfig,
    pub trainer: TrainerConfig,
    pub network: NetworkConfig,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            mixer: MixerConfig::default(),
            intrinsic: IntrinsicConfig::default(),
            trainer: TrainerConfig::default(),
            network: NetworkConfig::default(),
            output_dir: PathBuf::from("runs"),
            seeds: vec![0],
            sweep: None,
        }
    }
}

/// Parses `key=value`. The value is read as JSON when it parses, otherwise
/// it is taken as a plain string (`trainer.algo=qmix-iam`).
pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{text}` has an empty key segment")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    Ok((key.to_string(), value))
}

/// Sets a dotted key inside a JSON object, creating intermediate objects.
pub fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            let parent = parts[..depth].join(".");
            return Err(Error::Config(format!("cannot set `{key}`: `{parent}` is not an object")));
        };
        if depth + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("keys have at least one segment")
}

impl ExperimentConfig {
    /// Parses JSON text. Syntax errors, unknown keys and type errors report
    /// the line and column where they occur.
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Applies dotted overrides in order.
    pub fn with_overrides(&self, overrides: &[(String, Value)]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut value = serde_json::to_value(self)?;
        for (key, v) in overrides {
            set_dotted(&mut value, key, v.clone())?;
        }
        serde_json::from_value(value).map_err(|e| {
            let keys: Vec<&str> = overrides.iter().map(|(k, _)| k.as_str()).collect();
            Error::Config(format!("after overrides {keys:?}: {e}"))
        })
    }

    /// Folds `trainer.beta` into `intrinsic.beta` so the echo is unambiguous.
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        if let Some(beta) = out.trainer.beta.take() {
            out.intrinsic.beta = beta;
        }
        out
    }

    /// One concrete configuration per sweep value (just `self` without a
    /// sweep), each paired with its subdirectory name.
    pub fn expand(&self) -> Result<Vec<(Option<String>, ExperimentConfig)>> {
        let Some(sweep) = &self.sweep else {
            return Ok(vec![(None, self.clone())]);
        };
        if sweep.values.is_empty() {
            return Err(Error::Config(format!("sweep over `{}` has no values", sweep.key)));
        }
        let base = ExperimentConfig { sweep: None, ..self.clone() };
        sweep
            .values
            .iter()
            .map(|v| {
                let label = match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                let cfg = base.with_overrides(&[(sweep.key.clone(), v.clone())])?;
                Ok((Some(format!("{}={label}", sweep.key)), cfg))
            })
            .collect()
    }

    /// Checks every section, the cross-section constraints and every sweep
    /// point, without running anything.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let unique: BTreeSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir must not be empty".into()));
        }
        for (label, cfg) in self.expand()? {
            cfg.validate_point().map_err(|e| match (label, e) {
                (Some(l), Error::Config(msg)) => Error::Config(format!("sweep point {l}: {msg}")),
                (_, e) => e,
            })?;
        }
        Ok(())
    }

    fn validate_point(&self) -> Result<()> {
        self.trainer.validate()?;
        self.intrinsic.validate()?;
        if self.network.history_window == 0 {
            return Err(Error::Config("network.history_window must be >= 1".into()));
        }
        let env = Env::new(self.env.clone())?;
        Learner::new(&env, &self.trainer, &self.network, &self.mixer, &self.intrinsic, 0).map(|_| ())
    }

    pub fn algo(&self) -> Algo {
        self.trainer.algo
    }
}

/// What happened to one seed.
#[derive(Debug, Clone, PartialEq)]
pub enum SeedOutcome {
    Completed(RunSummary),
    /// A finished run was found on disk and left untouched.
    Skipped { seed: u64, metrics: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointOutcome {
    pub label: Option<String>,
    pub dir: PathBuf,
    pub seeds: Vec<SeedOutcome>,
}

pub fn metrics_path(dir: &Path, algo: Algo, seed: u64) -> PathBuf {
    dir.join(format!("metrics_{algo}_seed{seed}.csv"))
}

pub fn checkpoint_dir(dir: &Path, algo: Algo, seed: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("{algo}_seed{seed}"))
}

/// Runs every sweep point and seed. Layout under `output_dir` (or
/// `output_dir/<key>=<value>` per sweep point):
///
/// ```text
/// config_<algo>.json
/// metrics_<algo>_seed<k>.csv
/// checkpoints/<algo>_seed<k>/{agent_<i>,mixer,...}.tndp and COMPLETE
/// ```
///
/// A seed is skipped when its metrics file exists and its `COMPLETE` marker
/// holds the same single-seed configuration; any other seed is run from
/// scratch.
pub fn run_experiment(config: &ExperimentConfig, mut log: impl FnMut(&str)) -> Result<Vec<PointOutcome>> {
    config.validate()?;
    let mut out = Vec::new();
    for (label, point) in config.expand()? {
        let point = point.normalized();
        let dir = match &label {
            Some(l) => config.output_dir.join(l),
            None => config.output_dir.clone(),
        };
        fs::create_dir_all(&dir)?;
        let algo = point.algo();
        let echo = dir.join(format!("config_{algo}.json"));
        fs::write(&echo, serde_json::to_string_pretty(&point)? + "\n")?;
        let mut seeds = Vec::new();
        for &seed in &point.seeds {
            let metrics = metrics_path(&dir, algo, seed);
            let ckpt = checkpoint_dir(&dir, algo, seed);
            let fingerprint = serde_json::to_string_pretty(&ExperimentConfig {
                seeds: vec![seed],
                ..point.clone()
            })? + "\n";
            let done = fs::read_to_string(ckpt.join(COMPLETE_MARKER)).is_ok_and(|m| m == fingerprint);
            if done && metrics.exists() {
                log(&format!("{algo} seed {seed}: already complete, skipping"));
                seeds.push(SeedOutcome::Skipped { seed, metrics });
                continue;
            }
            if ckpt.exists() {
                fs::remove_dir_all(&ckpt)?;
            }
            let env = Env::new(point.env.clone())?;
            let mut trainer = Trainer::new(env, &point.trainer, &point.network, &point.mixer, &point.intrinsic, seed)?;
            let mut writer = MetricsWriter::create(&metrics)?;
            let summary = trainer.run(|row| {
                log(&format!(
                    "{algo} seed {seed} step {}: return {:.3} score {:.3}",
                    row.step, row.eval_return, row.win_rate
                ));
                writer.write(row)
            })?;
            fs::create_dir_all(&ckpt)?;
            if point.trainer.save_checkpoints {
                trainer.learner().save(&ckpt)?;
            }
            fs::write(ckpt.join(COMPLETE_MARKER), fingerprint)?;
            seeds.push(SeedOutcome::Completed(summary));
        }
        out.push(PointOutcome { label, dir, seeds });
    }
    Ok(out)
}
