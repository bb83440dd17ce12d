//! Replay, rollouts, the learner update and the run loop.

mod buffer;
mod learner;
mod metrics;
mod rollout;
mod trainer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixer::MixerKind;

pub use buffer::ReplayBuffer;
pub use learner::{make_batch, Learner, TrainStats};
pub use metrics::{read_metrics, MetricsRow, MetricsWriter, METRICS_HEADER};
pub use rollout::{collect_parallel, collect_rollouts, evaluate, EvalMetrics, PolicySnapshot, RolloutStats, RolloutWorker};
pub use trainer::{RunSummary, Trainer};

/// Training algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub enum Algo {
    #[serde(rename = "iql")]
    Iql,
    #[serde(rename = "vdn")]
    Vdn,
    #[default]
    #[serde(rename = "qmix")]
    Qmix,
    #[serde(rename = "vdn-ra")]
    VdnRa,
    #[serde(rename = "qmix-ra")]
    QmixRa,
    #[serde(rename = "vdn-iam")]
    VdnIam,
    #[serde(rename = "qmix-iam")]
    QmixIam,
}

impl Algo {
    pub const ALL: [Algo; 7] = [
        Algo::Iql,
        Algo::Vdn,
        Algo::Qmix,
        Algo::VdnRa,
        Algo::QmixRa,
        Algo::VdnIam,
        Algo::QmixIam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Iql => "iql",
            Algo::Vdn => "vdn",
            Algo::Qmix => "qmix",
            Algo::VdnRa => "vdn-ra",
            Algo::QmixRa => "qmix-ra",
            Algo::VdnIam => "vdn-iam",
            Algo::QmixIam => "qmix-iam",
        }
    }

    /// Mixer used by the algorithm; `None` for independent learners.
    pub fn mixer_kind(self) -> Option<MixerKind> {
        match self {
            Algo::Iql => None,
            Algo::Vdn | Algo::VdnRa | Algo::VdnIam => Some(MixerKind::Vdn),
            Algo::Qmix | Algo::QmixRa | Algo::QmixIam => Some(MixerKind::Qmix),
        }
    }

    /// Trains with per-agent reward-additive losses instead of the global loss.
    pub fn factorized(self) -> bool {
        matches!(self, Algo::VdnRa | Algo::QmixRa | Algo::VdnIam | Algo::QmixIam)
    }

    pub fn uses_action_model(self) -> bool {
        matches!(self, Algo::VdnIam | Algo::QmixIam)
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub algo: Algo,
    pub gamma: f64,
    /// Alias for `intrinsic.beta`; takes precedence when set.
    pub beta: Option<f64>,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub rollout_workers: usize,
    pub total_env_steps: u64,
    /// Environment steps collected per learner step.
    pub train_interval: usize,
    /// Transitions required in the buffer before learning starts.
    pub learning_starts: usize,
    /// Learner steps between hard target-network copies.
    pub target_update_interval: u64,
    pub lr_agent: f64,
    pub lr_mixer: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub save_checkpoints: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Qmix,
            gamma: 0.99,
            beta: None,
            batch_size: 32,
            buffer_capacity: 5000,
            rollout_workers: 1,
            total_env_steps: 200_000,
            train_interval: 8,
            learning_starts: 500,
            target_update_interval: 200,
            lr_agent: 5e-4,
            lr_mixer: 5e-4,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_anneal_steps: 50_000,
            eval_interval: 10_000,
            eval_episodes: 20,
            save_checkpoints: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as u64),
            ("buffer_capacity", self.buffer_capacity as u64),
            ("rollout_workers", self.rollout_workers as u64),
            ("train_interval", self.train_interval as u64),
            ("target_update_interval", self.target_update_interval),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes as u64),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("trainer.{name} must be >= 1")));
            }
        }
        if self.batch_size > self.buffer_capacity {
            return Err(Error::Config("trainer.batch_size exceeds buffer_capacity".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("trainer.gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if self.beta.is_some_and(|b| !(b >= 0.0 && b.is_finite())) {
            return Err(Error::Config("trainer.beta must be finite and >= 0".into()));
        }
        for (name, v) in [("lr_agent", self.lr_agent), ("lr_mixer", self.lr_mixer)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("trainer.{name} must be finite and >= 0")));
            }
        }
        let eps_ok = |e: f64| (0.0..=1.0).contains(&e);
        if !eps_ok(self.epsilon_start) || !eps_ok(self.epsilon_end) {
            return Err(Error::Config("epsilon values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Linearly annealed exploration rate after `env_steps` steps.
    pub fn epsilon(&self, env_steps: u64) -> f64 {
        if env_steps >= self.epsilon_anneal_steps {
            return self.epsilon_end;
        }
        let frac = env_steps as f64 / self.epsilon_anneal_steps as f64;
        self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub hidden_dims: Vec<usize>,
    pub history_window: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64, 64],
            history_window: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixerConfig {
    /// Must agree with the algorithm when given.
    pub kind: Option<MixerKind>,
    pub embed_dim: usize,
    pub hypernet_hidden: usize,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self {
            kind: None,
            embed_dim: 32,
            hypernet_hidden: 64,
        }
    }
}
