use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed-length window of `(observation, previous-action one-hot)` pairs
/// standing in for an agent's full observation-action history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEncoderConfig {
    pub window: usize,
}

impl Default for HistoryEncoderConfig {
    fn default() -> Self {
        Self { window: 4 }
    }
}

impl HistoryEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("history window must be >= 1".into()));
        }
        Ok(())
    }

    pub fn frame_dim(&self, obs_dim: usize, n_actions: usize) -> usize {
        obs_dim + n_actions
    }

    pub fn encoded_dim(&self, obs_dim: usize, n_actions: usize) -> usize {
        self.window * self.frame_dim(obs_dim, n_actions)
    }

    /// Window that follows `window` after taking `action` and observing `next_obs`.
    pub fn advance(&self, window: &[f64], next_obs: &[f64], action: usize, n_actions: usize) -> Vec<f64> {
        let frame = next_obs.len() + n_actions;
        debug_assert_eq!(window.len(), self.window * frame);
        let mut out = Vec::with_capacity(window.len());
        out.extend_from_slice(&window[frame..]);
        push_frame(&mut out, next_obs, Some(action), n_actions);
        out
    }

    /// The newest observation stored in an encoded window.
    pub fn latest_obs<'a>(&self, window: &'a [f64], obs_dim: usize, n_actions: usize) -> &'a [f64] {
        let start = window.len() - (obs_dim + n_actions);
        &window[start..start + obs_dim]
    }
}

fn push_frame(out: &mut Vec<f64>, obs: &[f64], prev_action: Option<usize>, n_actions: usize) {
    out.extend_from_slice(obs);
    let start = out.len();
    out.resize(start + n_actions, 0.0);
    if let Some(a) = prev_action {
        out[start + a] = 1.0;
    }
}

/// Rolling history for one agent during a rollout.
#[derive(Debug, Clone)]
pub struct HistoryWindow {
    config: HistoryEncoderConfig,
    obs_dim: usize,
    n_actions: usize,
    encoded: Vec<f64>,
}

impl HistoryWindow {
    /// Starts an episode: older slots are zero padding.
    pub fn start(config: HistoryEncoderConfig, first_obs: &[f64], n_actions: usize) -> Self {
        let obs_dim = first_obs.len();
        let frame = obs_dim + n_actions;
        let mut encoded = vec![0.0; (config.window - 1) * frame];
        push_frame(&mut encoded, first_obs, None, n_actions);
        Self {
            config,
            obs_dim,
            n_actions,
            encoded,
        }
    }

    pub fn push(&mut self, obs: &[f64], action: usize) {
        debug_assert_eq!(obs.len(), self.obs_dim);
        self.encoded = self.config.advance(&self.encoded, obs, action, self.n_actions);
    }

    pub fn encoded(&self) -> &[f64] {
        &self.encoded
    }
}
