//! Built-in Dec-POMDP simulators sharing one structured observation layout.
//!
//! Every observation is
//! `[self block | one relative block per entity | one mask bit per entity]`
//! where entities are all agents (by index) followed by the environment's
//! other entities (enemies or landmarks). The self block is
//! `[x, y, scalar]` in absolute arena coordinates; a relative block is
//! `[visible, dx, dy, distance, scalar]`. An agent's own slot, and the slot
//! of any entity it cannot see, is all zero with mask bit 0, so a given
//! entity always occupies the same slot in every agent's observation.

mod focus_fire;
mod spread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use focus_fire::FocusFireConfig;
pub use spread::SpreadConfig;

pub const SELF_DIM: usize = 3;
pub const BLOCK_DIM: usize = 5;

/// Addressing helper for the fixed observation layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObsLayout {
    pub n_agents: usize,
    pub n_others: usize,
}

impl ObsLayout {
    pub fn n_entities(&self) -> usize {
        self.n_agents + self.n_others
    }

    pub fn dim(&self) -> usize {
        SELF_DIM + self.n_entities() * (BLOCK_DIM + 1)
    }

    pub fn block_offset(&self, entity: usize) -> usize {
        SELF_DIM + entity * BLOCK_DIM
    }

    pub fn mask_offset(&self, entity: usize) -> usize {
        SELF_DIM + self.n_entities() * BLOCK_DIM + entity
    }

    pub fn block<'a>(&self, obs: &'a [f64], entity: usize) -> &'a [f64] {
        let o = self.block_offset(entity);
        &obs[o..o + BLOCK_DIM]
    }

    pub fn self_block<'a>(&self, obs: &'a [f64]) -> &'a [f64] {
        &obs[..SELF_DIM]
    }

    pub fn visible(&self, obs: &[f64], entity: usize) -> bool {
        obs[self.mask_offset(entity)] != 0.0
    }

    pub fn check(&self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.dim() {
            return Err(Error::shape("<observation>", self.dim(), obs.len()));
        }
        Ok(())
    }
}

/// One simulated body: an agent, an enemy or a landmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub health: f64,
    pub max_health: f64,
    pub alive: bool,
}

impl Entity {
    pub fn at(pos: [f64; 2]) -> Self {
        Self {
            pos,
            vel: [0.0, 0.0],
            health: 1.0,
            max_health: 1.0,
            alive: true,
        }
    }

    pub fn with_health(pos: [f64; 2], health: f64) -> Self {
        Self {
            health,
            max_health: health,
            ..Self::at(pos)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    FocusFire,
    Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub kind: EnvKind,
    pub agents: Vec<Entity>,
    /// Enemies (FocusFire) or landmarks (Spread).
    pub others: Vec<Entity>,
    pub step: usize,
}

impl GlobalState {
    fn entity(&self, e: usize) -> &Entity {
        if e < self.agents.len() {
            &self.agents[e]
        } else {
            &self.others[e - self.agents.len()]
        }
    }

    /// Per-entity scalar feature: health fraction (FocusFire) or speed (Spread).
    fn scalar(&self, e: &Entity) -> f64 {
        match self.kind {
            EnvKind::FocusFire => e.health / e.max_health,
            EnvKind::Spread => (e.vel[0] * e.vel[0] + e.vel[1] * e.vel[1]).sqrt(),
        }
    }

    /// Concatenated `[x, y, scalar, alive]` records of every entity.
    pub fn features(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(4 * (self.agents.len() + self.others.len()));
        for e in self.agents.iter().chain(&self.others) {
            f.extend_from_slice(&[e.pos[0], e.pos[1], self.scalar(e), if e.alive { 1.0 } else { 0.0 }]);
        }
        f
    }
}

pub(crate) fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    (dx * dx + dy * dy).sqrt()
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: GlobalState,
    pub observations: Vec<Vec<f64>>,
    pub reward: f64,
    pub done: bool,
    /// FocusFire: every enemy destroyed.
    pub won: bool,
    /// Spread: fraction of landmarks occupied after the step.
    pub occupancy: f64,
}

/// One environment step as stored for learning.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub observations: Vec<Vec<f64>>,
    /// Per-agent history window ending at the current observation.
    pub histories: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub next_observations: Vec<Vec<f64>>,
    pub done: bool,
    pub avail: Vec<Vec<bool>>,
    pub next_avail: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    FocusFire(FocusFireConfig),
    Spread(SpreadConfig),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::FocusFire(FocusFireConfig::default())
    }
}

/// An environment definition. Simulation is functional: states are passed in
/// and returned, so one `Env` can serve many concurrent rollouts.
#[derive(Debug, Clone, PartialEq)]
pub struct Env {
    config: EnvConfig,
}

pub const NOOP: usize = 0;
pub(crate) const MOVES: [[f64; 2]; 4] = [[0.0, 1.0], [0.0, -1.0], [-1.0, 0.0], [1.0, 0.0]];

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self> {
        match &config {
            EnvConfig::FocusFire(c) => c.validate()?,
            EnvConfig::Spread(c) => c.validate()?,
        }
        Ok(Self { config })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn kind(&self) -> EnvKind {
        match self.config {
            EnvConfig::FocusFire(_) => EnvKind::FocusFire,
            EnvConfig::Spread(_) => EnvKind::Spread,
        }
    }

    pub fn n_agents(&self) -> usize {
        match &self.config {
            EnvConfig::FocusFire(c) => c.n_agents,
            EnvConfig::Spread(c) => c.n_agents,
        }
    }

    pub fn layout(&self) -> ObsLayout {
        match &self.config {
            EnvConfig::FocusFire(c) => ObsLayout {
                n_agents: c.n_agents,
                n_others: c.n_enemies,
            },
            EnvConfig::Spread(c) => ObsLayout {
                n_agents: c.n_agents,
                n_others: c.n_landmarks,
            },
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.layout().dim()
    }

    /// Size of each agent's discrete action set.
    pub fn n_actions(&self) -> usize {
        match &self.config {
            EnvConfig::FocusFire(c) => 5 + c.n_enemies,
            EnvConfig::Spread(_) => 5,
        }
    }

    pub fn state_dim(&self) -> usize {
        4 * self.layout().n_entities()
    }

    pub fn sight_radius(&self) -> f64 {
        match &self.config {
            EnvConfig::FocusFire(c) => c.sight_radius(),
            EnvConfig::Spread(c) => c.sight_radius(),
        }
    }

    pub fn episode_limit(&self) -> usize {
        match &self.config {
            EnvConfig::FocusFire(c) => c.episode_limit,
            EnvConfig::Spread(c) => c.episode_limit,
        }
    }

    pub fn arena_size(&self) -> f64 {
        match &self.config {
            EnvConfig::FocusFire(c) => c.arena_size,
            EnvConfig::Spread(c) => c.arena_size,
        }
    }

    /// Samples an initial state from the seeded start distribution.
    pub fn reset(&self, seed: u64) -> (GlobalState, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = match &self.config {
            EnvConfig::FocusFire(c) => c.initial_state(&mut rng),
            EnvConfig::Spread(c) => c.initial_state(&mut rng),
        };
        let obs = self.observe_all(&state);
        (state, obs)
    }

    pub fn observe_all(&self, state: &GlobalState) -> Vec<Vec<f64>> {
        (0..state.agents.len()).map(|i| self.observe(state, i)).collect()
    }

    /// Agent `i`'s partial view of `state`.
    pub fn observe(&self, state: &GlobalState, i: usize) -> Vec<f64> {
        let layout = self.layout();
        let mut obs = vec![0.0; layout.dim()];
        let me = &state.agents[i];
        if !me.alive {
            return obs;
        }
        obs[0] = me.pos[0];
        obs[1] = me.pos[1];
        obs[2] = state.scalar(me);
        let radius = self.sight_radius();
        for e in 0..layout.n_entities() {
            if e == i {
                continue;
            }
            let other = state.entity(e);
            if !other.alive {
                continue;
            }
            let dx = other.pos[0] - me.pos[0];
            let dy = other.pos[1] - me.pos[1];
            let dist = (dx * dx + dy * dy).sqrt();
            if dist <= radius {
                let o = layout.block_offset(e);
                obs[o..o + BLOCK_DIM].copy_from_slice(&[1.0, dx, dy, dist, state.scalar(other)]);
                obs[layout.mask_offset(e)] = 1.0;
            }
        }
        obs
    }

    pub fn available_actions(&self, state: &GlobalState, i: usize) -> Vec<bool> {
        match &self.config {
            EnvConfig::FocusFire(c) => c.available_actions(state, i),
            EnvConfig::Spread(_) => {
                let alive = state.agents[i].alive;
                (0..5).map(|a| a == NOOP || alive).collect()
            }
        }
    }

    pub fn available_all(&self, state: &GlobalState) -> Vec<Vec<bool>> {
        (0..state.agents.len()).map(|i| self.available_actions(state, i)).collect()
    }

    /// Advances the simulation by one joint action.
    pub fn step(&self, state: &GlobalState, joint_action: &[usize]) -> Result<StepOutcome> {
        if joint_action.len() != state.agents.len() {
            return Err(Error::Contract(format!(
                "joint action has {} entries for {} agents",
                joint_action.len(),
                state.agents.len()
            )));
        }
        for (i, &a) in joint_action.iter().enumerate() {
            let avail = self.available_actions(state, i);
            if a >= avail.len() || !avail[a] {
                return Err(Error::Contract(format!("action {a} is not available to agent {i}")));
            }
        }
        let (next, reward, won, occupancy) = match &self.config {
            EnvConfig::FocusFire(c) => {
                let (s, r, won) = c.advance(state, joint_action);
                (s, r, won, 0.0)
            }
            EnvConfig::Spread(c) => {
                let (s, r, occ) = c.advance(state, joint_action);
                (s, r, false, occ)
            }
        };
        let done = match &self.config {
            EnvConfig::FocusFire(c) => c.is_terminal(&next),
            EnvConfig::Spread(c) => next.step >= c.episode_limit,
        };
        let observations = self.observe_all(&next);
        Ok(StepOutcome {
            state: next,
            observations,
            reward,
            done,
            won,
            occupancy,
        })
    }
}

pub(crate) fn clamp_to_arena(p: [f64; 2], size: f64) -> [f64; 2] {
    [p[0].clamp(0.0, size), p[1].clamp(0.0, size)]
}
