//! Cooperative navigation: agents spread out to cover landmarks.
//!
//! Actions: `0` no-op, `1..=4` accelerate up/down/left/right.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{distance, Entity, EnvKind, GlobalState, MOVES, NOOP};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpreadConfig {
    pub n_agents: usize,
    pub n_landmarks: usize,
    pub arena_size: f64,
    pub sight_radius: Option<f64>,
    pub episode_limit: usize,
    pub collision_penalty: f64,
    pub agent_radius: f64,
    pub acceleration: f64,
    pub damping: f64,
    /// A landmark counts as occupied when an agent is closer than this.
    pub occupancy_radius: f64,
}

impl Default for SpreadConfig {
    fn default() -> Self {
        Self {
            n_agents: 3,
            n_landmarks: 3,
            arena_size: 2.0,
            sight_radius: None,
            episode_limit: 50,
            collision_penalty: 1.0,
            agent_radius: 0.1,
            acceleration: 0.1,
            damping: 0.5,
            occupancy_radius: 0.15,
        }
    }
}

impl SpreadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 1 || self.n_landmarks < 1 {
            return Err(Error::Config("spread needs at least 1 agent and 1 landmark".into()));
        }
        if self.episode_limit == 0 {
            return Err(Error::Config("episode_limit must be >= 1".into()));
        }
        if !(self.arena_size > 0.0) || !(self.acceleration > 0.0) || !(0.0..1.0).contains(&self.damping) {
            return Err(Error::Config("arena_size and acceleration must be positive, damping in [0, 1)".into()));
        }
        if self.sight_radius.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::Config("sight_radius must be positive".into()));
        }
        if self.collision_penalty < 0.0 || self.agent_radius < 0.0 || self.occupancy_radius < 0.0 {
            return Err(Error::Config("penalty and radii must be non-negative".into()));
        }
        Ok(())
    }

    pub fn sight_radius(&self) -> f64 {
        self.sight_radius
            .unwrap_or(0.5 * (2.0 * self.arena_size * self.arena_size).sqrt())
    }

    pub(super) fn initial_state<R: Rng>(&self, rng: &mut R) -> GlobalState {
        let mut sample = || Entity::at([rng.gen_range(0.0..=self.arena_size), rng.gen_range(0.0..=self.arena_size)]);
        let agents = (0..self.n_agents).map(|_| sample()).collect();
        let others = (0..self.n_landmarks).map(|_| sample()).collect();
        GlobalState {
            kind: EnvKind::Spread,
            agents,
            others,
            step: 0,
        }
    }

    /// `-Σ_l min_i dist(i, l) - c_col · #colliding pairs`.
    pub fn reward(&self, state: &GlobalState) -> f64 {
        let coverage: f64 = state
            .others
            .iter()
            .map(|l| state.agents.iter().map(|a| distance(a.pos, l.pos)).fold(f64::INFINITY, f64::min))
            .sum();
        -coverage - self.collision_penalty * self.collisions(state) as f64
    }

    pub fn collisions(&self, state: &GlobalState) -> usize {
        let mut n = 0;
        for i in 0..state.agents.len() {
            for j in i + 1..state.agents.len() {
                if distance(state.agents[i].pos, state.agents[j].pos) < 2.0 * self.agent_radius {
                    n += 1;
                }
            }
        }
        n
    }

    /// Fraction of landmarks with an agent inside the occupancy radius.
    pub fn occupancy(&self, state: &GlobalState) -> f64 {
        let covered = state
            .others
            .iter()
            .filter(|l| state.agents.iter().any(|a| distance(a.pos, l.pos) < self.occupancy_radius))
            .count();
        covered as f64 / state.others.len() as f64
    }

    pub(super) fn advance(&self, state: &GlobalState, actions: &[usize]) -> (GlobalState, f64, f64) {
        let mut next = state.clone();
        for (agent, &a) in next.agents.iter_mut().zip(actions) {
            let push = if a == NOOP { [0.0, 0.0] } else { MOVES[a - 1] };
            for d in 0..2 {
                agent.vel[d] = self.damping * agent.vel[d] + self.acceleration * push[d];
                let p = agent.pos[d] + agent.vel[d];
                if p < 0.0 || p > self.arena_size {
                    agent.pos[d] = p.clamp(0.0, self.arena_size);
                    agent.vel[d] = 0.0;
                } else {
                    agent.pos[d] = p;
                }
            }
        }
        next.step += 1;
        let r = self.reward(&next);
        let occ = self.occupancy(&next);
        (next, r, occ)
    }
}
