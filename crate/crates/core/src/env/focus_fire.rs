//! Small combat scenario where agents must concentrate fire to win.
//!
//! Actions: `0` no-op, `1..=4` move up/down/left/right, `5 + m` attack enemy
//! `m`. Enemies are scripted: each attacks the nearest living agent inside its
//! range, otherwise steps toward it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{clamp_to_arena, distance, Entity, EnvKind, GlobalState, MOVES, NOOP};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocusFireConfig {
    pub n_agents: usize,
    pub n_enemies: usize,
    pub arena_size: f64,
    /// Defaults to half the arena diagonal.
    pub sight_radius: Option<f64>,
    pub episode_limit: usize,
    pub agent_health: f64,
    pub enemy_health: f64,
    pub agent_damage: f64,
    pub enemy_damage: f64,
    pub agent_attack_range: f64,
    pub enemy_attack_range: f64,
    pub move_step: f64,
    pub enemy_move_step: f64,
    pub kill_bonus: f64,
    /// Divides damage plus kill bonus. Defaults to the value that makes the
    /// best possible episode return equal 20.
    pub reward_normalizer: Option<f64>,
    /// Half-width of the square spawn regions.
    pub spawn_jitter: f64,
}

impl Default for FocusFireConfig {
    fn default() -> Self {
        Self {
            n_agents: 4,
            n_enemies: 5,
            arena_size: 12.0,
            sight_radius: None,
            episode_limit: 100,
            agent_health: 7.0,
            enemy_health: 5.0,
            agent_damage: 1.0,
            enemy_damage: 1.5,
            agent_attack_range: 3.5,
            enemy_attack_range: 3.0,
            move_step: 0.5,
            enemy_move_step: 0.5,
            kill_bonus: 10.0,
            reward_normalizer: None,
            spawn_jitter: 2.5,
        }
    }
}

impl FocusFireConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 2 {
            return Err(Error::Config("focus_fire needs at least 2 agents".into()));
        }
        if self.n_enemies < 1 {
            return Err(Error::Config("focus_fire needs at least 1 enemy".into()));
        }
        if self.episode_limit == 0 {
            return Err(Error::Config("episode_limit must be >= 1".into()));
        }
        let positive = [
            ("arena_size", self.arena_size),
            ("agent_health", self.agent_health),
            ("enemy_health", self.enemy_health),
            ("agent_damage", self.agent_damage),
            ("agent_attack_range", self.agent_attack_range),
            ("move_step", self.move_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.sight_radius.is_some_and(|r| !(r > 0.0)) || self.reward_normalizer.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::Config("sight_radius and reward_normalizer must be positive".into()));
        }
        if self.enemy_damage < 0.0 || self.kill_bonus < 0.0 || self.spawn_jitter < 0.0 || self.enemy_move_step < 0.0 {
            return Err(Error::Config("damage, bonus, jitter and step values must be non-negative".into()));
        }
        Ok(())
    }

    pub fn sight_radius(&self) -> f64 {
        self.sight_radius
            .unwrap_or(0.5 * (2.0 * self.arena_size * self.arena_size).sqrt())
    }

    pub fn reward_normalizer(&self) -> f64 {
        self.reward_normalizer
            .unwrap_or(self.n_enemies as f64 * (self.enemy_health + self.kill_bonus) / 20.0)
    }

    pub(super) fn initial_state<R: Rng>(&self, rng: &mut R) -> GlobalState {
        let mid = 0.5 * self.arena_size;
        let spawn = |rng: &mut R, cx: f64| {
            let j = self.spawn_jitter;
            let p = [cx + rng.gen_range(-j..=j), mid + rng.gen_range(-j..=j)];
            clamp_to_arena(p, self.arena_size)
        };
        let agents = (0..self.n_agents)
            .map(|_| Entity::with_health(spawn(rng, 0.25 * self.arena_size), self.agent_health))
            .collect();
        let others = (0..self.n_enemies)
            .map(|_| Entity::with_health(spawn(rng, 0.75 * self.arena_size), self.enemy_health))
            .collect();
        GlobalState {
            kind: EnvKind::FocusFire,
            agents,
            others,
            step: 0,
        }
    }

    pub(super) fn available_actions(&self, state: &GlobalState, i: usize) -> Vec<bool> {
        let me = &state.agents[i];
        let mut avail = vec![false; 5 + self.n_enemies];
        avail[NOOP] = true;
        if !me.alive {
            return avail;
        }
        for (k, dir) in MOVES.iter().enumerate() {
            let x = me.pos[0] + dir[0] * self.move_step;
            let y = me.pos[1] + dir[1] * self.move_step;
            avail[1 + k] = (0.0..=self.arena_size).contains(&x) && (0.0..=self.arena_size).contains(&y);
        }
        for (m, enemy) in state.others.iter().enumerate() {
            avail[5 + m] = enemy.alive && distance(me.pos, enemy.pos) <= self.agent_attack_range;
        }
        avail
    }

    pub(super) fn is_terminal(&self, state: &GlobalState) -> bool {
        state.others.iter().all(|e| !e.alive) || state.agents.iter().all(|a| !a.alive) || state.step >= self.episode_limit
    }

    /// Returns `(next state, reward, won)`. Actions are assumed available.
    pub(super) fn advance(&self, state: &GlobalState, actions: &[usize]) -> (GlobalState, f64, bool) {
        let mut next = state.clone();
        let mut incoming = vec![0.0; self.n_enemies];
        for (i, &a) in actions.iter().enumerate() {
            if !state.agents[i].alive {
                continue;
            }
            match a {
                NOOP => {}
                1..=4 => {
                    let dir = MOVES[a - 1];
                    let p = &mut next.agents[i].pos;
                    *p = clamp_to_arena([p[0] + dir[0] * self.move_step, p[1] + dir[1] * self.move_step], self.arena_size);
                }
                _ => incoming[a - 5] += self.agent_damage,
            }
        }

        let mut damage = 0.0;
        let mut kills = 0usize;
        for (enemy, hit) in next.others.iter_mut().zip(&incoming) {
            if !enemy.alive || *hit == 0.0 {
                continue;
            }
            let dealt = hit.min(enemy.health);
            enemy.health -= dealt;
            damage += dealt;
            if enemy.health <= 0.0 {
                enemy.health = 0.0;
                enemy.alive = false;
                kills += 1;
            }
        }

        // scripted enemies act on the post-move, post-damage state
        let mut agent_hits = vec![0.0; self.n_agents];
        for m in 0..self.n_enemies {
            if !next.others[m].alive {
                continue;
            }
            let epos = next.others[m].pos;
            let target = next
                .agents
                .iter()
                .enumerate()
                .filter(|(_, a)| a.alive)
                .map(|(i, a)| (i, distance(epos, a.pos)))
                .min_by(|x, y| x.1.total_cmp(&y.1));
            let Some((i, d)) = target else { continue };
            if d <= self.enemy_attack_range {
                agent_hits[i] += self.enemy_damage;
            } else if d > 0.0 {
                let apos = next.agents[i].pos;
                let step = self.enemy_move_step.min(d);
                let p = [
                    epos[0] + (apos[0] - epos[0]) / d * step,
                    epos[1] + (apos[1] - epos[1]) / d * step,
                ];
                next.others[m].pos = clamp_to_arena(p, self.arena_size);
            }
        }
        for (agent, hit) in next.agents.iter_mut().zip(&agent_hits) {
            if *hit > 0.0 {
                agent.health = (agent.health - hit).max(0.0);
                if agent.health <= 0.0 {
                    agent.alive = false;
                }
            }
        }

        next.step += 1;
        let won = next.others.iter().all(|e| !e.alive);
        let reward = (damage + self.kill_bonus * kills as f64) / self.reward_normalizer();
        (next, reward, won)
    }
}
