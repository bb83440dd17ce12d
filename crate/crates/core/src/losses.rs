//! TD losses for factorized value learning.
//!
//! Three ways to train the same decomposition:
//!
//! * [`ctde_global_loss`]: `L^G = mean_b (y_b - q_tot_b)²`, differentiated through
//!   the mixer into every agent.
//! * [`ra_factorized_losses`]: agent `i` minimises `L_i = mean_b P_i^b · q_tot_b`
//!   with the constant factor `P_i^b = -2(y_b + β r_i^b - q_tot_b)`. Each `θ_i`
//!   follows `∂L_i/∂θ_i`; the mixer follows `(1/N) Σ_i ∂L_i/∂φ`. With `β = 0`
//!   the gradients coincide with those of `L^G`.
//! * [`iql_loss`]: independent TD learning, optionally with an additive reward
//!   bonus. With the bonus from [`vdn_corollary_terms`] it reproduces the VDN
//!   gradient for each agent.

use crate::error::{Error, Result};
use crate::mixer::{mix_backward, mix_forward_batch, mix_predict_batch, MixerSpec};
use crate::nn::{mlp_backward_accumulate, mlp_forward_batch, mlp_predict_batch, ForwardCache, MlpSpec, ParameterSet};

/// A minibatch laid out agent-major so each agent's network runs once per batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    pub input_dim: usize,
    pub state_dim: usize,
    /// Per agent, `B x input_dim` encoded histories.
    pub inputs: Vec<Vec<f64>>,
    pub next_inputs: Vec<Vec<f64>>,
    /// Per agent, `B` chosen actions.
    pub actions: Vec<Vec<usize>>,
    /// Per agent, `B x n_actions` availability in the next step.
    pub next_avail: Vec<Vec<bool>>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// `B x state_dim`.
    pub states: Vec<f64>,
    pub next_states: Vec<f64>,
}

impl Batch {
    pub fn validate(&self) -> Result<()> {
        let (b, n, a) = (self.size, self.n_agents, self.n_actions);
        if b == 0 || n == 0 || a == 0 {
            return Err(Error::Contract(format!("empty batch dimensions (B={b}, N={n}, A={a})")));
        }
        let per_agent = [
            ("inputs", &self.inputs, b * self.input_dim),
            ("next_inputs", &self.next_inputs, b * self.input_dim),
        ];
        for (name, v, len) in per_agent {
            if v.len() != n || v.iter().any(|x| x.len() != len) {
                return Err(Error::shape(name, format!("{n} x {len}"), v.iter().map(Vec::len).sum::<usize>()));
            }
        }
        if self.actions.len() != n || self.actions.iter().any(|x| x.len() != b) {
            return Err(Error::shape("actions", format!("{n} x {b}"), self.actions.len()));
        }
        if self.actions.iter().flatten().any(|&x| x >= a) {
            return Err(Error::Contract(format!("action index out of range (n_actions = {a})")));
        }
        if self.next_avail.len() != n || self.next_avail.iter().any(|x| x.len() != b * a) {
            return Err(Error::shape("next_avail", format!("{n} x {}", b * a), self.next_avail.len()));
        }
        if self.rewards.len() != b || self.dones.len() != b {
            return Err(Error::shape("rewards/dones", b, self.rewards.len().min(self.dones.len())));
        }
        if self.states.len() != b * self.state_dim || self.next_states.len() != b * self.state_dim {
            return Err(Error::shape("states", b * self.state_dim, self.states.len()));
        }
        Ok(())
    }
}

/// Online or target networks for all agents plus the mixer.
#[derive(Debug, Clone, Copy)]
pub struct ValueNets<'a> {
    pub q_spec: &'a MlpSpec,
    pub theta: &'a [ParameterSet],
    pub mixer: &'a MixerSpec,
    pub phi: &'a ParameterSet,
}

impl ValueNets<'_> {
    fn check(&self, batch: &Batch) -> Result<()> {
        batch.validate()?;
        if self.theta.len() != batch.n_agents || self.mixer.n_agents != batch.n_agents {
            return Err(Error::shape("<agent networks>", batch.n_agents, self.theta.len()));
        }
        if self.q_spec.input_dim != batch.input_dim || self.q_spec.output_dim != batch.n_actions {
            return Err(Error::shape(
                "<q network>",
                format!("{} -> {}", batch.input_dim, batch.n_actions),
                format!("{} -> {}", self.q_spec.input_dim, self.q_spec.output_dim),
            ));
        }
        Ok(())
    }
}

/// `r + γ(1 - done) · next`. Every TD target in this module goes through here
/// so that algebraically equal targets are also bitwise equal.
pub fn td_target(reward: f64, gamma: f64, done: bool, next: f64) -> f64 {
    let live = if done { 0.0 } else { 1.0 };
    reward + gamma * live * next
}

/// Largest available value in each row of `q` (`B x A`). A row with no
/// available action yields 0.
pub fn masked_max(q: &[f64], avail: &[bool], n_actions: usize) -> Vec<f64> {
    q.chunks_exact(n_actions)
        .zip(avail.chunks_exact(n_actions))
        .map(|(row, mask)| {
            row.iter()
                .zip(mask)
                .filter(|(_, ok)| **ok)
                .map(|(v, _)| *v)
                .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
                .unwrap_or(0.0)
        })
        .collect()
}

/// Per-agent greedy next-step values `max_a Q_i⁻(τ'_i, a)`, as `B x N`.
pub fn greedy_next_values(q_spec: &MlpSpec, theta_target: &[ParameterSet], batch: &Batch) -> Result<Vec<f64>> {
    let (b, n) = (batch.size, batch.n_agents);
    let mut out = vec![0.0; b * n];
    for (i, params) in theta_target.iter().enumerate() {
        let q = mlp_predict_batch(q_spec, params, &batch.next_inputs[i], b)?;
        for (k, v) in masked_max(&q, &batch.next_avail[i], batch.n_actions).into_iter().enumerate() {
            out[k * n + i] = v;
        }
    }
    Ok(out)
}

/// `y_b = r_b + γ(1 - done_b) · F(max Q⁻(τ'), s'_b; φ⁻)`. Monotone mixing makes
/// the per-agent greedy choice the joint maximiser.
pub fn bootstrap_target(target: &ValueNets<'_>, batch: &Batch, gamma: f64) -> Result<Vec<f64>> {
    target.check(batch)?;
    let next = greedy_next_values(target.q_spec, target.theta, batch)?;
    let mixed = mix_predict_batch(target.mixer, target.phi, &next, &batch.next_states, batch.size)?;
    Ok((0..batch.size)
        .map(|b| td_target(batch.rewards[b], gamma, batch.dones[b], mixed[b]))
        .collect())
}

struct AgentPass {
    cache: ForwardCache,
}

/// Runs every agent network and gathers chosen-action values as `B x N`.
fn forward_agents(nets: &ValueNets<'_>, batch: &Batch) -> Result<(Vec<f64>, Vec<AgentPass>)> {
    let (b, n, a) = (batch.size, batch.n_agents, batch.n_actions);
    let mut chosen = vec![0.0; b * n];
    let mut passes = Vec::with_capacity(n);
    for i in 0..n {
        let (q, cache) = mlp_forward_batch(nets.q_spec, &nets.theta[i], &batch.inputs[i], b)?;
        for (k, &act) in batch.actions[i].iter().enumerate() {
            chosen[k * n + i] = q[k * a + act];
        }
        passes.push(AgentPass { cache });
    }
    Ok((chosen, passes))
}

/// Back-propagates `dq[b, i]` (column `i` of a `B x N` matrix) into agent `i`.
fn backward_agent(
    q_spec: &MlpSpec,
    theta_i: &ParameterSet,
    pass: &AgentPass,
    actions: &[usize],
    n_actions: usize,
    column: impl Fn(usize) -> f64,
) -> Result<ParameterSet> {
    let mut upstream = vec![0.0; actions.len() * n_actions];
    for (k, &act) in actions.iter().enumerate() {
        upstream[k * n_actions + act] = column(k);
    }
    let mut grads = theta_i.zeros_like();
    mlp_backward_accumulate(q_spec, theta_i, &pass.cache, &upstream, &mut grads)?;
    Ok(grads)
}

fn check_targets(y: &[f64], batch: &Batch) -> Result<()> {
    if y.len() != batch.size {
        return Err(Error::shape("<td targets>", batch.size, y.len()));
    }
    Ok(())
}

/// Value and gradients of the centralized loss `L^G = mean_b (y_b - q_tot_b)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalLoss {
    pub loss: f64,
    pub q_tot: Vec<f64>,
    pub grad_theta: Vec<ParameterSet>,
    pub grad_phi: ParameterSet,
}

pub fn ctde_global_loss(nets: &ValueNets<'_>, batch: &Batch, y: &[f64]) -> Result<GlobalLoss> {
    nets.check(batch)?;
    check_targets(y, batch)?;
    let (b, n) = (batch.size, batch.n_agents);
    let (chosen, passes) = forward_agents(nets, batch)?;
    let (q_tot, mix_cache) = mix_forward_batch(nets.mixer, nets.phi, &chosen, &batch.states, b)?;
    let bsz = b as f64;
    let mut loss = 0.0;
    let mut upstream = Vec::with_capacity(b);
    for k in 0..b {
        let e = y[k] - q_tot[k];
        loss += e * e;
        upstream.push(-2.0 * (y[k] - q_tot[k]) / bsz);
    }
    let (dq, grad_phi) = mix_backward(nets.mixer, nets.phi, &mix_cache, &upstream)?;
    let grad_theta = (0..n)
        .map(|i| {
            backward_agent(nets.q_spec, &nets.theta[i], &passes[i], &batch.actions[i], batch.n_actions, |k| {
                dq[k * n + i]
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GlobalLoss {
        loss: loss / bsz,
        q_tot,
        grad_theta,
        grad_phi,
    })
}

/// Per-agent factorized losses and the gradients used to update on them.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub q_tot: Vec<f64>,
    /// `L_i = mean_b P_i^b · q_tot_b`.
    pub losses: Vec<f64>,
    /// Per agent, the constant factors `P_i^b`.
    pub factors: Vec<Vec<f64>>,
    /// `L^G` evaluated on the same forward pass (for logging).
    pub global_loss: f64,
    /// `∂L_i/∂θ_i` for each agent.
    pub grad_theta: Vec<ParameterSet>,
    /// `(1/N) Σ_i ∂L_i/∂φ`.
    pub grad_phi: ParameterSet,
    /// `∂L_i/∂φ` for each agent.
    pub grad_phi_per_agent: Vec<ParameterSet>,
}

/// Reward-additive factorized losses. `r_int` holds per-agent rewards
/// (`N` vectors of `B`) scaled by `beta`; `None` means no intrinsic term.
pub fn ra_factorized_losses(
    nets: &ValueNets<'_>,
    batch: &Batch,
    y: &[f64],
    r_int: Option<&[Vec<f64>]>,
    beta: f64,
) -> Result<LossBundle> {
    nets.check(batch)?;
    check_targets(y, batch)?;
    let (b, n) = (batch.size, batch.n_agents);
    if let Some(r) = r_int {
        if r.len() != n || r.iter().any(|x| x.len() != b) {
            return Err(Error::shape("<intrinsic rewards>", format!("{n} x {b}"), r.len()));
        }
        if let Some(i) = r.iter().position(|x| x.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!("intrinsic reward of agent {i} is not finite")));
        }
    }
    let (chosen, passes) = forward_agents(nets, batch)?;
    let (q_tot, mix_cache) = mix_forward_batch(nets.mixer, nets.phi, &chosen, &batch.states, b)?;
    let bsz = b as f64;
    let global_loss = y.iter().zip(&q_tot).map(|(y, q)| (y - q) * (y - q)).sum::<f64>() / bsz;

    let mut losses = Vec::with_capacity(n);
    let mut factors = Vec::with_capacity(n);
    let mut grad_theta = Vec::with_capacity(n);
    let mut grad_phi_per_agent = Vec::with_capacity(n);
    let mut grad_phi = nets.phi.zeros_like();
    let factors_of = |i: usize| -> Vec<f64> {
        (0..b)
            .map(|k| {
                let bonus = r_int.map_or(0.0, |r| r[i][k]);
                -2.0 * (y[k] + beta * bonus - q_tot[k])
            })
            .collect()
    };
    // When every agent has bitwise the same factors (no intrinsic term, or
    // β = 0) one mixer backward serves all of them and the φ average is exact.
    let first = factors_of(0);
    let uniform = (1..n).all(|i| factors_of(i).iter().zip(&first).all(|(a, b)| a.to_bits() == b.to_bits()));
    let mut shared_mix: Option<(Vec<f64>, ParameterSet)> = None;
    for i in 0..n {
        let p = factors_of(i);
        let (dq, dphi) = match &shared_mix {
            Some(m) if uniform => m.clone(),
            _ => {
                let upstream: Vec<f64> = p.iter().map(|v| v / bsz).collect();
                let m = mix_backward(nets.mixer, nets.phi, &mix_cache, &upstream)?;
                if uniform {
                    shared_mix = Some(m.clone());
                }
                m
            }
        };
        grad_theta.push(backward_agent(
            nets.q_spec,
            &nets.theta[i],
            &passes[i],
            &batch.actions[i],
            batch.n_actions,
            |k| dq[k * n + i],
        )?);
        losses.push(p.iter().zip(&q_tot).map(|(p, q)| p * q).sum::<f64>() / bsz);
        if !uniform {
            grad_phi.add_scaled(&dphi, 1.0);
        }
        grad_phi_per_agent.push(dphi);
        factors.push(p);
    }
    if uniform {
        grad_phi = grad_phi_per_agent[0].clone();
    } else {
        grad_phi.scale(1.0 / n as f64);
    }
    Ok(LossBundle {
        q_tot,
        losses,
        factors,
        global_loss,
        grad_theta,
        grad_phi,
        grad_phi_per_agent,
    })
}

/// Per-agent bonus that turns independent TD learning into VDN:
/// `R_i = γ(1 - done) Σ_{j≠i} max Q_j⁻(τ'_j) - Σ_{j≠i} Q_j(τ_j, a_j)`.
/// Returns `N` vectors of `B` values.
pub fn vdn_corollary_terms(
    q_spec: &MlpSpec,
    theta: &[ParameterSet],
    theta_target: &[ParameterSet],
    batch: &Batch,
    gamma: f64,
) -> Result<Vec<Vec<f64>>> {
    batch.validate()?;
    let (b, n, a) = (batch.size, batch.n_agents, batch.n_actions);
    if theta.len() != n || theta_target.len() != n {
        return Err(Error::shape("<agent networks>", n, theta.len().min(theta_target.len())));
    }
    let next = greedy_next_values(q_spec, theta_target, batch)?;
    let mut chosen = vec![0.0; b * n];
    for i in 0..n {
        let q = mlp_predict_batch(q_spec, &theta[i], &batch.inputs[i], b)?;
        for (k, &act) in batch.actions[i].iter().enumerate() {
            chosen[k * n + i] = q[k * a + act];
        }
    }
    Ok((0..n)
        .map(|i| {
            (0..b)
                .map(|k| {
                    let others = |m: &[f64]| (0..n).filter(|&j| j != i).map(|j| m[k * n + j]).sum::<f64>();
                    let live = if batch.dones[k] { 0.0 } else { 1.0 };
                    gamma * live * others(&next) - others(&chosen)
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct IqlLoss {
    pub loss: f64,
    pub grad: ParameterSet,
}

/// `mean_b (r_b + bonus_b + γ(1 - done_b) max Q_i⁻ - Q_i(τ_i, a_i))²` for agent `i`.
/// The bonus is a constant.
pub fn iql_loss(
    q_spec: &MlpSpec,
    theta_i: &ParameterSet,
    theta_target_i: &ParameterSet,
    batch: &Batch,
    agent: usize,
    gamma: f64,
    bonus: Option<&[f64]>,
) -> Result<IqlLoss> {
    batch.validate()?;
    let (b, a) = (batch.size, batch.n_actions);
    if agent >= batch.n_agents {
        return Err(Error::Contract(format!("agent {agent} out of range")));
    }
    if bonus.is_some_and(|x| x.len() != b) {
        return Err(Error::shape("<iql bonus>", b, bonus.map_or(0, <[f64]>::len)));
    }
    let next_q = mlp_predict_batch(q_spec, theta_target_i, &batch.next_inputs[agent], b)?;
    let next = masked_max(&next_q, &batch.next_avail[agent], a);
    let (q, cache) = mlp_forward_batch(q_spec, theta_i, &batch.inputs[agent], b)?;
    let bsz = b as f64;
    let mut loss = 0.0;
    let mut upstream = vec![0.0; b * a];
    for k in 0..b {
        let reward = batch.rewards[k] + bonus.map_or(0.0, |x| x[k]);
        let y = td_target(reward, gamma, batch.dones[k], next[k]);
        let act = batch.actions[agent][k];
        let qa = q[k * a + act];
        loss += (y - qa) * (y - qa);
        upstream[k * a + act] = -2.0 * (y - qa) / bsz;
    }
    let mut grad = theta_i.zeros_like();
    mlp_backward_accumulate(q_spec, theta_i, &cache, &upstream, &mut grad)?;
    Ok(IqlLoss { loss: loss / bsz, grad })
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use rand::Rng;

    /// Random batch with at least one available next action per agent and row.
    pub fn random_batch<R: Rng>(rng: &mut R, size: usize, n_agents: usize, n_actions: usize, input_dim: usize, state_dim: usize) -> Batch {
        let mut uniform = |len: usize| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let inputs = (0..n_agents).map(|_| uniform(size * input_dim)).collect();
        let next_inputs = (0..n_agents).map(|_| uniform(size * input_dim)).collect();
        let rewards = uniform(size);
        let states = uniform(size * state_dim);
        let next_states = uniform(size * state_dim);
        let actions = (0..n_agents).map(|_| (0..size).map(|_| rng.gen_range(0..n_actions)).collect()).collect();
        let next_avail = (0..n_agents)
            .map(|_| {
                (0..size)
                    .flat_map(|_| {
                        let mut row: Vec<bool> = (0..n_actions).map(|_| rng.gen_bool(0.6)).collect();
                        let forced = rng.gen_range(0..n_actions);
                        row[forced] = true;
                        row
                    })
                    .collect()
            })
            .collect();
        let dones = (0..size).map(|_| rng.gen_bool(0.2)).collect();
        Batch {
            size,
            n_agents,
            n_actions,
            input_dim,
            state_dim,
            inputs,
            next_inputs,
            actions,
            next_avail,
            rewards,
            dones,
            states,
            next_states,
        }
    }
}
