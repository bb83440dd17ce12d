use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Algo, MixerConfig, NetworkConfig, TrainerConfig};
use crate::env::{Env, Transition};
use crate::error::{Error, Result};
use crate::intrinsic::{IntrinsicBatch, IntrinsicConfig, IntrinsicKind, IntrinsicModule, ViewContext};
use crate::losses::{bootstrap_target, ctde_global_loss, iql_loss, ra_factorized_losses, Batch, ValueNets};
use crate::mixer::{MixerKind, MixerSpec};
use crate::nn::{
    adam_update, copy_params, finite_difference_subset, mlp_predict_batch, save_params, HistoryEncoderConfig, MlpSpec,
    OptimizerState, ParameterSet,
};

use super::rollout::PolicySnapshot;

/// Sub-stream tags for deterministic per-purpose randomness.
pub(crate) const STREAM_AGENTS: u64 = 1;
pub(crate) const STREAM_MIXER: u64 = 2;
pub(crate) const STREAM_INTRINSIC: u64 = 3;

pub(crate) fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stacks sampled transitions into an agent-major [`Batch`]. Also returns each
/// agent's current observations (`B x obs_dim`).
pub fn make_batch(
    transitions: &[&Transition],
    history: HistoryEncoderConfig,
    n_actions: usize,
) -> Result<(Batch, Vec<Vec<f64>>)> {
    let first = transitions
        .first()
        .ok_or_else(|| Error::Contract("cannot build an empty batch".into()))?;
    let n = first.actions.len();
    let input_dim = first.histories.first().map_or(0, Vec::len);
    let state_dim = first.state.len();
    let b = transitions.len();
    let mut batch = Batch {
        size: b,
        n_agents: n,
        n_actions,
        input_dim,
        state_dim,
        inputs: vec![Vec::with_capacity(b * input_dim); n],
        next_inputs: vec![Vec::with_capacity(b * input_dim); n],
        actions: vec![Vec::with_capacity(b); n],
        next_avail: vec![Vec::with_capacity(b * n_actions); n],
        rewards: Vec::with_capacity(b),
        dones: Vec::with_capacity(b),
        states: Vec::with_capacity(b * state_dim),
        next_states: Vec::with_capacity(b * state_dim),
    };
    let mut observations = vec![Vec::new(); n];
    for t in transitions {
        if t.actions.len() != n || t.histories.len() != n || t.state.len() != state_dim {
            return Err(Error::Contract("transitions in a batch disagree on shapes".into()));
        }
        for i in 0..n {
            let h = &t.histories[i];
            batch.inputs[i].extend_from_slice(h);
            batch.next_inputs[i].extend(history.advance(h, &t.next_observations[i], t.actions[i], n_actions));
            batch.actions[i].push(t.actions[i]);
            batch.next_avail[i].extend_from_slice(&t.next_avail[i]);
            observations[i].extend_from_slice(&t.observations[i]);
        }
        batch.rewards.push(t.reward);
        batch.dones.push(t.done);
        batch.states.extend_from_slice(&t.state);
        batch.next_states.extend_from_slice(&t.next_state);
    }
    batch.validate()?;
    Ok((batch, observations))
}

/// Summary of one learner step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStats {
    /// `L^G` on the batch (mean per-agent TD loss for independent learners).
    pub loss_g: f64,
    /// Mean unclipped action-model reward, when that reward is active.
    pub mean_r_am: Option<f64>,
    /// Mean clipped intrinsic reward before scaling by β.
    pub mean_r_int: Option<f64>,
    pub model_loss: Option<f64>,
    pub target_updated: bool,
}

/// Online and target networks, their optimizers, and the optional intrinsic module.
pub struct Learner {
    algo: Algo,
    gamma: f64,
    beta: f64,
    target_update_interval: u64,
    history: HistoryEncoderConfig,
    n_actions: usize,
    q_spec: MlpSpec,
    mixer: MixerSpec,
    theta: Vec<ParameterSet>,
    theta_target: Vec<ParameterSet>,
    phi: ParameterSet,
    phi_target: ParameterSet,
    opt_theta: Vec<OptimizerState>,
    opt_phi: OptimizerState,
    intrinsic: Option<IntrinsicModule>,
    steps: u64,
}

/// Resolves the intrinsic configuration implied by the algorithm.
pub(crate) fn resolve_intrinsic(algo: Algo, config: &IntrinsicConfig, beta_alias: Option<f64>) -> Result<IntrinsicConfig> {
    let mut c = config.clone();
    if let Some(b) = beta_alias {
        c.beta = b;
    }
    if algo.uses_action_model() {
        match c.kind {
            IntrinsicKind::None => c.kind = IntrinsicKind::ActionModel,
            IntrinsicKind::ActionModel => {}
            IntrinsicKind::Rnd => {
                return Err(Error::Config(format!("{algo} uses the action-model reward; intrinsic.kind = rnd conflicts")))
            }
        }
    } else if !algo.factorized() && algo != Algo::Iql && c.kind != IntrinsicKind::None {
        return Err(Error::Config(format!(
            "{algo} trains on the global loss, which has no per-agent reward; use {algo}-ra or drop intrinsic.kind"
        )));
    }
    Ok(c)
}

pub(crate) fn resolve_mixer(algo: Algo, config: &MixerConfig) -> Result<MixerKind> {
    let implied = algo.mixer_kind().unwrap_or(MixerKind::Vdn);
    match config.kind {
        Some(k) if algo.mixer_kind() != Some(k) => Err(Error::Config(format!(
            "mixer.kind = {k:?} does not match algorithm {algo}"
        ))),
        _ => Ok(implied),
    }
}

impl Learner {
    pub fn new(
        env: &Env,
        trainer: &TrainerConfig,
        network: &NetworkConfig,
        mixer: &MixerConfig,
        intrinsic: &IntrinsicConfig,
        seed: u64,
    ) -> Result<Self> {
        trainer.validate()?;
        let algo = trainer.algo;
        let history = HistoryEncoderConfig {
            window: network.history_window,
        };
        history.validate()?;
        let n = env.n_agents();
        let n_actions = env.n_actions();
        let q_spec = MlpSpec::new(history.encoded_dim(env.obs_dim(), n_actions), network.hidden_dims.clone(), n_actions)?;
        let mixer_spec = match resolve_mixer(algo, mixer)? {
            MixerKind::Vdn => MixerSpec::vdn(n),
            MixerKind::Qmix => MixerSpec::qmix(n, env.state_dim(), mixer.embed_dim, mixer.hypernet_hidden),
        };
        mixer_spec.validate()?;
        let intrinsic_cfg = resolve_intrinsic(algo, intrinsic, trainer.beta)?;

        let mut rng = substream(seed, STREAM_AGENTS);
        let theta: Vec<ParameterSet> = (0..n).map(|_| q_spec.init(&mut rng)).collect();
        let phi = mixer_spec.init(&mut substream(seed, STREAM_MIXER));
        let ctx = ViewContext {
            layout: env.layout(),
            sight_radius: env.sight_radius(),
        };
        let intrinsic = IntrinsicModule::from_config(
            &intrinsic_cfg,
            ctx,
            n,
            n_actions,
            &network.hidden_dims,
            &mut substream(seed, STREAM_INTRINSIC),
        )?;
        Ok(Self {
            algo,
            gamma: trainer.gamma,
            beta: intrinsic_cfg.beta,
            target_update_interval: trainer.target_update_interval,
            history,
            n_actions,
            opt_theta: theta.iter().map(|p| OptimizerState::new(p, trainer.lr_agent)).collect(),
            opt_phi: OptimizerState::new(&phi, trainer.lr_mixer),
            theta_target: theta.iter().map(copy_params).collect(),
            phi_target: copy_params(&phi),
            theta,
            phi,
            q_spec,
            mixer: mixer_spec,
            intrinsic,
            steps: 0,
        })
    }

    pub fn algo(&self) -> Algo {
        self.algo
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn q_spec(&self) -> &MlpSpec {
        &self.q_spec
    }

    pub fn mixer_spec(&self) -> &MixerSpec {
        &self.mixer
    }

    pub fn theta(&self) -> &[ParameterSet] {
        &self.theta
    }

    pub fn phi(&self) -> &ParameterSet {
        &self.phi
    }

    pub fn theta_target(&self) -> &[ParameterSet] {
        &self.theta_target
    }

    pub fn phi_target(&self) -> &ParameterSet {
        &self.phi_target
    }

    pub fn history(&self) -> HistoryEncoderConfig {
        self.history
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot {
            q_spec: self.q_spec.clone(),
            theta: self.theta.clone(),
            history: self.history,
        }
    }

    fn online(&self) -> ValueNets<'_> {
        ValueNets {
            q_spec: &self.q_spec,
            theta: &self.theta,
            mixer: &self.mixer,
            phi: &self.phi,
        }
    }

    fn target(&self) -> ValueNets<'_> {
        ValueNets {
            q_spec: &self.q_spec,
            theta: &self.theta_target,
            mixer: &self.mixer,
            phi: &self.phi_target,
        }
    }

    /// One update: intrinsic rewards from the current models, TD targets from
    /// the target networks, gradients for every agent and the mixer, optimizer
    /// steps, the intrinsic-model step, then the periodic hard target copy.
    pub fn train_step(&mut self, batch: &Batch, observations: &[Vec<f64>]) -> Result<TrainStats> {
        batch.validate()?;
        if batch.n_agents != self.theta.len() || batch.n_actions != self.n_actions {
            return Err(Error::shape("<batch>", self.theta.len(), batch.n_agents));
        }
        let intrinsic = match self.intrinsic.as_mut() {
            Some(module) => {
                let q_values = (0..batch.n_agents)
                    .map(|i| mlp_predict_batch(&self.q_spec, &self.theta[i], &batch.inputs[i], batch.size))
                    .collect::<Result<Vec<_>>>()?;
                let ib = IntrinsicBatch {
                    observations,
                    q_values: &q_values,
                    batch: batch.size,
                };
                Some(module.process(&ib)?)
            }
            None => None,
        };

        let (loss_g, grad_theta, grad_phi) = if self.algo == Algo::Iql {
            let mut losses = 0.0;
            let mut grads = Vec::with_capacity(batch.n_agents);
            for i in 0..batch.n_agents {
                let bonus: Option<Vec<f64>> = intrinsic.as_ref().map(|o| o.rewards[i].iter().map(|r| self.beta * r).collect());
                let l = iql_loss(
                    &self.q_spec,
                    &self.theta[i],
                    &self.theta_target[i],
                    batch,
                    i,
                    self.gamma,
                    bonus.as_deref(),
                )?;
                losses += l.loss;
                grads.push(l.grad);
            }
            (losses / batch.n_agents as f64, grads, None)
        } else {
            let y = bootstrap_target(&self.target(), batch, self.gamma)?;
            if self.algo.factorized() {
                let r_int = intrinsic.as_ref().map(|o| o.rewards.as_slice());
                let bundle = ra_factorized_losses(&self.online(), batch, &y, r_int, self.beta)?;
                (bundle.global_loss, bundle.grad_theta, Some(bundle.grad_phi))
            } else {
                let g = ctde_global_loss(&self.online(), batch, &y)?;
                (g.loss, g.grad_theta, Some(g.grad_phi))
            }
        };
        if !loss_g.is_finite() {
            return Err(Error::Numeric(format!("training loss is not finite ({loss_g})")));
        }
        for ((params, grads), opt) in self.theta.iter_mut().zip(&grad_theta).zip(&mut self.opt_theta) {
            adam_update(params, grads, opt)?;
        }
        if let Some(g) = grad_phi.filter(|g| !g.is_empty()) {
            adam_update(&mut self.phi, &g, &mut self.opt_phi)?;
        }

        self.steps += 1;
        let target_updated = self.steps.is_multiple_of(self.target_update_interval);
        if target_updated {
            self.theta_target = self.theta.iter().map(copy_params).collect();
            self.phi_target = copy_params(&self.phi);
        }
        let am_active = self.intrinsic.as_ref().is_some_and(|m| m.kind() == IntrinsicKind::ActionModel);
        Ok(TrainStats {
            loss_g,
            mean_r_am: intrinsic.as_ref().filter(|_| am_active).map(|o| o.mean_raw()),
            mean_r_int: intrinsic.as_ref().map(|o| o.mean_reward()),
            model_loss: intrinsic.as_ref().map(|o| o.model_loss),
            target_updated,
        })
    }

    /// Finite-difference check of the training-loss gradient on `coords`
    /// randomly chosen coordinates of agent 0 (and the mixer, when it has
    /// parameters). Returns `max |analytic - fd| / (1 + |fd|)`.
    pub fn gradient_check(&self, batch: &Batch, coords: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-6;
        let pick = |rng: &mut ChaCha8Rng, p: &ParameterSet| -> Vec<usize> {
            (0..coords).map(|_| rng.gen_range(0..p.num_scalars())).collect()
        };
        let resid = |analytic: &ParameterSet, idx: &[usize], fd: &[f64]| {
            idx.iter()
                .zip(fd)
                .map(|(&k, f)| (analytic.scalar(k) - f).abs() / (1.0 + f.abs()))
                .fold(0.0, f64::max)
        };
        if self.algo == Algo::Iql {
            let l = iql_loss(&self.q_spec, &self.theta[0], &self.theta_target[0], batch, 0, self.gamma, None)?;
            let idx = pick(&mut rng, &self.theta[0]);
            let mut f = |p: &ParameterSet| {
                iql_loss(&self.q_spec, p, &self.theta_target[0], batch, 0, self.gamma, None).map_or(f64::NAN, |l| l.loss)
            };
            let fd = finite_difference_subset(&mut f, &self.theta[0], h, &idx)?;
            return Ok(resid(&l.grad, &idx, &fd));
        }
        let y = bootstrap_target(&self.target(), batch, self.gamma)?;
        let g = ctde_global_loss(&self.online(), batch, &y)?;
        let idx = pick(&mut rng, &self.theta[0]);
        let mut f = |p: &ParameterSet| {
            let mut theta = self.theta.clone();
            theta[0] = p.clone();
            let nets = ValueNets {
                theta: &theta,
                ..self.online()
            };
            ctde_global_loss(&nets, batch, &y).map_or(f64::NAN, |l| l.loss)
        };
        let fd = finite_difference_subset(&mut f, &self.theta[0], h, &idx)?;
        let mut worst = resid(&g.grad_theta[0], &idx, &fd);
        if !self.phi.is_empty() {
            let idx = pick(&mut rng, &self.phi);
            let mut f = |p: &ParameterSet| {
                let nets = ValueNets { phi: p, ..self.online() };
                ctde_global_loss(&nets, batch, &y).map_or(f64::NAN, |l| l.loss)
            };
            let fd = finite_difference_subset(&mut f, &self.phi, h, &idx)?;
            worst = worst.max(resid(&g.grad_phi, &idx, &fd));
        }
        Ok(worst)
    }

    /// Writes every parameter set to `dir` in the checkpoint format.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, p) in self.theta.iter().enumerate() {
            save_params(&dir.join(format!("agent_{i}.tndp")), p)?;
        }
        if !self.phi.is_empty() {
            save_params(&dir.join("mixer.tndp"), &self.phi)?;
        }
        if let Some(m) = &self.intrinsic {
            for (name, p) in m.parameter_sets() {
                save_params(&dir.join(format!("{name}.tndp")), p)?;
            }
        }
        Ok(())
    }
}
