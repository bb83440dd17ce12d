//! Intrinsic rewards.
//!
//! The action-tendency reward compares what each visible teammate is predicted
//! to value (an action model applied to an imagined observation) with the
//! agent's own current Q-values; large disagreement means a large penalty.
//! Random network distillation is provided as a novelty baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::ObsLayout;
use crate::error::{Error, Result};
use crate::imagine::{imagine_observation, surrounding_set, SurroundingSet};
use crate::nn::{adam_update, mlp_backward_accumulate, mlp_forward_batch, mlp_predict_batch, MlpSpec, OptimizerState, ParameterSet};

pub const ACTION_MODEL_CLIP: (f64, f64) = (-10.0, 0.0);
pub const RND_CLIP: (f64, f64) = (0.0, 10.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IntrinsicKind {
    #[default]
    None,
    ActionModel,
    Rnd,
}

/// How per-agent rewards reach the learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Agent `i` receives its own reward.
    #[default]
    PerAgent,
    /// Every agent receives the mean over agents.
    Averaged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntrinsicConfig {
    pub kind: IntrinsicKind,
    pub beta: f64,
    /// One model shared by all agents instead of one per agent.
    pub shared_model: bool,
    pub reward_mode: RewardMode,
    pub lr: f64,
    /// Hidden widths of the action model / RND networks. Defaults to the Q-network's.
    pub hidden_dims: Option<Vec<usize>>,
    pub rnd_output_dim: usize,
}

impl Default for IntrinsicConfig {
    fn default() -> Self {
        Self {
            kind: IntrinsicKind::None,
            beta: 0.05,
            shared_model: false,
            reward_mode: RewardMode::PerAgent,
            lr: 1e-3,
            hidden_dims: None,
            rnd_output_dim: 16,
        }
    }
}

impl IntrinsicConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("intrinsic.beta must be finite and >= 0, got {}", self.beta)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("intrinsic.lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.rnd_output_dim == 0 {
            return Err(Error::Config("intrinsic.rnd_output_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Geometry needed to imagine teammates' observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewContext {
    pub layout: ObsLayout,
    pub sight_radius: f64,
}

/// Maps a single observation to predicted action values.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionModel {
    pub spec: MlpSpec,
    pub params: ParameterSet,
}

impl ActionModel {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden_dims: Vec<usize>, n_actions: usize, rng: &mut R) -> Result<Self> {
        let spec = MlpSpec::new(obs_dim, hidden_dims, n_actions)?;
        let params = spec.init(rng);
        Ok(Self { spec, params })
    }
}

pub fn action_model_forward(model: &ActionModel, obs: &[f64]) -> Result<Vec<f64>> {
    mlp_predict_batch(&model.spec, &model.params, obs, 1)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Unclipped reward of agent `i`:
/// `-(1/|S|) Σ_{j∈S} ‖F(imagine(o_i, j)) - q‖₂`, zero when `S` is empty.
/// `q` are agent `i`'s own current action values.
pub fn compute_action_model_reward(
    q: &[f64],
    model: &ActionModel,
    ctx: &ViewContext,
    obs_i: &[f64],
    i: usize,
    surrounding: &SurroundingSet,
) -> Result<f64> {
    if q.len() != model.spec.output_dim {
        return Err(Error::shape("<action values>", model.spec.output_dim, q.len()));
    }
    if surrounding.is_empty() {
        return Ok(0.0);
    }
    let mut imagined = Vec::with_capacity(surrounding.len() * ctx.layout.dim());
    for &j in surrounding.agents() {
        imagined.extend(imagine_observation(&ctx.layout, obs_i, i, j, ctx.sight_radius)?);
    }
    let pred = mlp_predict_batch(&model.spec, &model.params, &imagined, surrounding.len())?;
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("action model output for agent {i} is not finite")));
    }
    let total: f64 = pred.chunks_exact(q.len()).map(|p| l2(p, q)).sum();
    Ok(-total / surrounding.len() as f64)
}

/// Batched form of [`compute_action_model_reward`] for agent `i`: `obs` is
/// `B x obs_dim`, `q` is `B x n_actions`. One forward pass covers every
/// imagined observation in the batch.
pub fn action_model_rewards_batch(
    model: &ActionModel,
    ctx: &ViewContext,
    obs: &[f64],
    i: usize,
    q: &[f64],
    batch: usize,
) -> Result<Vec<f64>> {
    let d = ctx.layout.dim();
    let a = model.spec.output_dim;
    if obs.len() != batch * d || q.len() != batch * a {
        return Err(Error::shape("<action model batch>", format!("{batch} x ({d}, {a})"), obs.len() + q.len()));
    }
    let mut imagined = Vec::new();
    let mut owner = Vec::new();
    let mut counts = vec![0usize; batch];
    for b in 0..batch {
        let o = &obs[b * d..(b + 1) * d];
        for &j in surrounding_set(&ctx.layout, o).agents() {
            imagined.extend(imagine_observation(&ctx.layout, o, i, j, ctx.sight_radius)?);
            owner.push(b);
            counts[b] += 1;
        }
    }
    let mut out = vec![0.0; batch];
    if owner.is_empty() {
        return Ok(out);
    }
    let pred = mlp_predict_batch(&model.spec, &model.params, &imagined, owner.len())?;
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("action model output for agent {i} is not finite")));
    }
    for (p, &b) in pred.chunks_exact(a).zip(&owner) {
        out[b] -= l2(p, &q[b * a..(b + 1) * a]);
    }
    for (r, &c) in out.iter_mut().zip(&counts) {
        if c > 0 {
            *r /= c as f64;
        }
    }
    Ok(out)
}

/// `‖F(o) - q_target‖₂²` and its parameter gradient.
pub fn action_model_loss(model: &ActionModel, obs: &[f64], q_target: &[f64]) -> Result<(f64, ParameterSet)> {
    action_model_loss_batch(model, obs, q_target, 1)
}

/// Batch mean of `‖F(o_b) - q_b‖₂²` and its gradient.
pub fn action_model_loss_batch(model: &ActionModel, obs: &[f64], q_target: &[f64], batch: usize) -> Result<(f64, ParameterSet)> {
    let mut grads = model.params.zeros_like();
    let loss = regression_loss_into(&model.spec, &model.params, obs, q_target, batch, &mut grads)?;
    Ok((loss, grads))
}

/// Adds the gradient of the batch-mean squared error to `grads`; returns the loss.
fn regression_loss_into(
    spec: &MlpSpec,
    params: &ParameterSet,
    input: &[f64],
    target: &[f64],
    batch: usize,
    grads: &mut ParameterSet,
) -> Result<f64> {
    if target.len() != batch * spec.output_dim {
        return Err(Error::shape("<regression target>", format!("{batch} x {}", spec.output_dim), target.len()));
    }
    let (pred, cache) = mlp_forward_batch(spec, params, input, batch)?;
    let inv = 1.0 / batch as f64;
    let mut loss = 0.0;
    let upstream: Vec<f64> = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d * inv
        })
        .collect();
    mlp_backward_accumulate(spec, params, &cache, &upstream, grads)?;
    Ok(loss * inv)
}

/// Random network distillation: a trained predictor chasing a fixed random target.
#[derive(Debug, Clone, PartialEq)]
pub struct RndModel {
    pub spec: MlpSpec,
    pub predictor: ParameterSet,
    pub target: ParameterSet,
}

impl RndModel {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden_dims: Vec<usize>, output_dim: usize, rng: &mut R) -> Result<Self> {
        let spec = MlpSpec::new(obs_dim, hidden_dims, output_dim)?;
        let predictor = spec.init(rng);
        let target = spec.init(rng);
        Ok(Self { spec, predictor, target })
    }
}

/// `‖pred(o) - fixed(o)‖₂²` per row of `obs`.
pub fn rnd_rewards_batch(model: &RndModel, obs: &[f64], batch: usize) -> Result<Vec<f64>> {
    let p = mlp_predict_batch(&model.spec, &model.predictor, obs, batch)?;
    let t = mlp_predict_batch(&model.spec, &model.target, obs, batch)?;
    let k = model.spec.output_dim;
    Ok(p.chunks_exact(k).zip(t.chunks_exact(k)).map(|(a, b)| l2(a, b).powi(2)).collect())
}

pub fn rnd_reward(model: &RndModel, obs: &[f64]) -> Result<f64> {
    Ok(rnd_rewards_batch(model, obs, 1)?[0])
}

/// Per-agent inputs shared by every intrinsic reward source.
#[derive(Debug, Clone, Copy)]
pub struct IntrinsicBatch<'a> {
    /// Per agent, `B x obs_dim` current observations.
    pub observations: &'a [Vec<f64>],
    /// Per agent, `B x n_actions` current action values (constants).
    pub q_values: &'a [Vec<f64>],
    pub batch: usize,
}

/// A pluggable intrinsic reward.
pub trait IntrinsicReward: Send {
    fn kind(&self) -> IntrinsicKind;

    /// Unclipped rewards, per agent `B` values, from the current model.
    fn rewards(&self, batch: &IntrinsicBatch<'_>) -> Result<Vec<Vec<f64>>>;

    /// One optimizer step on the model; returns the mean loss.
    fn update(&mut self, batch: &IntrinsicBatch<'_>) -> Result<f64>;

    fn clip_range(&self) -> (f64, f64);

    /// Trainable and fixed parameter sets, for checkpoints.
    fn parameter_sets(&self) -> Vec<(String, &ParameterSet)>;
}

/// Per-agent models (or one shared model) with their optimizers.
struct ModelBank {
    shared: bool,
    params: Vec<ParameterSet>,
    opts: Vec<OptimizerState>,
}

impl ModelBank {
    fn new(shared: bool, params: Vec<ParameterSet>, lr: f64) -> Self {
        let opts = params.iter().map(|p| OptimizerState::new(p, lr)).collect();
        Self { shared, params, opts }
    }

    fn index(&self, agent: usize) -> usize {
        if self.shared {
            0
        } else {
            agent
        }
    }

    /// `loss_fn(agent, params, grads)` adds agent's gradient and returns its loss.
    /// A shared model takes one step on the agent-mean gradient.
    fn step(
        &mut self,
        n_agents: usize,
        mut loss_fn: impl FnMut(usize, &ParameterSet, &mut ParameterSet) -> Result<f64>,
    ) -> Result<f64> {
        let mut total = 0.0;
        if self.shared {
            let mut g = self.params[0].zeros_like();
            for i in 0..n_agents {
                total += loss_fn(i, &self.params[0], &mut g)?;
            }
            g.scale(1.0 / n_agents as f64);
            adam_update(&mut self.params[0], &g, &mut self.opts[0])?;
        } else {
            for i in 0..n_agents {
                let mut g = self.params[i].zeros_like();
                total += loss_fn(i, &self.params[i], &mut g)?;
                adam_update(&mut self.params[i], &g, &mut self.opts[i])?;
            }
        }
        Ok(total / n_agents as f64)
    }
}

fn check_batch(batch: &IntrinsicBatch<'_>, n_agents: usize) -> Result<()> {
    if batch.observations.len() != n_agents || batch.q_values.len() != n_agents {
        return Err(Error::shape("<intrinsic batch agents>", n_agents, batch.observations.len()));
    }
    Ok(())
}

pub struct ActionModelReward {
    spec: MlpSpec,
    ctx: ViewContext,
    n_agents: usize,
    bank: ModelBank,
}

impl ActionModelReward {
    pub fn new<R: Rng + ?Sized>(
        ctx: ViewContext,
        n_agents: usize,
        n_actions: usize,
        hidden_dims: Vec<usize>,
        shared: bool,
        lr: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let count = if shared { 1 } else { n_agents };
        let models = (0..count)
            .map(|_| ActionModel::new(ctx.layout.dim(), hidden_dims.clone(), n_actions, rng))
            .collect::<Result<Vec<_>>>()?;
        let spec = models[0].spec.clone();
        let params = models.into_iter().map(|m| m.params).collect();
        Ok(Self {
            spec,
            ctx,
            n_agents,
            bank: ModelBank::new(shared, params, lr),
        })
    }

    /// The model consulted by agent `i`.
    pub fn model(&self, i: usize) -> ActionModel {
        ActionModel {
            spec: self.spec.clone(),
            params: self.bank.params[self.bank.index(i)].clone(),
        }
    }
}

impl IntrinsicReward for ActionModelReward {
    fn kind(&self) -> IntrinsicKind {
        IntrinsicKind::ActionModel
    }

    fn rewards(&self, batch: &IntrinsicBatch<'_>) -> Result<Vec<Vec<f64>>> {
        check_batch(batch, self.n_agents)?;
        (0..self.n_agents)
            .map(|i| {
                let model = ActionModel {
                    spec: self.spec.clone(),
                    params: self.bank.params[self.bank.index(i)].clone(),
                };
                action_model_rewards_batch(&model, &self.ctx, &batch.observations[i], i, &batch.q_values[i], batch.batch)
            })
            .collect()
    }

    fn update(&mut self, batch: &IntrinsicBatch<'_>) -> Result<f64> {
        check_batch(batch, self.n_agents)?;
        let spec = &self.spec;
        self.bank.step(self.n_agents, |i, params, grads| {
            regression_loss_into(spec, params, &batch.observations[i], &batch.q_values[i], batch.batch, grads)
        })
    }

    fn clip_range(&self) -> (f64, f64) {
        ACTION_MODEL_CLIP
    }

    fn parameter_sets(&self) -> Vec<(String, &ParameterSet)> {
        self.bank.params.iter().enumerate().map(|(k, p)| (format!("action_model_{k}"), p)).collect()
    }
}

pub struct RndReward {
    spec: MlpSpec,
    targets: Vec<ParameterSet>,
    n_agents: usize,
    bank: ModelBank,
}

impl RndReward {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        n_agents: usize,
        hidden_dims: Vec<usize>,
        output_dim: usize,
        shared: bool,
        lr: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let count = if shared { 1 } else { n_agents };
        let models = (0..count)
            .map(|_| RndModel::new(obs_dim, hidden_dims.clone(), output_dim, rng))
            .collect::<Result<Vec<_>>>()?;
        let spec = models[0].spec.clone();
        let (predictors, targets) = models.into_iter().map(|m| (m.predictor, m.target)).unzip();
        Ok(Self {
            spec,
            targets,
            n_agents,
            bank: ModelBank::new(shared, predictors, lr),
        })
    }

    fn model(&self, i: usize) -> RndModel {
        let k = self.bank.index(i);
        RndModel {
            spec: self.spec.clone(),
            predictor: self.bank.params[k].clone(),
            target: self.targets[k].clone(),
        }
    }
}

impl IntrinsicReward for RndReward {
    fn kind(&self) -> IntrinsicKind {
        IntrinsicKind::Rnd
    }

    fn rewards(&self, batch: &IntrinsicBatch<'_>) -> Result<Vec<Vec<f64>>> {
        check_batch(batch, self.n_agents)?;
        (0..self.n_agents)
            .map(|i| rnd_rewards_batch(&self.model(i), &batch.observations[i], batch.batch))
            .collect()
    }

    fn update(&mut self, batch: &IntrinsicBatch<'_>) -> Result<f64> {
        check_batch(batch, self.n_agents)?;
        let targets = (0..self.n_agents)
            .map(|i| mlp_predict_batch(&self.spec, &self.targets[self.bank.index(i)], &batch.observations[i], batch.batch))
            .collect::<Result<Vec<_>>>()?;
        let spec = &self.spec;
        self.bank.step(self.n_agents, |i, params, grads| {
            regression_loss_into(spec, params, &batch.observations[i], &targets[i], batch.batch, grads)
        })
    }

    fn clip_range(&self) -> (f64, f64) {
        RND_CLIP
    }

    fn parameter_sets(&self) -> Vec<(String, &ParameterSet)> {
        let preds = self.bank.params.iter().enumerate().map(|(k, p)| (format!("rnd_predictor_{k}"), p));
        let fixed = self.targets.iter().enumerate().map(|(k, p)| (format!("rnd_target_{k}"), p));
        preds.chain(fixed).collect()
    }
}

/// Rewards produced for one learner batch.
#[derive(Debug, Clone, PartialEq)]
pub struct IntrinsicOutput {
    /// Unclipped model output, per agent.
    pub raw: Vec<Vec<f64>>,
    /// Clipped and mode-combined rewards, per agent (before scaling by β).
    pub rewards: Vec<Vec<f64>>,
    pub model_loss: f64,
}

impl IntrinsicOutput {
    pub fn mean_raw(&self) -> f64 {
        mean_nested(&self.raw)
    }

    pub fn mean_reward(&self) -> f64 {
        mean_nested(&self.rewards)
    }
}

fn mean_nested(v: &[Vec<f64>]) -> f64 {
    let n: usize = v.iter().map(Vec::len).sum();
    if n == 0 {
        return 0.0;
    }
    v.iter().flatten().sum::<f64>() / n as f64
}

/// Clips to `range` then applies the reward mode.
pub fn shape_rewards(raw: &[Vec<f64>], range: (f64, f64), mode: RewardMode) -> Vec<Vec<f64>> {
    let clipped: Vec<Vec<f64>> = raw.iter().map(|r| r.iter().map(|v| v.clamp(range.0, range.1)).collect()).collect();
    match mode {
        RewardMode::PerAgent => clipped,
        RewardMode::Averaged => {
            let n = clipped.len();
            let len = clipped.first().map_or(0, Vec::len);
            let mean: Vec<f64> = (0..len).map(|b| clipped.iter().map(|r| r[b]).sum::<f64>() / n as f64).collect();
            vec![mean; n]
        }
    }
}

/// A reward source plus the shaping applied before the learner sees it.
pub struct IntrinsicModule {
    source: Box<dyn IntrinsicReward>,
    mode: RewardMode,
}

impl IntrinsicModule {
    pub fn new(source: Box<dyn IntrinsicReward>, mode: RewardMode) -> Self {
        Self { source, mode }
    }

    /// Builds the configured source, or `None` for [`IntrinsicKind::None`].
    pub fn from_config<R: Rng + ?Sized>(
        config: &IntrinsicConfig,
        ctx: ViewContext,
        n_agents: usize,
        n_actions: usize,
        default_hidden: &[usize],
        rng: &mut R,
    ) -> Result<Option<Self>> {
        config.validate()?;
        let hidden = config.hidden_dims.clone().unwrap_or_else(|| default_hidden.to_vec());
        let source: Box<dyn IntrinsicReward> = match config.kind {
            IntrinsicKind::None => return Ok(None),
            IntrinsicKind::ActionModel => Box::new(ActionModelReward::new(
                ctx,
                n_agents,
                n_actions,
                hidden,
                config.shared_model,
                config.lr,
                rng,
            )?),
            IntrinsicKind::Rnd => Box::new(RndReward::new(
                ctx.layout.dim(),
                n_agents,
                hidden,
                config.rnd_output_dim,
                config.shared_model,
                config.lr,
                rng,
            )?),
        };
        Ok(Some(Self::new(source, config.reward_mode)))
    }

    pub fn kind(&self) -> IntrinsicKind {
        self.source.kind()
    }

    /// Rewards from the current model, then one model update on the same batch.
    pub fn process(&mut self, batch: &IntrinsicBatch<'_>) -> Result<IntrinsicOutput> {
        let raw = self.source.rewards(batch)?;
        if let Some(bad) = raw.iter().flatten().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("intrinsic reward is not finite ({bad})")));
        }
        let rewards = shape_rewards(&raw, self.source.clip_range(), self.mode);
        let model_loss = self.source.update(batch)?;
        Ok(IntrinsicOutput { raw, rewards, model_loss })
    }

    pub fn parameter_sets(&self) -> Vec<(String, &ParameterSet)> {
        self.source.parameter_sets()
    }
}
