use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tendency_core::env::{Env, EnvConfig};
use tendency_core::intrinsic::{action_model_rewards_batch, ActionModel, IntrinsicConfig, ViewContext};
use tendency_core::losses::{
    bootstrap_target, ctde_global_loss, iql_loss, ra_factorized_losses, vdn_corollary_terms, Batch, ValueNets,
};
use tendency_core::mixer::{MixerKind, MixerSpec};
use tendency_core::nn::{finite_difference_subset, mlp_predict_batch, MlpSpec, ParameterSet};
use tendency_core::training::{collect_rollouts, make_batch, Algo, Learner, MixerConfig, NetworkConfig, RolloutWorker, TrainerConfig};
use tendency_core::verify::Problem;

/// A linear Q-network with zero weights: it outputs `bias` for every input.
fn constant(spec: &MlpSpec, bias: &[f64]) -> ParameterSet {
    let mut p = spec.zeros();
    let last = p.len() - 1;
    p.tensors_mut()[last].data_mut().copy_from_slice(bias);
    p
}

/// One transition, two agents, three actions; both take action 0.
fn one_transition(reward: f64, done: bool) -> Batch {
    Batch {
        size: 1,
        n_agents: 2,
        n_actions: 3,
        input_dim: 2,
        state_dim: 1,
        inputs: vec![vec![0.3, -0.2]; 2],
        next_inputs: vec![vec![0.1, 0.4]; 2],
        actions: vec![vec![0]; 2],
        next_avail: vec![vec![true; 3]; 2],
        rewards: vec![reward],
        dones: vec![done],
        states: vec![0.0],
        next_states: vec![0.0],
    }
}

struct Fixture {
    spec: MlpSpec,
    mixer: MixerSpec,
    phi: ParameterSet,
    theta: Vec<ParameterSet>,
    target: Vec<ParameterSet>,
}

/// VDN with Q₁(τ, 0) = 1.5, Q₂(τ, 0) = 1.0 (so q_tot = 2.5) and greedy
/// target values 1.2 and 0.8 (so the mixed target max is 2).
fn fixture() -> Fixture {
    let spec = MlpSpec::new(2, vec![], 3).unwrap();
    let mixer = MixerSpec::vdn(2);
    let phi = mixer.init(&mut ChaCha8Rng::seed_from_u64(0));
    Fixture {
        theta: vec![constant(&spec, &[1.5, 0.0, -1.0]), constant(&spec, &[1.0, 3.0, 0.5])],
        target: vec![constant(&spec, &[0.2, 1.2, -0.5]), constant(&spec, &[0.8, 0.1, 0.0])],
        spec,
        mixer,
        phi,
    }
}

impl Fixture {
    fn online(&self) -> ValueNets<'_> {
        ValueNets {
            q_spec: &self.spec,
            theta: &self.theta,
            mixer: &self.mixer,
            phi: &self.phi,
        }
    }

    fn target(&self) -> ValueNets<'_> {
        ValueNets {
            theta: &self.target,
            ..self.online()
        }
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

#[test]
fn worked_global_loss_example() {
    let f = fixture();
    let batch = one_transition(1.0, false);
    let y = bootstrap_target(&f.target(), &batch, 0.9).unwrap();
    assert!(close(y[0], 2.8), "{y:?}");
    let g = ctde_global_loss(&f.online(), &batch, &y).unwrap();
    assert!(close(g.q_tot[0], 2.5));
    assert!(close(g.loss, 0.09), "{}", g.loss);
}

#[test]
fn terminal_and_myopic_targets_are_the_reward() {
    let f = fixture();
    assert_eq!(bootstrap_target(&f.target(), &one_transition(1.0, true), 0.9).unwrap(), vec![1.0]);
    assert_eq!(bootstrap_target(&f.target(), &one_transition(1.0, false), 0.0).unwrap(), vec![1.0]);
}

#[test]
fn worked_factorized_example() {
    let f = fixture();
    let batch = one_transition(1.0, false);
    let y = vec![2.8];
    let bundle = ra_factorized_losses(&f.online(), &batch, &y, None, 0.0).unwrap();
    for i in 0..2 {
        assert!(close(bundle.factors[i][0], -0.6), "{:?}", bundle.factors);
        assert!(close(bundle.losses[i], -1.5), "{:?}", bundle.losses);
    }
    // under VDN ∂q_tot/∂Qᵢ = 1, so the taken action's bias gradient is P itself
    for i in 0..2 {
        let bias = bundle.grad_theta[i].tensors().last().unwrap().data();
        assert!(close(bias[0], -0.6) && bias[1] == 0.0 && bias[2] == 0.0, "{bias:?}");
    }

    let r_int = vec![vec![0.0], vec![-5.0]];
    let bundle = ra_factorized_losses(&f.online(), &batch, &y, Some(&r_int), 1.0).unwrap();
    assert!(close(bundle.factors[0][0], -0.6));
    assert!(close(bundle.factors[1][0], 9.4));
    assert!(close(bundle.q_tot[0], 2.5));
}

#[test]
fn perfect_fit_has_zero_loss_and_gradient() {
    let p = Problem::random(11, 3, MixerKind::Qmix, 16);
    let y0 = bootstrap_target(&p.target(), &p.batch, p.gamma).unwrap();
    let q_tot = ctde_global_loss(&p.online(), &p.batch, &y0).unwrap().q_tot;
    let g = ctde_global_loss(&p.online(), &p.batch, &q_tot).unwrap();
    assert_eq!(g.loss, 0.0);
    assert!(g.grad_theta.iter().all(|t| t.max_abs() == 0.0));
    assert_eq!(g.grad_phi.max_abs(), 0.0);
}

#[test]
fn worked_vdn_bonus_example() {
    let f = fixture();
    let batch = one_transition(0.0, false);
    let r = vdn_corollary_terms(&f.spec, &f.theta, &f.target, &batch, 0.9).unwrap();
    // agent 1 sees agent 2's terms: 0.9 * 0.8 - 1.0 = -0.28
    assert!(close(r[0][0], 0.9 * 0.8 - 1.0));

    // the stated example: max Q₂⁻ = 2.0, Q₂(τ, a) = 1.5 gives R₁ = 0.3
    let mut f = fixture();
    f.theta[1] = constant(&f.spec, &[1.5, 0.0, 0.0]);
    f.target[1] = constant(&f.spec, &[2.0, 1.0, 0.0]);
    let r = vdn_corollary_terms(&f.spec, &f.theta, &f.target, &batch, 0.9).unwrap();
    assert!(close(r[0][0], 0.3), "{r:?}");
    let done = vdn_corollary_terms(&f.spec, &f.theta, &f.target, &one_transition(0.0, true), 0.9).unwrap();
    assert!(close(done[0][0], -1.5));
}

#[test]
fn iql_loss_vanishes_at_its_fixed_point() {
    let spec = MlpSpec::new(2, vec![], 3).unwrap();
    let c = 2.0;
    let gamma = 0.9;
    let q = constant(&spec, &[c, c, c]);
    let batch = one_transition((1.0 - gamma) * c, false);
    let l = iql_loss(&spec, &q, &q, &batch, 0, gamma, None).unwrap();
    assert!(l.loss.abs() < 1e-24);
    assert!(l.grad.max_abs() < 1e-12);
}

/// First (kink-free) random problem at or after `seed`.
fn smooth(seed: u64, n: usize, kind: MixerKind) -> Problem {
    (seed..)
        .map(|s| Problem::random(s, n, kind, 6))
        .find(|p| p.min_kink_distance().unwrap() > 1e-4)
        .unwrap()
}

fn biggest(grad: &ParameterSet, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..grad.num_scalars()).collect();
    idx.sort_by(|&a, &b| grad.scalar(b).abs().total_cmp(&grad.scalar(a).abs()));
    idx.truncate(k);
    idx
}

#[test]
fn factors_are_gradient_inert() {
    let p = smooth(40, 3, MixerKind::Qmix);
    let y = bootstrap_target(&p.target(), &p.batch, p.gamma).unwrap();
    let r_int = vec![vec![-1.0; 6], vec![-3.0; 6], vec![0.0; 6]];
    let beta = 0.5;
    let bundle = ra_factorized_losses(&p.online(), &p.batch, &y, Some(&r_int), beta).unwrap();
    let i = 1;
    let q_tot = |t: &ParameterSet| {
        let mut theta = p.theta.clone();
        theta[i] = t.clone();
        ctde_global_loss(&ValueNets { theta: &theta, ..p.online() }, &p.batch, &y).unwrap().q_tot
    };
    let b = p.batch.size as f64;
    let mut frozen = |t: &ParameterSet| q_tot(t).iter().zip(&bundle.factors[i]).map(|(q, f)| f * q).sum::<f64>() / b;
    let mut live = |t: &ParameterSet| {
        q_tot(t)
            .iter()
            .enumerate()
            .map(|(k, q)| -2.0 * (y[k] + beta * r_int[i][k] - q) * q)
            .sum::<f64>()
            / b
    };
    let idx = biggest(&bundle.grad_theta[i], 5);
    let fd_frozen = finite_difference_subset(&mut frozen, &p.theta[i], 1e-6, &idx).unwrap();
    let fd_live = finite_difference_subset(&mut live, &p.theta[i], 1e-6, &idx).unwrap();
    for (k, &c) in idx.iter().enumerate() {
        let analytic = bundle.grad_theta[i].scalar(c);
        assert!((analytic - fd_frozen[k]).abs() <= 1e-6 * (1.0 + fd_frozen[k].abs()), "coordinate {c}");
    }
    // had the factor been differentiated, the gradient would be different
    let gap = idx
        .iter()
        .enumerate()
        .map(|(k, &c)| (bundle.grad_theta[i].scalar(c) - fd_live[k]).abs())
        .fold(0.0, f64::max);
    assert!(gap > 1e-4, "{gap}");
}

#[test]
fn intrinsic_reward_contributes_no_gradient() {
    let env = Env::new(EnvConfig::default()).unwrap();
    let trainer = TrainerConfig {
        algo: Algo::Iql,
        ..TrainerConfig::default()
    };
    let network = NetworkConfig {
        hidden_dims: vec![16],
        ..NetworkConfig::default()
    };
    let learner = Learner::new(&env, &trainer, &network, &MixerConfig::default(), &IntrinsicConfig::default(), 3).unwrap();
    let mut worker = RolloutWorker::new(3);
    let (transitions, _) = collect_rollouts(&env, &learner.snapshot(), 1.0, 120, &mut worker).unwrap();
    let sample: Vec<_> = transitions.iter().step_by(10).collect();
    let (batch, observations) = make_batch(&sample, learner.history(), env.n_actions()).unwrap();
    let ctx = ViewContext {
        layout: env.layout(),
        sight_radius: env.sight_radius(),
    };
    let model = ActionModel::new(ctx.layout.dim(), vec![16], env.n_actions(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let spec = learner.q_spec();
    let i = 0;
    let beta = 1.0;
    let bonus_at = |t: &ParameterSet| -> Vec<f64> {
        let q = mlp_predict_batch(spec, t, &batch.inputs[i], batch.size).unwrap();
        action_model_rewards_batch(&model, &ctx, &observations[i], i, &q, batch.size)
            .unwrap()
            .into_iter()
            .map(|r| beta * r)
            .collect()
    };
    let theta = learner.theta()[i].clone();
    let target = learner.theta_target()[i].clone();
    let frozen_bonus = bonus_at(&theta);
    assert!(frozen_bonus.iter().any(|r| *r < 0.0));

    let analytic = iql_loss(spec, &theta, &target, &batch, i, trainer.gamma, Some(&frozen_bonus)).unwrap().grad;
    let idx = biggest(&analytic, 6);
    let mut perturbed = theta.clone();
    perturbed.set_scalar(idx[0], theta.scalar(idx[0]) + 0.05);
    assert_ne!(bonus_at(&perturbed), frozen_bonus, "the reward depends on the Q-network");

    let mut frozen = |t: &ParameterSet| iql_loss(spec, t, &target, &batch, i, trainer.gamma, Some(&frozen_bonus)).unwrap().loss;
    let mut live = |t: &ParameterSet| iql_loss(spec, t, &target, &batch, i, trainer.gamma, Some(&bonus_at(t))).unwrap().loss;
    let fd_frozen = finite_difference_subset(&mut frozen, &theta, 1e-6, &idx).unwrap();
    let fd_live = finite_difference_subset(&mut live, &theta, 1e-6, &idx).unwrap();
    let mut gap: f64 = 0.0;
    for (k, &c) in idx.iter().enumerate() {
        let a = analytic.scalar(c);
        assert!((a - fd_frozen[k]).abs() <= 1e-5 * (1.0 + fd_frozen[k].abs()), "coordinate {c}: {a} vs {}", fd_frozen[k]);
        gap = gap.max((a - fd_live[k]).abs());
    }
    assert!(gap > 1e-6, "live and frozen rewards should differ in gradient, gap {gap}");
}
