use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tendency_core::env::{Env, EnvConfig, SpreadConfig};
use tendency_core::imagine::surrounding_set;
use tendency_core::intrinsic::{
    action_model_forward, action_model_loss, action_model_loss_batch, compute_action_model_reward, rnd_reward, ActionModel,
    IntrinsicBatch, IntrinsicConfig, IntrinsicKind, IntrinsicModule, RndModel, ViewContext,
};
use tendency_core::nn::{adam_update, mlp_forward, mlp_predict_batch, MlpSpec, OptimizerState, ParameterSet};

/// Zero weights everywhere, `bias` on the output layer.
fn constant_model(obs_dim: usize, hidden: Vec<usize>, bias: &[f64]) -> ActionModel {
    let spec = MlpSpec::new(obs_dim, hidden, bias.len()).unwrap();
    let mut params = spec.zeros();
    let last = params.len() - 1;
    params.tensors_mut()[last].data_mut().copy_from_slice(bias);
    ActionModel { spec, params }
}

/// Two Spread agents that can see each other.
fn pair() -> (Env, ViewContext, Vec<Vec<f64>>) {
    let env = Env::new(EnvConfig::Spread(SpreadConfig {
        n_agents: 2,
        n_landmarks: 2,
        sight_radius: Some(50.0),
        ..SpreadConfig::default()
    }))
    .unwrap();
    let ctx = ViewContext {
        layout: env.layout(),
        sight_radius: env.sight_radius(),
    };
    let (_, obs) = env.reset(3);
    (env, ctx, obs)
}

#[test]
fn zero_weights_output_the_bias() {
    let m = constant_model(7, vec![5, 4], &[0.5, -1.0, 2.0]);
    let obs: Vec<f64> = (0..7).map(|k| k as f64 - 3.0).collect();
    assert_eq!(action_model_forward(&m, &obs).unwrap(), vec![0.5, -1.0, 2.0]);
}

#[test]
fn forward_is_the_shared_mlp() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = ActionModel::new(9, vec![8, 8], 4, &mut rng).unwrap();
    let obs: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (reference, _) = mlp_forward(&m.spec, &m.params, &obs).unwrap();
    assert_eq!(action_model_forward(&m, &obs).unwrap(), reference);
    assert!(action_model_forward(&m, &obs[..8]).is_err());
}

#[test]
fn supervised_training_reproduces_a_frozen_q_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q_spec = MlpSpec::new(6, vec![16], 5).unwrap();
    let q_params = q_spec.init(&mut rng);
    let batch = 4;
    let obs: Vec<f64> = (0..batch * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let target = mlp_predict_batch(&q_spec, &q_params, &obs, batch).unwrap();
    let mut model = ActionModel::new(6, vec![16], 5, &mut rng).unwrap();
    let mut opt = OptimizerState::new(&model.params, 1e-2);
    for step in 0..8000 {
        if step == 4000 {
            opt.lr = 1e-3;
        }
        let (_, g) = action_model_loss_batch(&model, &obs, &target, batch).unwrap();
        adam_update(&mut model.params, &g, &mut opt).unwrap();
    }
    let pred = mlp_predict_batch(&model.spec, &model.params, &obs, batch).unwrap();
    let worst = pred.iter().zip(&target).map(|(p, t)| (p - t).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-3, "max deviation {worst}");
}

#[test]
fn three_four_five_reward() {
    let (env, ctx, obs) = pair();
    let n_actions = env.n_actions();
    let set = surrounding_set(&ctx.layout, &obs[0]);
    assert_eq!(set.agents(), [1]);
    let mut bias = vec![0.0; n_actions];
    bias[0] = 3.0;
    bias[1] = 4.0;
    let q = vec![0.0; n_actions];
    let m = constant_model(ctx.layout.dim(), vec![4], &bias);
    let r = compute_action_model_reward(&q, &m, &ctx, &obs[0], 0, &set).unwrap();
    assert!((r + 5.0).abs() < 1e-12, "{r}");

    // matching outputs give exactly zero
    let r = compute_action_model_reward(&bias, &m, &ctx, &obs[0], 0, &set).unwrap();
    assert_eq!(r, 0.0);
    // an isolated agent gets zero whatever the model says
    let empty = surrounding_set(&ctx.layout, &vec![0.0; ctx.layout.dim()]);
    assert!(empty.is_empty());
    assert_eq!(compute_action_model_reward(&q, &m, &ctx, &obs[0], 0, &empty).unwrap(), 0.0);
}

#[test]
fn scalar_regression_loss() {
    let m = constant_model(3, vec![], &[2.0]);
    let (loss, g) = action_model_loss(&m, &[0.1, 0.2, 0.3], &[0.0]).unwrap();
    assert_eq!(loss, 4.0);
    // with zero weights the output bias sees d(loss)/d(pred) directly
    let bias_grad = g.tensors().last().unwrap().data()[0];
    assert_eq!(bias_grad, 4.0);

    let (loss, g) = action_model_loss(&m, &[0.1, 0.2, 0.3], &[2.0]).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(g.max_abs(), 0.0);
}

#[test]
fn loss_does_not_depend_on_agent_or_row_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = ActionModel::new(4, vec![6], 3, &mut rng).unwrap();
    let as_agent_3 = m.clone();
    let obs: Vec<f64> = (0..3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let q: Vec<f64> = (0..3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (a, ga) = action_model_loss_batch(&m, &obs, &q, 3).unwrap();
    let (b, gb) = action_model_loss_batch(&as_agent_3, &obs, &q, 3).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(ga, gb);

    let swap = |v: &[f64], w: usize| [&v[2 * w..3 * w], &v[w..2 * w], &v[..w]].concat();
    let (c, gc) = action_model_loss_batch(&m, &swap(&obs, 4), &swap(&q, 3), 3).unwrap();
    assert!((a - c).abs() <= 1e-15 * a.abs());
    assert!(ga.max_abs_diff(&gc) <= 1e-14);
}

#[test]
fn rnd_reward_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut m = RndModel::new(5, vec![8], 4, &mut rng).unwrap();
    let obs: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    assert!(rnd_reward(&m, &obs).unwrap() > 0.0);
    m.predictor = m.target.clone();
    assert_eq!(rnd_reward(&m, &obs).unwrap(), 0.0);
}

#[test]
fn rnd_reward_drops_on_a_revisited_observation() {
    let (env, ctx, obs) = pair();
    let cfg = IntrinsicConfig {
        kind: IntrinsicKind::Rnd,
        lr: 1e-2,
        ..IntrinsicConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut module = IntrinsicModule::from_config(&cfg, ctx, 2, env.n_actions(), &[16], &mut rng).unwrap().unwrap();
    let q = vec![vec![0.0; env.n_actions()]; 2];
    let batch = IntrinsicBatch {
        observations: &obs,
        q_values: &q,
        batch: 1,
    };
    let first = module.process(&batch).unwrap();
    let second = module.process(&batch).unwrap();
    for i in 0..2 {
        assert!(first.raw[i][0] >= 0.0);
        assert!(second.raw[i][0] < first.raw[i][0], "agent {i}: {} -> {}", first.raw[i][0], second.raw[i][0]);
    }
}

#[test]
fn per_agent_models_start_independent_and_shared_models_coincide() {
    let (env, ctx, _) = pair();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let per_agent = IntrinsicConfig {
        kind: IntrinsicKind::ActionModel,
        ..IntrinsicConfig::default()
    };
    let module = IntrinsicModule::from_config(&per_agent, ctx, 2, env.n_actions(), &[8], &mut rng).unwrap().unwrap();
    let sets: Vec<&ParameterSet> = module.parameter_sets().into_iter().map(|(_, p)| p).collect();
    assert_eq!(sets.len(), 2);
    assert_ne!(sets[0], sets[1]);

    let shared = IntrinsicConfig {
        shared_model: true,
        ..per_agent
    };
    let module = IntrinsicModule::from_config(&shared, ctx, 2, env.n_actions(), &[8], &mut rng).unwrap().unwrap();
    assert_eq!(module.parameter_sets().len(), 1);
}
