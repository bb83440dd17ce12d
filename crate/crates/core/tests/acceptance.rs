//! End-to-end acceptance checks, one test per criterion. Each prints a single
//! `criterion N: PASS|FAIL ...` line (run with `--nocapture` to see them).
//!
//! Criterion 7 trains 30 full runs. Results are cached under the cargo
//! target directory and keyed by their exact configuration, so a rerun only
//! trains seeds whose configuration changed.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tendency_core::config::{metrics_path, run_experiment, ExperimentConfig, SeedOutcome};
use tendency_core::env::{Env, EnvConfig, SpreadConfig};
use tendency_core::intrinsic::{IntrinsicBatch, IntrinsicConfig, IntrinsicKind, IntrinsicModule, RewardMode, ViewContext};
use tendency_core::losses::{bootstrap_target, ra_factorized_losses, ValueNets};
use tendency_core::mixer::{mix_forward, mix_partials, MixerSpec};
use tendency_core::nn::relative_discrepancy;
use tendency_core::report::{quantile, render_markdown, summarize};
use tendency_core::training::{
    collect_rollouts, make_batch, read_metrics, Algo, Learner, MixerConfig, NetworkConfig, RolloutWorker, Trainer,
    TrainerConfig,
};
use tendency_core::verify::{verify, VerifyKind};

fn line(n: u32, pass: bool, detail: &str) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

#[test]
fn criterion_1_theorem1_equivalence() {
    let start = Instant::now();
    let report = verify(VerifyKind::Theorem1, 200, 2024).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let mut ns: Vec<usize> = report.records.iter().map(|r| r.n_agents).collect();
    ns.sort_unstable();
    ns.dedup();
    let mixers: Vec<&str> = report.records.iter().map(|r| r.component.as_str()).collect();
    let pass = report.passed
        && report.max_discrepancy <= 1e-10
        && secs <= 120.0
        && ns == [2, 3, 4, 5]
        && mixers.contains(&"qmix")
        && mixers.contains(&"vdn");
    line(
        1,
        pass,
        &format!(
            "200 trials, max relative discrepancy {:.2e}, max FD residual {:.2e}, {secs:.1}s",
            report.max_discrepancy, report.max_fd_residual
        ),
    );
    assert!(pass, "failing seeds {:?}", report.failing_seeds);
}

#[test]
fn criterion_2_vdn_corollary() {
    let report = verify(VerifyKind::Corollary, 200, 77).unwrap();
    let single = report.records.iter().filter(|r| r.n_agents == 1).count();
    let pass = report.passed && report.max_discrepancy <= 1e-10 && single > 0;
    line(
        2,
        pass,
        &format!(
            "200 trials, max relative discrepancy {:.2e}, {single} single-agent trials bit-identical",
            report.max_discrepancy
        ),
    );
    assert!(pass, "failing seeds {:?}", report.failing_seeds);
}

#[test]
fn criterion_3_gradient_oracle() {
    let report = verify(VerifyKind::Gradcheck, 60, 9000).unwrap();
    let components = ["q_net", "action_model", "qmix_mixer", "ctde_loss", "ra_loss", "iql_loss"];
    let counts: Vec<usize> = components
        .iter()
        .map(|c| report.records.iter().filter(|r| r.component == *c).count())
        .collect();
    let pass = report.passed && report.max_fd_residual <= 1e-5 && counts.iter().all(|&c| c >= 50);
    let summary: Vec<String> = components.iter().zip(&counts).map(|(c, n)| format!("{c} x{n}")).collect();
    line(
        3,
        pass,
        &format!("max FD relative error {:.2e} over {}", report.max_fd_residual, summary.join(", ")),
    );
    assert!(pass, "failing seeds {:?}", report.failing_seeds);
}

#[test]
fn criterion_4_qmix_monotonicity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    let mut fd_violations = 0;
    let draws = 10_000;
    for _ in 0..draws {
        let n = rng.gen_range(2..=5);
        let s = rng.gen_range(2..=8);
        let spec = MixerSpec::qmix(n, s, rng.gen_range(2..=8), rng.gen_range(2..=8));
        let mut phi = spec.init(&mut rng);
        let scale = rng.gen_range(0.1..5.0);
        phi.scale(scale);
        let qs: Vec<f64> = (0..n).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let state: Vec<f64> = (0..s).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (q_tot, cache) = mix_forward(&spec, &phi, &qs, &state).unwrap();
        let (dq, _) = mix_partials(&spec, &phi, &cache).unwrap();
        violations += dq.iter().filter(|d| **d < 0.0).count();
        // independent of the backward pass: raising any qᵢ never lowers q_tot
        for i in 0..n {
            let mut up = qs.clone();
            up[i] += 1e-3;
            let (higher, _) = mix_forward(&spec, &phi, &up, &state).unwrap();
            if higher < q_tot - 1e-12 * q_tot.abs().max(1.0) {
                fd_violations += 1;
            }
        }
    }
    let pass = violations == 0 && fd_violations == 0;
    line(
        4,
        pass,
        &format!("{draws} draws, {violations} negative partials, {fd_violations} forward-difference decreases"),
    );
    assert!(pass);
}

fn small_trainer(algo: Algo, seed: u64, beta: f64) -> Trainer {
    let config = TrainerConfig {
        algo,
        learning_starts: 200,
        train_interval: 1,
        ..TrainerConfig::default()
    };
    let intrinsic = IntrinsicConfig { beta, ..IntrinsicConfig::default() };
    Trainer::new(
        Env::new(EnvConfig::default()).unwrap(),
        &config,
        &NetworkConfig::default(),
        &MixerConfig::default(),
        &intrinsic,
        seed,
    )
    .unwrap()
}

#[test]
fn criterion_5_ra_matches_ctde_in_training() {
    let mut global = small_trainer(Algo::Qmix, 5, 0.0);
    let mut factored = small_trainer(Algo::QmixRa, 5, 0.0);
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    while global.learner().steps() < 500 {
        let a = global.iterate().unwrap();
        let b = factored.iterate().unwrap();
        assert_eq!(a.is_some(), b.is_some());
        if a.is_none() {
            continue;
        }
        let (ga, fa) = (global.learner(), factored.learner());
        for (x, y) in ga.theta().iter().zip(fa.theta()) {
            worst = worst.max(relative_discrepancy(x, y));
        }
        worst = worst.max(relative_discrepancy(ga.phi(), fa.phi()));
        compared += 1;
    }
    let pass = compared == 500 && worst <= 1e-8;
    line(
        5,
        pass,
        &format!("{compared} learner steps, max relative parameter discrepancy {worst:.2e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_6_intrinsic_reward_invariants() {
    let report = verify(VerifyKind::Imagine, 100, 600).unwrap();
    let pass = report.passed && report.records.len() == 100;
    line(
        6,
        pass,
        &format!(
            "100 random 3-agent states, max imagined-vs-true deviation {:.2e}, sign/zero/self-identity checks {}",
            report.max_discrepancy,
            if report.passed { "hold" } else { "broken" }
        ),
    );
    assert!(pass, "failing seeds {:?}", report.failing_seeds);
}

#[test]
fn criterion_8_reward_mode_changes_gradients() {
    let env = Env::new(EnvConfig::default()).unwrap();
    let trainer = TrainerConfig {
        algo: Algo::QmixIam,
        ..TrainerConfig::default()
    };
    let network = NetworkConfig::default();
    let learner = Learner::new(&env, &trainer, &network, &MixerConfig::default(), &IntrinsicConfig::default(), 8).unwrap();
    let mut worker = RolloutWorker::new(8);
    let (transitions, _) = collect_rollouts(&env, &learner.snapshot(), 1.0, 256, &mut worker).unwrap();
    let sample: Vec<_> = transitions.iter().step_by(8).collect();
    let (batch, observations) = make_batch(&sample, learner.history(), env.n_actions()).unwrap();
    let ctx = ViewContext {
        layout: env.layout(),
        sight_radius: env.sight_radius(),
    };
    let online = ValueNets {
        q_spec: learner.q_spec(),
        theta: learner.theta(),
        mixer: learner.mixer_spec(),
        phi: learner.phi(),
    };
    let target = ValueNets {
        theta: learner.theta_target(),
        phi: learner.phi_target(),
        ..online
    };
    let y = bootstrap_target(&target, &batch, trainer.gamma).unwrap();
    let q_values: Vec<Vec<f64>> = (0..batch.n_agents)
        .map(|i| tendency_core::nn::mlp_predict_batch(learner.q_spec(), &learner.theta()[i], &batch.inputs[i], batch.size).unwrap())
        .collect();
    let grads = |mode: RewardMode| {
        let cfg = IntrinsicConfig {
            kind: IntrinsicKind::ActionModel,
            reward_mode: mode,
            ..IntrinsicConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let mut module = IntrinsicModule::from_config(&cfg, ctx, batch.n_agents, env.n_actions(), &network.hidden_dims, &mut rng)
            .unwrap()
            .unwrap();
        let out = module
            .process(&IntrinsicBatch {
                observations: &observations,
                q_values: &q_values,
                batch: batch.size,
            })
            .unwrap();
        let bundle = ra_factorized_losses(&online, &batch, &y, Some(&out.rewards), cfg.beta).unwrap();
        (bundle.grad_theta, out.rewards)
    };
    let (per_agent, r_per_agent) = grads(RewardMode::PerAgent);
    let (averaged, r_averaged) = grads(RewardMode::Averaged);
    let diff = per_agent
        .iter()
        .zip(&averaged)
        .map(|(a, b)| relative_discrepancy(a, b))
        .fold(0.0, f64::max);
    let rewards_differ = r_per_agent != r_averaged;
    let pass = rewards_differ && diff > f64::EPSILON;
    line(
        8,
        pass,
        &format!("max relative theta-gradient difference between per-agent and averaged rewards {diff:.2e}"),
    );
    assert!(pass);
}

fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-runs")
}

fn experiment(algo: Algo, env: EnvConfig, dir: &str) -> ExperimentConfig {
    ExperimentConfig {
        env,
        trainer: TrainerConfig {
            algo,
            total_env_steps: 200_000,
            ..TrainerConfig::default()
        },
        output_dir: cache_dir().join(dir),
        seeds: (0..5).collect(),
        ..ExperimentConfig::default()
    }
}

fn wall_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.output_dir.join(format!("wall_{}_seed{seed}.txt", cfg.trainer.algo))
}

/// Trains every seed of `cfg` that has no cached result, recording each run's
/// wall time next to its metrics.
fn ensure_trained(cfg: &ExperimentConfig) {
    for &seed in &cfg.seeds {
        let single = ExperimentConfig {
            seeds: vec![seed],
            ..cfg.clone()
        };
        let start = Instant::now();
        let out = run_experiment(&single, |_| {}).unwrap();
        if let SeedOutcome::Completed(_) = &out[0].seeds[0] {
            fs::write(wall_path(cfg, seed), format!("{:.1}\n", start.elapsed().as_secs_f64())).unwrap();
        }
    }
}

/// Final scores and recorded wall times of every cached seed of `cfg`, or
/// `None` if some seed has not been trained.
fn cached_scores(cfg: &ExperimentConfig) -> Option<(Vec<f64>, Vec<Option<f64>>)> {
    let mut scores = Vec::new();
    let mut walls = Vec::new();
    for &s in &cfg.seeds {
        let rows = read_metrics(&metrics_path(&cfg.output_dir, cfg.trainer.algo, s)).ok()?;
        let last = rows.last()?;
        if last.step != cfg.trainer.total_env_steps {
            return None;
        }
        scores.push(last.win_rate);
        walls.push(fs::read_to_string(wall_path(cfg, s)).ok().and_then(|t| t.trim().parse().ok()));
    }
    Some((scores, walls))
}

fn learning_pairs() -> Vec<(Algo, Algo, EnvConfig, &'static str, f64)> {
    let focus = EnvConfig::default();
    let spread = EnvConfig::Spread(SpreadConfig::default());
    vec![
        (Algo::QmixIam, Algo::Qmix, focus.clone(), "focus_fire", 0.10),
        (Algo::VdnIam, Algo::Vdn, focus, "focus_fire", 0.10),
        (Algo::QmixIam, Algo::Qmix, spread, "spread", 0.0),
    ]
}

struct LearningVerdict {
    pass: bool,
    details: Vec<String>,
    longest: Option<f64>,
    unrecorded: usize,
}

fn judge_learning() -> Option<LearningVerdict> {
    let mut v = LearningVerdict {
        pass: true,
        details: Vec::new(),
        longest: None,
        unrecorded: 0,
    };
    for (iam, base, env, dir, margin) in learning_pairs() {
        let mut medians = Vec::new();
        for algo in [iam, base] {
            let (scores, walls) = cached_scores(&experiment(algo, env.clone(), dir))?;
            for w in walls {
                match w {
                    Some(t) => v.longest = Some(v.longest.map_or(t, |l: f64| l.max(t))),
                    None => v.unrecorded += 1,
                }
            }
            let q = |p| quantile(&scores, p);
            v.details.push(format!(
                "{dir} {algo}: final score median {:.3} [q1 {:.3}, q3 {:.3}]",
                q(0.5),
                q(0.25),
                q(0.75)
            ));
            medians.push(q(0.5));
        }
        let gain = medians[0] - medians[1];
        let ok = gain >= margin - 1e-12;
        v.details.push(format!("{dir} {iam} - {base} = {gain:+.3} (needs >= {margin:+.2}): {}", if ok { "ok" } else { "short" }));
        v.pass &= ok;
    }
    if v.longest.is_some_and(|t| t > 1800.0) {
        v.pass = false;
    }
    Some(v)
}

fn print_learning(v: &LearningVerdict, source: &str) {
    for d in &v.details {
        println!("  {d}");
    }
    let longest = v.longest.map_or("none recorded".to_string(), |t| format!("{t:.0}s"));
    line(
        7,
        v.pass,
        &format!(
            "{source}; longest recorded run {longest} ({} runs without a recorded time), report at {}",
            v.unrecorded,
            cache_dir().join("criterion7.md").display()
        ),
    );
}

/// Prints the criterion 7 verdict from cached runs without training. The
/// asserting version is `criterion_7_learning_benefit`, which is ignored by
/// default because it trains for hours.
#[test]
fn criterion_7_cached_summary() {
    match judge_learning() {
        Some(v) => print_learning(&v, "from cached runs, asserted only by the ignored test"),
        None => println!("criterion 7: NOT RUN (no cached runs; use --ignored to train them)"),
    }
}

#[test]
#[ignore = "trains 30 runs of 200k environment steps; run with --ignored"]
fn criterion_7_learning_benefit() {
    for (iam, base, env, dir, _) in learning_pairs() {
        for algo in [iam, base] {
            ensure_trained(&experiment(algo, env.clone(), dir));
        }
    }
    let mut md = String::new();
    for dir in ["focus_fire", "spread"] {
        md.push_str(&render_markdown(&summarize(&glob_csv(&cache_dir().join(dir))).unwrap()).replacen("# Training summary", &format!("# Training summary: {dir}"), 1));
        md.push('\n');
    }
    fs::write(cache_dir().join("criterion7.md"), &md).unwrap();
    let v = judge_learning().expect("every run was just trained");
    print_learning(&v, "trained or reused");
    assert!(v.longest.is_none_or(|t| t <= 1800.0), "a run exceeded 30 minutes");
    assert!(v.pass, "{}", v.details.join("\n"));
}

fn glob_csv(dir: &std::path::Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect()
        })
        .unwrap_or_default();
    v.sort();
    v
}
