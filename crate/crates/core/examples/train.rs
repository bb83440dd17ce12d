//! Trains one algorithm on FocusFire and prints evaluation rows.
//!
//! `cargo run --release --example train -- qmix-iam 20000 8`

use std::time::Instant;

use tendency_core::env::{Env, EnvConfig};
use tendency_core::intrinsic::IntrinsicConfig;
use tendency_core::training::{Algo, MixerConfig, NetworkConfig, Trainer, TrainerConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let algo: Algo = args.get(1).map_or("qmix", String::as_str).parse()?;
    let steps: u64 = args.get(2).map_or(Ok(20_000), |s| s.parse())?;
    let interval: usize = args.get(3).map_or(Ok(8), |s| s.parse())?;
    let env_kind = args.get(4).map_or("focus_fire", String::as_str);
    let env_config: EnvConfig = serde_json::from_str(&format!("{{\"kind\": \"{env_kind}\"}}"))?;
    let trainer = TrainerConfig {
        algo,
        total_env_steps: steps,
        train_interval: interval,
        eval_interval: (steps / 10).max(1),
        ..TrainerConfig::default()
    };
    let mut t = Trainer::new(
        Env::new(env_config)?,
        &trainer,
        &NetworkConfig::default(),
        &MixerConfig::default(),
        &IntrinsicConfig::default(),
        0,
    )?;
    let start = Instant::now();
    let summary = t.run(|row| {
        println!(
            "{:>7} ep {:>5} ret {:>7.3} score {:.3} loss {:.4} r_am {:.3} resid {:.1e} ({:.1}s)",
            row.step,
            row.episode,
            row.eval_return,
            row.win_rate,
            row.loss_g,
            row.mean_r_am,
            row.grad_check_resid,
            start.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    println!(
        "{} learner steps, {} env steps in {:.1}s",
        summary.learner_steps,
        summary.env_steps,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
