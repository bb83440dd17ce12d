//! Fixtures shared by the criterion benchmarks.

use tendency_core::env::{Env, EnvConfig};
use tendency_core::intrinsic::IntrinsicConfig;
use tendency_core::mixer::MixerKind;
use tendency_core::training::{Algo, MixerConfig, NetworkConfig, Trainer, TrainerConfig};
use tendency_core::verify::Problem;

/// A fixed random loss problem with `n` agents.
pub fn problem(n: usize, kind: MixerKind, batch: usize) -> Problem {
    Problem::random(7, n, kind, batch)
}

/// A FocusFire trainer that has already taken its first learner step, so
/// every further `iterate` call collects and trains.
pub fn warm_trainer(algo: Algo) -> Trainer {
    let trainer = TrainerConfig {
        algo,
        learning_starts: 64,
        ..TrainerConfig::default()
    };
    let mut t = Trainer::new(
        Env::new(EnvConfig::default()).expect("default env"),
        &trainer,
        &NetworkConfig::default(),
        &MixerConfig::default(),
        &IntrinsicConfig::default(),
        0,
    )
    .expect("default trainer");
    while t.iterate().expect("iterate").is_none() {}
    t
}
