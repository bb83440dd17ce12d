use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::buffer::ReplayBuffer;
use super::learner::{make_batch, substream, Learner, TrainStats};
use super::metrics::MetricsRow;
use super::rollout::{collect_parallel, evaluate, EvalMetrics, RolloutWorker};
use super::{Algo, MixerConfig, NetworkConfig, TrainerConfig};
use crate::env::{Env, Transition};
use crate::error::Result;
use crate::intrinsic::IntrinsicConfig;

const STREAM_SAMPLING: u64 = 4;
const STREAM_CHECK: u64 = 5;
const STREAM_EVAL: u64 = 6;
const STREAM_WORKERS: u64 = 100;

#[derive(Debug, Default, Clone, Copy)]
struct Running {
    sum: f64,
    n: u64,
}

impl Running {
    fn add(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.sum += v;
            self.n += 1;
        }
    }

    fn take(&mut self) -> f64 {
        let out = if self.n == 0 { f64::NAN } else { self.sum / self.n as f64 };
        *self = Running::default();
        out
    }
}

/// Outcome of a complete run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub algo: Algo,
    pub seed: u64,
    pub env_steps: u64,
    pub learner_steps: u64,
    pub episodes: u64,
    pub final_eval: EvalMetrics,
    pub rows: Vec<MetricsRow>,
}

/// Drives collection, learning and evaluation for one seed.
pub struct Trainer {
    env: Env,
    config: TrainerConfig,
    seed: u64,
    learner: Learner,
    buffer: ReplayBuffer<Transition>,
    workers: Vec<RolloutWorker>,
    sample_rng: ChaCha8Rng,
    check_rng: ChaCha8Rng,
    eval_seed: u64,
    env_steps: u64,
    episodes: u64,
    loss: Running,
    r_am: Running,
    r_int: Running,
}

impl Trainer {
    pub fn new(
        env: Env,
        trainer: &TrainerConfig,
        network: &NetworkConfig,
        mixer: &MixerConfig,
        intrinsic: &IntrinsicConfig,
        seed: u64,
    ) -> Result<Self> {
        let learner = Learner::new(&env, trainer, network, mixer, intrinsic, seed)?;
        let workers = (0..trainer.rollout_workers)
            .map(|w| RolloutWorker::new(substream(seed, STREAM_WORKERS + w as u64).gen()))
            .collect();
        Ok(Self {
            buffer: ReplayBuffer::new(trainer.buffer_capacity)?,
            workers,
            sample_rng: substream(seed, STREAM_SAMPLING),
            check_rng: substream(seed, STREAM_CHECK),
            eval_seed: substream(seed, STREAM_EVAL).gen(),
            config: trainer.clone(),
            env,
            seed,
            learner,
            env_steps: 0,
            episodes: 0,
            loss: Running::default(),
            r_am: Running::default(),
            r_int: Running::default(),
        })
    }

    pub fn learner(&self) -> &Learner {
        &self.learner
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn epsilon(&self) -> f64 {
        self.config.epsilon(self.env_steps)
    }

    /// Collects `train_interval` environment steps (split across workers) and,
    /// once enough experience is stored, takes one learner step.
    pub fn iterate(&mut self) -> Result<Option<TrainStats>> {
        let per_worker = self.config.train_interval.div_ceil(self.workers.len());
        let snapshot = self.learner.snapshot();
        let stats = collect_parallel(
            &self.env,
            &snapshot,
            self.epsilon(),
            per_worker,
            &mut self.workers,
            &mut self.buffer,
        )?;
        self.env_steps += stats.steps;
        self.episodes += stats.returns.len() as u64;
        if self.buffer.len() < self.config.learning_starts.max(self.config.batch_size) {
            return Ok(None);
        }
        let sample = self.buffer.sample(self.config.batch_size, &mut self.sample_rng)?;
        let (batch, observations) = make_batch(&sample, self.learner.history(), self.env.n_actions())?;
        let out = self.learner.train_step(&batch, &observations)?;
        self.loss.add(Some(out.loss_g));
        self.r_am.add(out.mean_r_am);
        self.r_int.add(out.mean_r_int);
        Ok(Some(out))
    }

    pub fn evaluate_now(&self) -> Result<EvalMetrics> {
        evaluate(&self.env, &self.learner.snapshot(), self.config.eval_episodes, self.eval_seed)
    }

    fn row(&mut self, step: u64) -> Result<(MetricsRow, EvalMetrics)> {
        let eval = self.evaluate_now()?;
        let resid = if self.buffer.len() >= self.config.batch_size {
            let sample = self.buffer.sample(self.config.batch_size, &mut self.check_rng)?;
            let (batch, _) = make_batch(&sample, self.learner.history(), self.env.n_actions())?;
            let seed = self.check_rng.gen();
            self.learner.gradient_check(&batch, 4, seed)?
        } else {
            f64::NAN
        };
        let row = MetricsRow {
            step,
            episode: self.episodes,
            eval_return: eval.mean_return,
            win_rate: eval.score(),
            mean_r_am: self.r_am.take(),
            mean_r_int: self.r_int.take(),
            loss_g: self.loss.take(),
            grad_check_resid: resid,
            epsilon: self.epsilon(),
            seed: self.seed,
        };
        Ok((row, eval))
    }

    /// Trains for `total_env_steps`, emitting a row at step 0, every
    /// `eval_interval` steps and at the end. Rows are labelled with their
    /// nominal checkpoint; collection happens in chunks, so the true step
    /// count may exceed the label by less than one chunk.
    pub fn run(&mut self, mut on_row: impl FnMut(&MetricsRow) -> Result<()>) -> Result<RunSummary> {
        let total = self.config.total_env_steps;
        let mut rows = Vec::new();
        let (first, mut last_eval) = self.row(0)?;
        on_row(&first)?;
        rows.push(first);
        let mut next = self.config.eval_interval.min(total.max(1));
        while self.env_steps < total {
            self.iterate()?;
            if self.env_steps >= next || self.env_steps >= total {
                let label = next.min(total);
                let (row, eval) = self.row(label)?;
                on_row(&row)?;
                rows.push(row);
                last_eval = eval;
                next = label + self.config.eval_interval;
            }
        }
        Ok(RunSummary {
            algo: self.learner.algo(),
            seed: self.seed,
            env_steps: self.env_steps,
            learner_steps: self.learner.steps(),
            episodes: self.episodes,
            final_eval: last_eval,
            rows,
        })
    }
}
