use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::buffer::ReplayBuffer;
use crate::env::{Env, EnvKind, GlobalState, Transition};
use crate::error::{Error, Result};
use crate::nn::{mlp_predict, HistoryEncoderConfig, HistoryWindow, MlpSpec, ParameterSet};

/// Frozen copy of the agent networks used for acting.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    pub q_spec: MlpSpec,
    pub theta: Vec<ParameterSet>,
    pub history: HistoryEncoderConfig,
}

impl PolicySnapshot {
    /// Highest-valued available action per agent; ties go to the lowest index.
    pub fn greedy(&self, histories: &[&[f64]], avail: &[Vec<bool>]) -> Result<Vec<usize>> {
        histories
            .iter()
            .zip(&self.theta)
            .zip(avail)
            .map(|((h, params), mask)| {
                let q = mlp_predict(&self.q_spec, params, h)?;
                argmax_available(&q, mask)
            })
            .collect()
    }

    /// ε-greedy joint action.
    pub fn act<R: Rng + ?Sized>(
        &self,
        histories: &[&[f64]],
        avail: &[Vec<bool>],
        epsilon: f64,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let greedy = self.greedy(histories, avail)?;
        Ok(greedy
            .into_iter()
            .zip(avail)
            .map(|(g, mask)| {
                if rng.gen::<f64>() < epsilon {
                    let options: Vec<usize> = (0..mask.len()).filter(|&a| mask[a]).collect();
                    *options.choose(rng).unwrap_or(&g)
                } else {
                    g
                }
            })
            .collect())
    }
}

fn argmax_available(q: &[f64], mask: &[bool]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for a in 0..q.len() {
        if mask[a] && best.is_none_or(|b| q[a] > q[b]) {
            best = Some(a);
        }
    }
    best.ok_or_else(|| Error::Contract("no available action".into()))
}

struct Episode {
    state: GlobalState,
    obs: Vec<Vec<f64>>,
    histories: Vec<HistoryWindow>,
    ret: f64,
}

/// One independent actor with its own environment instance and RNG.
pub struct RolloutWorker {
    rng: ChaCha8Rng,
    episode: Option<Episode>,
}

impl RolloutWorker {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            episode: None,
        }
    }
}

/// Experience gathered by one or more workers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutStats {
    pub steps: u64,
    /// Returns of episodes that finished during collection.
    pub returns: Vec<f64>,
    pub wins: usize,
}

impl RolloutStats {
    fn merge(&mut self, other: RolloutStats) {
        self.steps += other.steps;
        self.returns.extend(other.returns);
        self.wins += other.wins;
    }
}

fn start_episode(env: &Env, history: HistoryEncoderConfig, seed: u64) -> Episode {
    let (state, obs) = env.reset(seed);
    let n_actions = env.n_actions();
    let histories = obs.iter().map(|o| HistoryWindow::start(history, o, n_actions)).collect();
    Episode {
        state,
        obs,
        histories,
        ret: 0.0,
    }
}

/// Runs `steps` ε-greedy environment steps, continuing any unfinished episode.
pub fn collect_rollouts(
    env: &Env,
    snapshot: &PolicySnapshot,
    epsilon: f64,
    steps: usize,
    worker: &mut RolloutWorker,
) -> Result<(Vec<Transition>, RolloutStats)> {
    let mut out = Vec::with_capacity(steps);
    let mut stats = RolloutStats::default();
    for _ in 0..steps {
        let mut ep = match worker.episode.take() {
            Some(ep) => ep,
            None => {
                let seed = worker.rng.gen();
                start_episode(env, snapshot.history, seed)
            }
        };
        let avail = env.available_all(&ep.state);
        let hists: Vec<&[f64]> = ep.histories.iter().map(HistoryWindow::encoded).collect();
        let actions = snapshot.act(&hists, &avail, epsilon, &mut worker.rng)?;
        let outcome = env.step(&ep.state, &actions)?;
        let next_avail = env.available_all(&outcome.state);
        out.push(Transition {
            state: ep.state.features(),
            observations: ep.obs.clone(),
            histories: hists.iter().map(|h| h.to_vec()).collect(),
            actions: actions.clone(),
            reward: outcome.reward,
            next_state: outcome.state.features(),
            next_observations: outcome.observations.clone(),
            done: outcome.done,
            avail,
            next_avail,
        });
        stats.steps += 1;
        ep.ret += outcome.reward;
        if outcome.done {
            stats.returns.push(ep.ret);
            stats.wins += usize::from(outcome.won);
        } else {
            for ((h, o), &a) in ep.histories.iter_mut().zip(&outcome.observations).zip(&actions) {
                h.push(o, a);
            }
            ep.state = outcome.state;
            ep.obs = outcome.observations;
            worker.episode = Some(ep);
        }
    }
    Ok((out, stats))
}

/// Runs every worker on its own thread for `steps_per_worker` steps and appends
/// the transitions to `buffer` in worker order, so results do not depend on
/// thread scheduling.
pub fn collect_parallel(
    env: &Env,
    snapshot: &PolicySnapshot,
    epsilon: f64,
    steps_per_worker: usize,
    workers: &mut [RolloutWorker],
    buffer: &mut ReplayBuffer<Transition>,
) -> Result<RolloutStats> {
    let results: Vec<Result<(Vec<Transition>, RolloutStats)>> = if workers.len() == 1 {
        vec![collect_rollouts(env, snapshot, epsilon, steps_per_worker, &mut workers[0])]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = workers
                .iter_mut()
                .map(|w| scope.spawn(move || collect_rollouts(env, snapshot, epsilon, steps_per_worker, w)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Contract("rollout worker panicked".into()))))
                .collect()
        })
    };
    let mut stats = RolloutStats::default();
    for r in results {
        let (transitions, s) = r?;
        buffer.extend(transitions);
        stats.merge(s);
    }
    Ok(stats)
}

/// Greedy evaluation summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub episodes: usize,
    pub mean_return: f64,
    /// FocusFire: fraction of episodes won.
    pub win_rate: f64,
    /// Spread: landmark occupancy at the last step, averaged over episodes.
    pub occupancy: f64,
    pub kind: EnvKind,
}

impl EvalMetrics {
    /// The environment's success measure: win rate or final occupancy.
    pub fn score(&self) -> f64 {
        match self.kind {
            EnvKind::FocusFire => self.win_rate,
            EnvKind::Spread => self.occupancy,
        }
    }
}

/// Greedy rollouts from a deterministic sequence of start states derived from `seed`.
pub fn evaluate(env: &Env, snapshot: &PolicySnapshot, episodes: usize, seed: u64) -> Result<EvalMetrics> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let (mut total, mut wins, mut occ) = (0.0, 0usize, 0.0);
    for _ in 0..episodes {
        let mut ep = start_episode(env, snapshot.history, seeds.gen());
        loop {
            let avail = env.available_all(&ep.state);
            let hists: Vec<&[f64]> = ep.histories.iter().map(HistoryWindow::encoded).collect();
            let actions = snapshot.greedy(&hists, &avail)?;
            let outcome = env.step(&ep.state, &actions)?;
            ep.ret += outcome.reward;
            if outcome.done {
                wins += usize::from(outcome.won);
                occ += outcome.occupancy;
                break;
            }
            for ((h, o), &a) in ep.histories.iter_mut().zip(&outcome.observations).zip(&actions) {
                h.push(o, a);
            }
            ep.state = outcome.state;
        }
        total += ep.ret;
    }
    let n = episodes as f64;
    Ok(EvalMetrics {
        episodes,
        mean_return: total / n,
        win_rate: wins as f64 / n,
        occupancy: occ / n,
        kind: env.kind(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvConfig, FocusFireConfig, SpreadConfig};

    fn snapshot(env: &Env, seed: u64) -> PolicySnapshot {
        let history = HistoryEncoderConfig::default();
        let q_spec = MlpSpec::new(history.encoded_dim(env.obs_dim(), env.n_actions()), vec![16], env.n_actions()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PolicySnapshot {
            theta: (0..env.n_agents()).map(|_| q_spec.init(&mut rng)).collect(),
            q_spec,
            history,
        }
    }

    #[test]
    fn argmax_respects_mask_and_ties() {
        assert_eq!(argmax_available(&[1.0, 5.0, 3.0], &[true, false, true]).unwrap(), 2);
        assert_eq!(argmax_available(&[2.0, 2.0], &[true, true]).unwrap(), 0);
        assert!(argmax_available(&[1.0], &[false]).is_err());
    }

    #[test]
    fn rollouts_are_consistent() {
        let env = Env::new(EnvConfig::FocusFire(FocusFireConfig::default())).unwrap();
        let snap = snapshot(&env, 0);
        let mut w = RolloutWorker::new(3);
        let (ts, stats) = collect_rollouts(&env, &snap, 1.0, 400, &mut w).unwrap();
        assert_eq!(ts.len(), 400);
        assert_eq!(stats.steps, 400);
        assert!(!stats.returns.is_empty());
        for pair in ts.windows(2) {
            let (t, n) = (&pair[0], &pair[1]);
            for (i, &a) in t.actions.iter().enumerate() {
                assert!(t.avail[i][a]);
                if !t.done {
                    let next = snap.history.advance(&t.histories[i], &t.next_observations[i], a, env.n_actions());
                    assert_eq!(next, n.histories[i]);
                }
            }
            if !t.done {
                assert_eq!(t.next_state, n.state);
            }
        }
    }

    #[test]
    fn parallel_collection_is_deterministic() {
        let env = Env::new(EnvConfig::Spread(SpreadConfig::default())).unwrap();
        let snap = snapshot(&env, 1);
        let run = || {
            let mut workers: Vec<_> = (0..3).map(RolloutWorker::new).collect();
            let mut buf = ReplayBuffer::new(1000).unwrap();
            let stats = collect_parallel(&env, &snap, 0.5, 40, &mut workers, &mut buf).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let sample: Vec<Transition> = buf.sample(20, &mut rng).unwrap().into_iter().cloned().collect();
            (stats, sample)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a.steps, 120);
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn evaluation_is_repeatable() {
        for env in [
            Env::new(EnvConfig::FocusFire(FocusFireConfig::default())).unwrap(),
            Env::new(EnvConfig::Spread(SpreadConfig::default())).unwrap(),
        ] {
            let snap = snapshot(&env, 2);
            let a = evaluate(&env, &snap, 5, 11).unwrap();
            let b = evaluate(&env, &snap, 5, 11).unwrap();
            assert_eq!(a, b);
            assert!((0.0..=1.0).contains(&a.score()));
        }
    }
}
