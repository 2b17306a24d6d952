use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::FilterConfig;
use crate::env::{Env, EnvConfig};
use crate::error::{Error, Result};
use crate::learner::policy::PolicyNet;
use crate::trace::TraceRow;

/// Independent per-index seed: stream `stream` of the ChaCha generator seeded by `master`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalEpisode {
    pub episode: usize,
    pub steps: usize,
    pub reached_goal: bool,
    pub episode_return: f64,
    pub min_hi: f64,
    pub min_composite_h: f64,
    /// Visited states (start included) with some `h_i < 0`.
    pub unsafe_steps: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub episodes: Vec<EvalEpisode>,
    pub traces: Vec<TraceRow>,
}

impl EvalReport {
    pub fn success_rate(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().filter(|e| e.reached_goal).count() as f64 / self.episodes.len() as f64
    }

    pub fn unsafe_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.unsafe_steps).sum()
    }

    pub fn min_hi(&self) -> f64 {
        self.episodes.iter().map(|e| e.min_hi).fold(f64::INFINITY, f64::min)
    }
}

fn run_episode(env: &mut Env, policy: &PolicyNet, episode: usize, seed: u64) -> Result<EvalEpisode> {
    let mut x = env.reset(episode, derive_seed(seed, episode as u64))?;
    let start = env.filter().composite(&x)?;
    let mut ep = EvalEpisode {
        episode,
        steps: 0,
        reached_goal: false,
        episode_return: 0.0,
        min_hi: start.min_component(),
        min_composite_h: start.value,
        unsafe_steps: usize::from(start.min_component() < 0.0),
    };
    loop {
        let nominal = policy.mean_action(&x)?;
        let filtered = env.filter_action(&nominal)?;
        let step = env.step(&nominal, &filtered)?;
        ep.steps += 1;
        ep.episode_return += step.reward;
        ep.min_hi = ep.min_hi.min(step.min_hi);
        ep.min_composite_h = ep.min_composite_h.min(step.composite_h);
        ep.unsafe_steps += usize::from(step.min_hi < 0.0);
        ep.reached_goal |= step.reached_goal;
        x = step.next_state;
        if step.done {
            return Ok(ep);
        }
    }
}

/// Rolls out the deterministic policy `s·tanh(μ)` through the filter.
///
/// Episode `k` starts from a state drawn with `derive_seed(seed, k)`, so the
/// result does not depend on `threads`.
pub fn evaluate(
    policy: &PolicyNet,
    env_cfg: &EnvConfig,
    filter_cfg: &FilterConfig,
    episodes: usize,
    seed: u64,
    record_traces: bool,
    threads: usize,
) -> Result<EvalReport> {
    filter_cfg.validate()?;
    let alpha = filter_cfg.alpha()?;
    let threads = threads.clamp(1, episodes.max(1));
    let worker = |id: usize| -> Result<Vec<(EvalEpisode, Vec<TraceRow>)>> {
        let mut env = Env::new(env_cfg.clone(), filter_cfg.kappa, alpha)?;
        env.set_recording(record_traces);
        (id..episodes)
            .step_by(threads)
            .map(|k| {
                let ep = run_episode(&mut env, policy, k, seed)?;
                Ok((ep, env.take_trace()))
            })
            .collect()
    };
    let mut results: Vec<(EvalEpisode, Vec<TraceRow>)> = if threads == 1 {
        worker(0)?
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads).map(|id| scope.spawn(move || worker(id))).collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .map_err(|_| Error::Internal("evaluation worker panicked".into()))?
                })
                .collect::<Result<Vec<_>>>()
        })?
        .into_iter()
        .flatten()
        .collect()
    };
    results.sort_by_key(|(ep, _)| ep.episode);
    let mut report = EvalReport::default();
    for (ep, rows) in results {
        report.episodes.push(ep);
        report.traces.extend(rows);
    }
    Ok(report)
}
