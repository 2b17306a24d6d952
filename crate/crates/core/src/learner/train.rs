use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::FilterConfig;
use crate::dynamics::ActionVec;
use crate::env::{Env, EnvConfig, Transition};
use crate::error::{Error, Result};
use crate::learner::checkpoint::{Checkpoint, CheckpointConfig};
use crate::learner::eval::derive_seed;
use crate::learner::policy::policy_sample;
use crate::learner::replay::ReplayBuffer;
use crate::learner::sac::{critic_update, policy_update, Agent};
use crate::learner::SacConfig;
use crate::trace::TraceRow;

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Keep every per-step trace row in memory (large for full runs).
    pub record_traces: bool,
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub episode_return: f64,
    pub steps: usize,
    pub reached_goal: bool,
    /// Minimum of `min_i h_i` over every state visited, start included.
    pub min_hi_episode: f64,
    pub min_composite_h_episode: f64,
    /// Mean losses over the episode's updates; `None` before learning starts.
    pub policy_loss: Option<f64>,
    pub critic_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub agent: Agent,
    pub metrics: Vec<EpisodeMetrics>,
    pub traces: Vec<TraceRow>,
    pub total_steps: usize,
    pub updates: usize,
}

pub fn train(env_cfg: &EnvConfig, sac: &SacConfig, filter_cfg: &FilterConfig, seed: u64) -> Result<TrainOutput> {
    train_with(env_cfg, sac, filter_cfg, seed, &TrainOptions::default(), &mut |_| {})
}

#[derive(Default)]
struct Mean {
    sum: f64,
    count: usize,
}

impl Mean {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    fn get(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Runs the full training loop; `observer` sees each episode's metrics as it ends.
pub fn train_with(
    env_cfg: &EnvConfig,
    sac: &SacConfig,
    filter_cfg: &FilterConfig,
    seed: u64,
    opts: &TrainOptions,
    observer: &mut dyn FnMut(&EpisodeMetrics),
) -> Result<TrainOutput> {
    sac.validate()?;
    filter_cfg.validate()?;
    let alpha = filter_cfg.alpha()?;
    let mut env = Env::new(env_cfg.clone(), filter_cfg.kappa, alpha)?;
    env.set_recording(opts.record_traces);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agent = Agent::new(2, 2, sac, &mut rng)?;
    let mut buffer = ReplayBuffer::new(sac.replay_capacity)?;
    let learning_starts = sac.warmup_steps.max(sac.batch_size);
    let scale = sac.action_scale;

    let mut metrics = Vec::with_capacity(sac.episodes);
    let mut total_steps = 0;
    let mut updates = 0;
    for episode in 0..sac.episodes {
        let mut x = env.reset(episode, derive_seed(seed, episode as u64))?;
        let start = env.filter().composite(&x)?;
        let mut min_hi = start.min_component();
        let mut min_h = start.value;
        let (mut episode_return, mut reached_goal) = (0.0, false);
        let (mut policy_loss, mut critic_loss) = (Mean::default(), Mean::default());
        loop {
            let nominal = if total_steps < sac.warmup_steps {
                ActionVec::new(vec![rng.random_range(-scale..=scale), rng.random_range(-scale..=scale)])?
            } else {
                policy_sample(&agent.policy, &x, &mut rng)?.0
            };
            let filtered = env.filter_action(&nominal)?;
            let step = env.step(&nominal, &filtered)?;
            // Time-limit truncation is not terminal: only goal arrival stops bootstrapping.
            buffer.push(Transition {
                state: x,
                action: filtered.result.safe_action,
                reward: step.reward,
                next_state: step.next_state.clone(),
                done: step.reached_goal,
            });
            total_steps += 1;
            episode_return += step.reward;
            min_hi = min_hi.min(step.min_hi);
            min_h = min_h.min(step.composite_h);
            reached_goal |= step.reached_goal;

            if total_steps >= learning_starts {
                for _ in 0..sac.updates_per_step {
                    let batch = buffer.sample(sac.batch_size, &mut rng)?;
                    critic_loss.add(critic_update(&batch, &mut agent, env.filter(), sac, &mut rng)?);
                    policy_loss.add(policy_update(&batch, &mut agent, env.filter(), sac, &mut rng)?);
                    agent.critic.soft_update_targets(sac.tau)?;
                    updates += 1;
                }
            }
            x = step.next_state;
            if step.done {
                break;
            }
        }
        let m = EpisodeMetrics {
            episode,
            episode_return,
            steps: env.step_index(),
            reached_goal,
            min_hi_episode: min_hi,
            min_composite_h_episode: min_h,
            policy_loss: policy_loss.get(),
            critic_loss: critic_loss.get(),
        };
        observer(&m);
        metrics.push(m);
    }

    let config = CheckpointConfig {
        env: env_cfg.clone(),
        sac: sac.clone(),
        filter: filter_cfg.clone(),
    };
    let checkpoint = Checkpoint::from_agent(&agent, config, seed, sac.episodes, total_steps);
    Ok(TrainOutput {
        checkpoint,
        agent,
        metrics,
        traces: env.take_trace(),
        total_steps,
        updates,
    })
}

/// Metrics CSV: `episode,return,steps,min_hi_episode,min_composite_h_episode,policy_loss,critic_loss`.
/// Losses are empty for episodes without updates.
pub fn write_metrics_csv<W: Write>(metrics: &[EpisodeMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Parse {
        what: "metrics csv",
        reason: e.to_string(),
    };
    w.write_record([
        "episode",
        "return",
        "steps",
        "min_hi_episode",
        "min_composite_h_episode",
        "policy_loss",
        "critic_loss",
    ])
    .map_err(err)?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for m in metrics {
        w.write_record([
            m.episode.to_string(),
            m.episode_return.to_string(),
            m.steps.to_string(),
            m.min_hi_episode.to_string(),
            m.min_composite_h_episode.to_string(),
            opt(m.policy_loss),
            opt(m.critic_loss),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::Parse {
        what: "metrics csv",
        reason: e.to_string(),
    })
}
