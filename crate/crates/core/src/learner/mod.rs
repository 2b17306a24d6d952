//! Soft actor-critic with the closed-form safety filter as the last policy layer.
//!
//! Networks are small dense tanh MLPs with hand-written reverse-mode passes.
//! The policy gradient flows from the critics through the filter Jacobian and
//! the tanh squashing into the policy parameters.

mod adam;
mod checkpoint;
mod critic;
mod eval;
pub mod mlp;
mod policy;
mod replay;
mod sac;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::Adam;
pub use checkpoint::{Checkpoint, CheckpointConfig, LayerParams, NetParams, CHECKPOINT_VERSION};
pub use critic::CriticNet;
pub use eval::{derive_seed, evaluate, EvalEpisode, EvalReport};
pub use mlp::{soft_update, Layer, Mlp, Tape};
pub use policy::{policy_sample, PolicyBatch, PolicyNet, LOG_STD_MAX, LOG_STD_MIN};
pub use replay::{Batch, ReplayBuffer};
pub use sac::{critic_loss, critic_targets, critic_update, policy_loss, policy_update, Agent, CriticLoss, PolicyLoss};
pub use train::{train, train_with, write_metrics_csv, EpisodeMetrics, TrainOptions, TrainOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacConfig {
    pub gamma: f64,
    pub tau: f64,
    /// Fixed entropy temperature α_e.
    pub entropy_alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub episodes: usize,
    pub updates_per_step: usize,
    pub warmup_steps: usize,
    /// Bound on the pre-filter action, per component.
    pub action_scale: f64,
    pub hidden_units: usize,
    pub replay_capacity: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            entropy_alpha: 0.2,
            learning_rate: 3e-4,
            batch_size: 256,
            episodes: 1000,
            updates_per_step: 1,
            warmup_steps: 1000,
            action_scale: 2.0,
            hidden_units: 64,
            replay_capacity: 100_000,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |key: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::config(key, format!("must lie in (0, 1), got {v}")))
            }
        };
        open_unit("sac.gamma", self.gamma)?;
        open_unit("sac.tau", self.tau)?;
        if !(self.entropy_alpha >= 0.0 && self.entropy_alpha.is_finite()) {
            return Err(Error::config("sac.entropy_alpha", "must be nonnegative and finite"));
        }
        for (key, v) in [
            ("sac.learning_rate", self.learning_rate),
            ("sac.action_scale", self.action_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be positive and finite, got {v}")));
            }
        }
        for (key, v) in [
            ("sac.batch_size", self.batch_size),
            ("sac.episodes", self.episodes),
            ("sac.updates_per_step", self.updates_per_step),
            ("sac.hidden_units", self.hidden_units),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self.replay_capacity < self.batch_size {
            return Err(Error::config(
                "sac.replay_capacity",
                format!(
                    "must hold at least one batch ({}), got {}",
                    self.batch_size, self.replay_capacity
                ),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        SacConfig::default().validate().unwrap();
    }

    #[test]
    fn range_errors_name_the_key() {
        let cases: [(&str, SacConfig); 4] = [
            (
                "sac.gamma",
                SacConfig {
                    gamma: 1.0,
                    ..Default::default()
                },
            ),
            (
                "sac.tau",
                SacConfig {
                    tau: 0.0,
                    ..Default::default()
                },
            ),
            (
                "sac.batch_size",
                SacConfig {
                    batch_size: 0,
                    ..Default::default()
                },
            ),
            (
                "sac.replay_capacity",
                SacConfig {
                    replay_capacity: 10,
                    ..Default::default()
                },
            ),
        ];
        for (key, cfg) in cases {
            match cfg.validate() {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key),
                other => panic!("{key}: {other:?}"),
            }
        }
    }
}
