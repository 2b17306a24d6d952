use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::config::FilterConfig;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::learner::critic::CriticNet;
use crate::learner::mlp::{Layer, Mlp};
use crate::learner::policy::PolicyNet;
use crate::learner::sac::Agent;
use crate::learner::SacConfig;

pub const CHECKPOINT_VERSION: &str = "cbf-safelayer-ckpt-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub env: EnvConfig,
    pub sac: SacConfig,
    pub filter: FilterConfig,
}

/// Weight rows are indexed by layer input, columns by output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerParams {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetParams {
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<LayerParams>,
}

impl NetParams {
    pub fn from_mlp(net: &Mlp) -> Self {
        Self {
            layer_sizes: net.layer_sizes(),
            layers: net
                .layers()
                .iter()
                .map(|l| LayerParams {
                    weight: l.weight.rows().into_iter().map(|r| r.to_vec()).collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_mlp(&self) -> Result<Mlp> {
        let bad = |reason: String| Error::Parse {
            what: "checkpoint network",
            reason,
        };
        if self.layer_sizes.len() != self.layers.len() + 1 {
            return Err(bad(format!(
                "{} layer sizes for {} layers",
                self.layer_sizes.len(),
                self.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let (rows, cols) = (self.layer_sizes[i], self.layer_sizes[i + 1]);
            if l.weight.len() != rows || l.weight.iter().any(|r| r.len() != cols) || l.bias.len() != cols {
                return Err(bad(format!("layer {i} does not have shape {rows}x{cols}")));
            }
            let flat: Vec<f64> = l.weight.iter().flatten().copied().collect();
            layers.push(Layer {
                weight: Array2::from_shape_vec((rows, cols), flat).map_err(|e| bad(e.to_string()))?,
                bias: Array1::from(l.bias.clone()),
            });
        }
        Mlp::from_layers(layers)
    }
}

/// Trained agent plus the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: String,
    pub seed: u64,
    pub episodes: usize,
    pub total_steps: usize,
    pub config: CheckpointConfig,
    pub policy: NetParams,
    pub q1: NetParams,
    pub q2: NetParams,
    pub target_q1: NetParams,
    pub target_q2: NetParams,
}

impl Checkpoint {
    pub fn from_agent(agent: &Agent, config: CheckpointConfig, seed: u64, episodes: usize, total_steps: usize) -> Self {
        let c = &agent.critic;
        Self {
            version: CHECKPOINT_VERSION.to_string(),
            seed,
            episodes,
            total_steps,
            config,
            policy: NetParams::from_mlp(&agent.policy.net),
            q1: NetParams::from_mlp(&c.q1),
            q2: NetParams::from_mlp(&c.q2),
            target_q1: NetParams::from_mlp(&c.target1),
            target_q2: NetParams::from_mlp(&c.target2),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Internal(format!("checkpoint encoding: {e}")))
    }

    /// Decodes and fully validates a checkpoint document.
    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Parse {
            what: "checkpoint",
            reason: e.to_string(),
        })?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                what: "checkpoint",
                reason: format!(
                    "unsupported version {:?}, expected {CHECKPOINT_VERSION:?}",
                    ckpt.version
                ),
            });
        }
        let cfg = &ckpt.config;
        cfg.sac.validate()?;
        cfg.filter.validate()?;
        cfg.env.validate(cfg.filter.alpha()?)?;
        let policy = ckpt.policy_net()?;
        let critic = ckpt.critic_net()?;
        if policy.state_dim() != 2 || policy.action_dim() != 2 || critic.q1.input_dim() != 4 {
            return Err(Error::Parse {
                what: "checkpoint",
                reason: "networks do not match the planar task dimensions".into(),
            });
        }
        Ok(ckpt)
    }

    pub fn policy_net(&self) -> Result<PolicyNet> {
        PolicyNet::from_net(self.policy.to_mlp()?, self.config.sac.action_scale)
    }

    pub fn critic_net(&self) -> Result<CriticNet> {
        CriticNet::from_parts(
            self.q1.to_mlp()?,
            self.q2.to_mlp()?,
            self.target_q1.to_mlp()?,
            self.target_q2.to_mlp()?,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
