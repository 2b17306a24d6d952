//! Run configuration: TOML with `[env]`, `[sac]` and `[filter]` sections.
//!
//! Unknown keys are rejected and missing keys take their defaults, so an empty
//! document is the default run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::barriers::BarrierSet;
use crate::dynamics::SingleIntegrator2D;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::filter::{ClassKLinear, SafetyFilter};
use crate::learner::SacConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Log-Sum-Exp sharpness κ.
    pub kappa: f64,
    /// Class-K gain α_g.
    pub alpha_gain: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            kappa: 2.0,
            alpha_gain: 5.0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("filter.kappa", self.kappa), ("filter.alpha_gain", self.alpha_gain)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    pub fn alpha(&self) -> Result<ClassKLinear> {
        ClassKLinear::new(self.alpha_gain).map_err(|e| Error::config("filter.alpha_gain", e.to_string()))
    }

    pub fn build(&self, barriers: BarrierSet) -> Result<SafetyFilter<SingleIntegrator2D>> {
        self.validate()?;
        SafetyFilter::new(barriers, self.kappa, self.alpha()?, SingleIntegrator2D)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub sac: SacConfig,
    pub filter: FilterConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            sac: SacConfig::default(),
            filter: FilterConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        self.sac.validate()?;
        self.env.validate(self.filter.alpha()?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(format!("config encoding: {e}")))
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| {
        let reason = e.message().trim().to_string();
        let key = match e.span() {
            Some(span) => format!("line {}", text[..span.start.min(text.len())].matches('\n').count() + 1),
            None => "document".to_string(),
        };
        Error::Config { key, reason }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
