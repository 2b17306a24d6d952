//! Planar reach-avoid task: a single-integrator agent drives from a start box to a
//! goal disk past circular obstacles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::barriers::{Barrier, BarrierSet, CircularObstacle};
use crate::dynamics::{step_euler, ActionVec, SingleIntegrator2D, StateVec};
use crate::error::{Error, Result};
use crate::filter::{ClassKLinear, FilterOutput, SafetyFilter};
use crate::trace::TraceRow;

/// Rejection-sampling budget for initial states.
pub const MAX_RESET_ATTEMPTS: usize = 1000;

/// Axis-aligned rectangle `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartBox {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl StartBox {
    /// Squared distance from `p` to the closest point of the box.
    fn distance_sq(&self, p: [f64; 2]) -> f64 {
        (0..2)
            .map(|k| {
                let d = (self.min[k] - p[k]).max(0.0).max(p[k] - self.max[k]);
                d * d
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub obstacles: BarrierSet,
    pub goal_center: [f64; 2],
    pub goal_radius: f64,
    pub start_box: StartBox,
    pub dt: f64,
    pub max_steps: usize,
    pub reward_distance_weight: f64,
    pub reward_goal_bonus: f64,
    pub reward_action_weight: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        let obstacles = BarrierSet::new(vec![
            CircularObstacle {
                center: [1.0, 1.0],
                radius: 0.4,
            },
            CircularObstacle {
                center: [2.0, 0.5],
                radius: 0.3,
            },
            CircularObstacle {
                center: [1.5, 2.0],
                radius: 0.5,
            },
        ])
        .expect("default layout is valid");
        Self {
            obstacles,
            goal_center: [3.0, 2.5],
            goal_radius: 0.2,
            start_box: StartBox {
                min: [-0.3, -0.3],
                max: [0.3, 0.3],
            },
            dt: 0.02,
            max_steps: 200,
            reward_distance_weight: 1.0,
            reward_goal_bonus: 100.0,
            reward_action_weight: 0.01,
        }
    }
}

impl EnvConfig {
    /// Checks ranges, geometry, and the discrete margin `dt · α_g < 1`.
    pub fn validate(&self, alpha: ClassKLinear) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be positive and finite, got {v}")))
            }
        };
        positive("env.dt", self.dt)?;
        positive("env.goal_radius", self.goal_radius)?;
        if self.max_steps == 0 {
            return Err(Error::config("env.max_steps", "must be at least 1"));
        }
        for (key, v) in [
            ("env.reward_distance_weight", self.reward_distance_weight),
            ("env.reward_goal_bonus", self.reward_goal_bonus),
            ("env.reward_action_weight", self.reward_action_weight),
        ] {
            if !v.is_finite() {
                return Err(Error::config(key, "must be finite"));
            }
        }
        if !self.goal_center.iter().all(|v| v.is_finite()) {
            return Err(Error::config("env.goal_center", "must be finite"));
        }
        let b = &self.start_box;
        if !(b.min.iter().chain(&b.max).all(|v| v.is_finite()) && b.min[0] <= b.max[0] && b.min[1] <= b.max[1]) {
            return Err(Error::config("env.start_box", "need finite bounds with min <= max"));
        }
        for (i, obs) in self.obstacles.iter().enumerate() {
            if obs.distance(self.goal_center) <= obs.radius + self.goal_radius {
                return Err(Error::config(
                    "env.obstacles",
                    format!("obstacle {i} overlaps the goal region"),
                ));
            }
            if b.distance_sq(obs.center) <= obs.radius * obs.radius {
                return Err(Error::config(
                    "env.obstacles",
                    format!("obstacle {i} overlaps the start box"),
                ));
            }
        }
        if self.dt * alpha.gain() >= 1.0 {
            return Err(Error::config(
                "env.dt",
                format!(
                    "dt * alpha_gain = {} must be below 1 for the discrete safety margin",
                    self.dt * alpha.gain()
                ),
            ));
        }
        Ok(())
    }

    fn goal_distance(&self, p: &[f64]) -> f64 {
        (p[0] - self.goal_center[0]).hypot(p[1] - self.goal_center[1])
    }
}

/// Uniform sample from the start box with every `h_i > 0`.
pub fn reset(cfg: &EnvConfig, rng_seed: u64) -> Result<StateVec> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_start(cfg, &mut rng, |_| true)
}

fn sample_start(cfg: &EnvConfig, rng: &mut ChaCha8Rng, mut accept: impl FnMut(&StateVec) -> bool) -> Result<StateVec> {
    let b = &cfg.start_box;
    let draw = |rng: &mut ChaCha8Rng, k: usize| {
        if b.min[k] == b.max[k] {
            b.min[k]
        } else {
            rng.random_range(b.min[k]..b.max[k])
        }
    };
    for _ in 0..MAX_RESET_ATTEMPTS {
        let x = StateVec::new(vec![draw(rng, 0), draw(rng, 1)])?;
        if cfg.obstacles.iter().all(|o| o.value(&x) > 0.0) && accept(&x) {
            return Ok(x);
        }
    }
    Err(Error::config(
        "env.start_box",
        format!("no safe start state found in {MAX_RESET_ATTEMPTS} draws"),
    ))
}

/// `−w_d ‖p′ − p_goal‖ − w_a ‖u‖² + bonus · 1[reached]`.
pub fn reward(cfg: &EnvConfig, _state: &StateVec, action: &ActionVec, next_state: &StateVec, reached: bool) -> f64 {
    let effort: f64 = action.iter().map(|u| u * u).sum();
    let bonus = if reached { cfg.reward_goal_bonus } else { 0.0 };
    -cfg.reward_distance_weight * cfg.goal_distance(next_state) - cfg.reward_action_weight * effort + bonus
}

/// Transition part of a step, without safety logging.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: StateVec,
    pub reward: f64,
    pub done: bool,
    pub reached_goal: bool,
}

/// Applies an (already filtered) action for one Euler step.
pub fn step(cfg: &EnvConfig, state: &StateVec, safe_action: &ActionVec, step_index: usize) -> Result<StepOutcome> {
    if step_index >= cfg.max_steps {
        return Err(Error::Parameter {
            name: "step_index",
            reason: format!("episode already ended at {} steps", cfg.max_steps),
        });
    }
    let next_state = step_euler(&SingleIntegrator2D, state, safe_action, cfg.dt)?;
    let reached_goal = cfg.goal_distance(&next_state) <= cfg.goal_radius;
    let reward = reward(cfg, state, safe_action, &next_state, reached_goal);
    Ok(StepOutcome {
        next_state,
        reward,
        done: reached_goal || step_index + 1 >= cfg.max_steps,
        reached_goal,
    })
}

/// Per-step record returned to the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: StateVec,
    pub reward: f64,
    pub done: bool,
    pub reached_goal: bool,
    /// `min_i h_i` at the next state.
    pub min_hi: f64,
    /// Composite `h` at the next state.
    pub composite_h: f64,
    /// Filter multiplier used for this step.
    pub eta: f64,
}

/// One replay record; `action` is the executed (filtered) action.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: StateVec,
    pub action: ActionVec,
    pub reward: f64,
    pub next_state: StateVec,
    pub done: bool,
}

/// Stateful episode runner with an attached safety filter and optional trace recording.
pub struct Env {
    cfg: EnvConfig,
    filter: SafetyFilter<SingleIntegrator2D>,
    state: StateVec,
    step_index: usize,
    episode: usize,
    record: bool,
    trace: Vec<TraceRow>,
}

impl Env {
    pub fn new(cfg: EnvConfig, kappa: f64, alpha: ClassKLinear) -> Result<Self> {
        cfg.validate(alpha)?;
        let filter = SafetyFilter::new(cfg.obstacles.clone(), kappa, alpha, SingleIntegrator2D)?;
        Ok(Self {
            cfg,
            filter,
            state: StateVec::zeros(2),
            step_index: 0,
            episode: 0,
            record: false,
            trace: Vec::new(),
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn filter(&self) -> &SafetyFilter<SingleIntegrator2D> {
        &self.filter
    }

    pub fn state(&self) -> &StateVec {
        &self.state
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn set_recording(&mut self, record: bool) {
        self.record = record;
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceRow> {
        std::mem::take(&mut self.trace)
    }

    /// Starts episode `episode` from a start state inside the composite safe set.
    pub fn reset(&mut self, episode: usize, rng_seed: u64) -> Result<StateVec> {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let filter = &self.filter;
        let state = sample_start(&self.cfg, &mut rng, |x| {
            filter.composite(x).map(|c| c.value > 0.0).unwrap_or(false)
        })?;
        self.state = state.clone();
        self.step_index = 0;
        self.episode = episode;
        Ok(state)
    }

    /// Runs the filter on `nominal` at the current state.
    pub fn filter_action(&self, nominal: &ActionVec) -> Result<FilterOutput> {
        self.filter.apply(&self.state, nominal)
    }

    /// Executes `filtered.result.safe_action`; `nominal` is only logged.
    pub fn step(&mut self, nominal: &ActionVec, filtered: &FilterOutput) -> Result<StepResult> {
        let safe = &filtered.result.safe_action;
        let outcome = step(&self.cfg, &self.state, safe, self.step_index)?;
        let next = self.filter.composite(&outcome.next_state)?;
        if self.record {
            self.trace.push(TraceRow {
                episode: self.episode,
                step: self.step_index,
                position: [self.state[0], self.state[1]],
                nominal: [nominal[0], nominal[1]],
                safe: [safe[0], safe[1]],
                eta: filtered.result.eta,
                barrier_values: filtered.composite.components.clone(),
                composite_h: filtered.composite.value,
                reward: outcome.reward,
                done: outcome.done,
            });
        }
        self.state = outcome.next_state.clone();
        self.step_index += 1;
        Ok(StepResult {
            next_state: outcome.next_state,
            reward: outcome.reward,
            done: outcome.done,
            reached_goal: outcome.reached_goal,
            min_hi: next.min_component(),
            composite_h: next.value,
            eta: filtered.result.eta,
        })
    }
}
