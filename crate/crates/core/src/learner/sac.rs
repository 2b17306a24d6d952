//! Critic and policy losses with exact gradients.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::dynamics::{ActionVec, AffineSystem, StateVec};
use crate::error::{check_len, Error, Result};
use crate::filter::{FilterJacobian, SafetyFilter};
use crate::learner::adam::Adam;
use crate::learner::critic::{critic_input, CriticNet};
use crate::learner::mlp::Mlp;
use crate::learner::policy::PolicyNet;
use crate::learner::replay::Batch;
use crate::learner::SacConfig;

/// Policy, critics and their optimisers.
#[derive(Debug, Clone)]
pub struct Agent {
    pub policy: PolicyNet,
    pub critic: CriticNet,
    pub policy_opt: Adam,
    pub q1_opt: Adam,
    pub q2_opt: Adam,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, cfg: &SacConfig, rng: &mut R) -> Result<Self> {
        let policy = PolicyNet::new(state_dim, action_dim, cfg.hidden_units, cfg.action_scale, rng)?;
        let critic = CriticNet::new(state_dim, action_dim, cfg.hidden_units, rng)?;
        Ok(Self::from_nets(policy, critic, cfg.learning_rate))
    }

    pub fn from_nets(policy: PolicyNet, critic: CriticNet, learning_rate: f64) -> Self {
        Self {
            policy_opt: Adam::new(policy.net.num_params(), learning_rate),
            q1_opt: Adam::new(critic.q1.num_params(), learning_rate),
            q2_opt: Adam::new(critic.q2.num_params(), learning_rate),
            policy,
            critic,
        }
    }
}

fn gaussian_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Runs the safety filter on every row; returns `u_s` and the Jacobians.
fn filter_rows<S: AffineSystem>(
    filter: &SafetyFilter<S>,
    states: ArrayView2<'_, f64>,
    nominal: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, Vec<FilterJacobian>, Vec<f64>)> {
    let mut safe = Array2::zeros(nominal.raw_dim());
    let mut jacobians = Vec::with_capacity(states.nrows());
    let mut etas = Vec::with_capacity(states.nrows());
    for (i, (x, u)) in states.rows().into_iter().zip(nominal.rows()).enumerate() {
        let out = filter.apply(&StateVec::new(x.to_vec())?, &ActionVec::new(u.to_vec())?)?;
        safe.row_mut(i)
            .assign(&ndarray::aview1(out.result.safe_action.as_slice()));
        jacobians.push(out.jacobian);
        etas.push(out.result.eta);
    }
    Ok((safe, jacobians, etas))
}

/// Bootstrapped targets `y = r + γ(1 − d)(min Q̂(x′, u_s′) − α_e log π(ū′|x′))`,
/// with `u_s′` produced by policy plus filter at `x′` for the given noise.
pub fn critic_targets<S: AffineSystem>(
    batch: &Batch,
    policy: &PolicyNet,
    critic: &CriticNet,
    filter: &SafetyFilter<S>,
    cfg: &SacConfig,
    next_noise: ArrayView2<'_, f64>,
) -> Result<Array1<f64>> {
    let pb = policy.forward_batch(batch.next_states.view(), next_noise)?;
    let (safe, _, _) = filter_rows(filter, batch.next_states.view(), pb.actions.view())?;
    let input = critic_input(batch.next_states.view(), safe.view())?;
    let q_next = critic.target_min(input.view())?;
    Ok(Array1::from_shape_fn(batch.len(), |i| {
        let soft_value = q_next[i] - cfg.entropy_alpha * pb.log_prob[i];
        batch.rewards[i] + cfg.gamma * (1.0 - batch.dones[i]) * soft_value
    }))
}

/// `mean ½(Q₁ − y)² + mean ½(Q₂ − y)²` and the gradients of each term.
#[derive(Debug, Clone)]
pub struct CriticLoss {
    pub loss: f64,
    pub grads1: Mlp,
    pub grads2: Mlp,
}

pub fn critic_loss(batch: &Batch, targets: &Array1<f64>, critic: &CriticNet) -> Result<CriticLoss> {
    check_len("critic targets", batch.len(), targets.len())?;
    let input = critic_input(batch.states.view(), batch.actions.view())?;
    let b = batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(2);
    for net in [&critic.q1, &critic.q2] {
        let tape = net.forward_batch(input.view())?;
        let residual = &tape.output().column(0) - targets;
        loss += 0.5 * residual.dot(&residual) / b;
        let d_out = (residual / b).insert_axis(ndarray::Axis(1));
        let mut g = net.zeros_like();
        net.backward(&tape, d_out.view(), Some(&mut g))?;
        grads.push(g);
    }
    let grads2 = grads.pop().expect("two critics");
    let grads1 = grads.pop().expect("two critics");
    Ok(CriticLoss { loss, grads1, grads2 })
}

/// `mean[α_e log π(ū|x) − min(Q₁, Q₂)(x, u_s)]` with `u_s = filter(x, ū(φ))`.
#[derive(Debug, Clone)]
pub struct PolicyLoss {
    pub loss: f64,
    pub grads: Mlp,
    /// Rows on which the filter modified the action.
    pub active: usize,
    /// Smallest `|η|` over the batch, useful for locating kinks.
    pub min_abs_eta: f64,
}

pub fn policy_loss<S: AffineSystem>(
    states: ArrayView2<'_, f64>,
    noise: ArrayView2<'_, f64>,
    policy: &PolicyNet,
    critic: &CriticNet,
    filter: &SafetyFilter<S>,
    entropy_alpha: f64,
) -> Result<PolicyLoss> {
    let b = states.nrows();
    let m = policy.action_dim();
    let pb = policy.forward_batch(states, noise)?;
    let (safe, jacobians, etas) = filter_rows(filter, states, pb.actions.view())?;
    let input = critic_input(states, safe.view())?;
    let (t1, t2) = critic.online(input.view())?;
    let (q1, q2) = (t1.output().column(0), t2.output().column(0));

    // The twin minimum routes each row's gradient through one critic.
    let scale = 1.0 / b as f64;
    let mut d1 = Array2::zeros((b, 1));
    let mut d2 = Array2::zeros((b, 1));
    let mut loss = 0.0;
    for i in 0..b {
        let q_min = if q1[i] <= q2[i] {
            d1[[i, 0]] = -scale;
            q1[i]
        } else {
            d2[[i, 0]] = -scale;
            q2[i]
        };
        loss += scale * (entropy_alpha * pb.log_prob[i] - q_min);
    }
    let d_in1 = critic.q1.backward(&t1, d1.view(), None)?;
    let d_in2 = critic.q2.backward(&t2, d2.view(), None)?;
    let n = states.ncols();
    let mut d_action = Array2::zeros((b, m));
    for (i, jac) in jacobians.iter().enumerate() {
        let d_safe: Vec<f64> = (0..m).map(|j| d_in1[[i, n + j]] + d_in2[[i, n + j]]).collect();
        let d_nominal = jac.apply_transpose(&d_safe);
        d_action.row_mut(i).assign(&ndarray::aview1(&d_nominal));
    }
    let d_log_prob = Array1::from_elem(b, entropy_alpha * scale);
    let mut grads = policy.net.zeros_like();
    policy.backward_batch(&pb, d_action.view(), d_log_prob.view(), &mut grads)?;
    Ok(PolicyLoss {
        loss,
        grads,
        active: etas.iter().filter(|&&e| e > 0.0).count(),
        min_abs_eta: etas.iter().fold(f64::INFINITY, |acc, e| acc.min(e.abs())),
    })
}

#[derive(Serialize)]
struct BatchDump<'a> {
    stage: &'a str,
    loss: f64,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    next_states: Vec<Vec<f64>>,
    dones: Vec<f64>,
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Error carrying a JSON dump of the batch that produced a non-finite loss.
fn numerical_failure(stage: &str, loss: f64, batch: &Batch) -> Error {
    let dump = BatchDump {
        stage,
        loss,
        states: rows(&batch.states),
        actions: rows(&batch.actions),
        rewards: batch.rewards.to_vec(),
        next_states: rows(&batch.next_states),
        dones: batch.dones.to_vec(),
    };
    let json = serde_json::to_string(&dump).unwrap_or_else(|e| format!("\"unserialisable batch: {e}\""));
    Error::Numerical(format!("non-finite {stage} loss; offending batch: {json}"))
}

/// One gradient step on both critics. Returns the combined loss.
pub fn critic_update<S: AffineSystem, R: Rng + ?Sized>(
    batch: &Batch,
    agent: &mut Agent,
    filter: &SafetyFilter<S>,
    cfg: &SacConfig,
    rng: &mut R,
) -> Result<f64> {
    let noise = gaussian_noise(batch.len(), agent.policy.action_dim(), rng);
    let targets = critic_targets(batch, &agent.policy, &agent.critic, filter, cfg, noise.view())?;
    let out = critic_loss(batch, &targets, &agent.critic)?;
    if !(out.loss.is_finite() && out.grads1.is_finite() && out.grads2.is_finite()) {
        return Err(numerical_failure("critic", out.loss, batch));
    }
    agent.q1_opt.step(&mut agent.critic.q1, &out.grads1)?;
    agent.q2_opt.step(&mut agent.critic.q2, &out.grads2)?;
    Ok(out.loss)
}

/// One gradient step on the policy through the filter. Returns the loss.
pub fn policy_update<S: AffineSystem, R: Rng + ?Sized>(
    batch: &Batch,
    agent: &mut Agent,
    filter: &SafetyFilter<S>,
    cfg: &SacConfig,
    rng: &mut R,
) -> Result<f64> {
    let noise = gaussian_noise(batch.len(), agent.policy.action_dim(), rng);
    let out = policy_loss(
        batch.states.view(),
        noise.view(),
        &agent.policy,
        &agent.critic,
        filter,
        cfg.entropy_alpha,
    )?;
    if !(out.loss.is_finite() && out.grads.is_finite()) {
        return Err(numerical_failure("policy", out.loss, batch));
    }
    agent.policy_opt.step(&mut agent.policy.net, &out.grads)?;
    Ok(out.loss)
}
