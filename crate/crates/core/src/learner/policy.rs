use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dynamics::{ActionVec, StateVec};
use crate::error::{check_len, Error, Result};
use crate::learner::mlp::{Mlp, Tape};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Tanh-squashed Gaussian policy. The network's output holds the means in the
/// first `m` columns and the raw log standard deviations in the last `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub net: Mlp,
    pub action_scale: f64,
}

/// Forward record of a batched reparameterised sample.
#[derive(Debug, Clone)]
pub struct PolicyBatch {
    pub tape: Tape,
    pub noise: Array2<f64>,
    pub pre_tanh: Array2<f64>,
    pub squashed: Array2<f64>,
    pub std: Array2<f64>,
    /// True where the raw log std was clamped (its gradient is zero there).
    pub clamped: Array2<bool>,
    /// Pre-filter actions `s · tanh(μ + σ ε)`.
    pub actions: Array2<f64>,
    pub log_prob: Array1<f64>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(1 − tanh²z)` without cancellation for large `|z|`.
fn log_one_minus_tanh_sq(z: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - z - softplus(-2.0 * z))
}

impl PolicyNet {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: usize,
        action_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let net = Mlp::new(&[state_dim, hidden, hidden, 2 * action_dim], rng)?;
        Self::from_net(net, action_scale)
    }

    pub fn from_net(net: Mlp, action_scale: f64) -> Result<Self> {
        if !net.output_dim().is_multiple_of(2) {
            return Err(Error::Parameter {
                name: "policy network",
                reason: format!("output width {} is not 2·m", net.output_dim()),
            });
        }
        if !(action_scale > 0.0 && action_scale.is_finite()) {
            return Err(Error::Parameter {
                name: "action_scale",
                reason: format!("must be positive and finite, got {action_scale}"),
            });
        }
        Ok(Self { net, action_scale })
    }

    pub fn state_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.net.output_dim() / 2
    }

    /// Mean and clamped log std at one state.
    pub fn distribution(&self, x: &StateVec) -> Result<(Vec<f64>, Vec<f64>)> {
        let (out, _) = self.net.forward(x)?;
        let m = self.action_dim();
        let log_std = out[m..].iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        Ok((out[..m].to_vec(), log_std))
    }

    /// Deterministic action `s · tanh(μ)`, used for evaluation.
    pub fn mean_action(&self, x: &StateVec) -> Result<ActionVec> {
        let (mean, _) = self.distribution(x)?;
        ActionVec::new(mean.iter().map(|mu| self.action_scale * mu.tanh()).collect())
    }

    /// Sample for a given standard-normal draw `noise`.
    pub fn sample_with_noise(&self, x: &StateVec, noise: &[f64]) -> Result<(ActionVec, f64)> {
        let states = ArrayView2::from_shape((1, x.len()), x.as_slice()).expect("row vector");
        let noise = ArrayView2::from_shape((1, noise.len()), noise).expect("row vector");
        let pb = self.forward_batch(states, noise)?;
        Ok((ActionVec::new(pb.actions.row(0).to_vec())?, pb.log_prob[0]))
    }

    pub fn forward_batch(&self, states: ArrayView2<'_, f64>, noise: ArrayView2<'_, f64>) -> Result<PolicyBatch> {
        let m = self.action_dim();
        check_len("policy noise rows", states.nrows(), noise.nrows())?;
        check_len("policy noise columns", m, noise.ncols())?;
        let tape = self.net.forward_batch(states)?;
        let out = tape.output();
        let b = states.nrows();
        let mut pre_tanh = Array2::zeros((b, m));
        let mut squashed = Array2::zeros((b, m));
        let mut std_dev = Array2::zeros((b, m));
        let mut clamped = Array2::from_elem((b, m), false);
        let mut actions = Array2::zeros((b, m));
        let mut log_prob = Array1::zeros(b);
        let ln_scale = self.action_scale.ln();
        for i in 0..b {
            let mut lp = 0.0;
            for j in 0..m {
                let raw = out[[i, m + j]];
                let log_std = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
                let std = log_std.exp();
                let eps = noise[[i, j]];
                let z = out[[i, j]] + std * eps;
                let a = z.tanh();
                clamped[[i, j]] = raw != log_std;
                std_dev[[i, j]] = std;
                pre_tanh[[i, j]] = z;
                squashed[[i, j]] = a;
                actions[[i, j]] = self.action_scale * a;
                lp += -0.5 * eps * eps - HALF_LN_2PI - log_std - ln_scale - log_one_minus_tanh_sq(z);
            }
            log_prob[i] = lp;
        }
        let pb = PolicyBatch {
            tape,
            noise: noise.to_owned(),
            pre_tanh,
            squashed,
            std: std_dev,
            clamped,
            actions,
            log_prob,
        };
        Ok(pb)
    }

    /// Accumulates parameter gradients of a loss with partials `d_action = ∂L/∂ū`
    /// and `d_log_prob = ∂L/∂log π` (noise held fixed).
    pub fn backward_batch(
        &self,
        pb: &PolicyBatch,
        d_action: ArrayView2<'_, f64>,
        d_log_prob: ArrayView1<'_, f64>,
        grads: &mut Mlp,
    ) -> Result<()> {
        let (b, m) = pb.actions.dim();
        check_len("policy action gradient rows", b, d_action.nrows())?;
        check_len("policy action gradient columns", m, d_action.ncols())?;
        check_len("policy log-prob gradient", b, d_log_prob.len())?;
        let mut d_out = Array2::zeros((b, 2 * m));
        for i in 0..b {
            for j in 0..m {
                let a = pb.squashed[[i, j]];
                // ∂ū/∂z = s(1 − a²); ∂log π/∂z = 2a; ∂log π/∂log σ = −1 directly.
                let dz = d_action[[i, j]] * self.action_scale * (1.0 - a * a) + d_log_prob[i] * 2.0 * a;
                d_out[[i, j]] = dz;
                if !pb.clamped[[i, j]] {
                    d_out[[i, m + j]] = dz * pb.std[[i, j]] * pb.noise[[i, j]] - d_log_prob[i];
                }
            }
        }
        self.net.backward(&pb.tape, d_out.view(), Some(grads))?;
        Ok(())
    }
}

/// Draws `ū` and its log density at the pre-filter action.
pub fn policy_sample<R: Rng + ?Sized>(policy: &PolicyNet, x: &StateVec, rng: &mut R) -> Result<(ActionVec, f64)> {
    let noise: Vec<f64> = (0..policy.action_dim()).map(|_| rng.sample(StandardNormal)).collect();
    policy.sample_with_noise(x, &noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{central_difference, relative_error, GRAD_FD_STEP, GRAD_REL_TOL};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Network whose outputs are the constant biases `(μ, log σ)`.
    fn constant_policy(mean: &[f64], log_std: &[f64], scale: f64) -> PolicyNet {
        let mut net = Mlp::zeros(&[2, 3, 2 * mean.len()]).unwrap();
        let mut params = net.flat_params();
        let n = params.len();
        let bias = &mut params[n - 2 * mean.len()..];
        bias[..mean.len()].copy_from_slice(mean);
        bias[mean.len()..].copy_from_slice(log_std);
        net.set_flat_params(&params).unwrap();
        PolicyNet::from_net(net, scale).unwrap()
    }

    fn x0() -> StateVec {
        StateVec::new(vec![0.3, -0.2]).unwrap()
    }

    #[test]
    fn clamp_floor_gives_near_deterministic_action() {
        let policy = constant_policy(&[0.4, -1.0], &[-50.0, -50.0], 2.0);
        let (_, log_std) = policy.distribution(&x0()).unwrap();
        assert_eq!(log_std, vec![LOG_STD_MIN; 2]);
        let (u, lp) = policy.sample_with_noise(&x0(), &[0.0, 0.0]).unwrap();
        assert_eq!(u.as_slice(), &[2.0 * 0.4f64.tanh(), 2.0 * (-1.0f64).tanh()]);
        assert!(lp.is_finite());
        let (u, _) = policy.sample_with_noise(&x0(), &[1.0, -1.0]).unwrap();
        let sigma = LOG_STD_MIN.exp();
        assert!((u[0] - 2.0 * 0.4f64.tanh()).abs() <= 2.0 * sigma);
        assert_eq!(
            policy.mean_action(&x0()).unwrap().as_slice(),
            &[2.0 * 0.4f64.tanh(), 2.0 * (-1.0f64).tanh()]
        );
    }

    #[test]
    fn actions_stay_in_scale_box_and_log_prob_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let policy = constant_policy(&[3.0, -40.0], &[50.0, -50.0], 1.5);
        for _ in 0..2000 {
            let (u, lp) = policy_sample(&policy, &x0(), &mut rng).unwrap();
            assert!(u.iter().all(|v| v.abs() <= 1.5));
            assert!(lp.is_finite());
        }
        // Saturated tanh must not produce an infinite correction term.
        let (_, lp) = policy.sample_with_noise(&x0(), &[40.0, 0.0]).unwrap();
        assert!(lp.is_finite());
    }

    #[test]
    fn log_prob_decreases_with_noise_magnitude() {
        // Holds for μ = 0 and σ below 1/√2, where the tanh correction cannot
        // outgrow the Gaussian term.
        let policy = constant_policy(&[0.0, 0.0], &[-0.5, -1.0], 2.0);
        let mut prev = f64::INFINITY;
        for k in 0..60 {
            let e = 0.1 * k as f64;
            let (_, lp) = policy.sample_with_noise(&x0(), &[e, -e]).unwrap();
            assert!(lp.is_finite());
            assert!(lp < prev || k == 0, "eps {e}: {lp} !< {prev}");
            prev = lp;
        }
    }

    #[test]
    fn log_prob_matches_change_of_variables() {
        let (mu, ls, s, eps) = (0.3f64, -0.7f64, 2.0f64, 0.8f64);
        let policy = constant_policy(&[mu], &[ls], s);
        let (u, lp) = policy.sample_with_noise(&x0(), &[eps]).unwrap();
        let sigma = ls.exp();
        let z = mu + sigma * eps;
        let gauss = -0.5 * eps * eps - 0.5 * (2.0 * std::f64::consts::PI).ln() - ls;
        let expected = gauss - (s * (1.0 - z.tanh().powi(2))).ln();
        assert!((lp - expected).abs() < 1e-12);
        assert!((u[0] - s * z.tanh()).abs() < 1e-15);
    }

    #[test]
    fn monte_carlo_mean_matches_quadrature() {
        let (mu, ls, s) = (0.7f64, -0.3f64, 2.0f64);
        let policy = constant_policy(&[mu], &[ls], s);
        let sigma = ls.exp();
        // E[s·tanh(μ + σε)] by trapezoid quadrature over ε ∈ [−12, 12].
        let n = 24_001;
        let h = 24.0 / (n - 1) as f64;
        let analytic: f64 = (0..n)
            .map(|k| {
                let e = -12.0 + k as f64 * h;
                let w = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
                w * h * s * (mu + sigma * e).tanh() * (-0.5 * e * e).exp() / (2.0 * std::f64::consts::PI).sqrt()
            })
            .sum();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let samples: Vec<f64> = (0..100_000)
            .map(|_| policy_sample(&policy, &x0(), &mut rng).unwrap().0[0])
            .collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
        let se = (var / samples.len() as f64).sqrt();
        assert!(
            (mean - analytic).abs() <= 3.0 * se,
            "mean {mean}, analytic {analytic}, se {se}"
        );
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let policy = PolicyNet::new(2, 2, 6, 2.0, &mut rng).unwrap();
        let states = array![[0.2, -0.4], [1.1, 0.7], [-0.9, 0.1]];
        let noise = array![[0.3, -1.2], [0.8, 0.05], [-0.6, 1.7]];
        let c = array![[0.5, -1.0], [2.0, 0.3], [-0.7, 0.9]];
        let d = array![0.2, -0.6, 1.1];
        let loss = |p: &PolicyNet| {
            let pb = p.forward_batch(states.view(), noise.view()).unwrap();
            (&pb.actions * &c).sum() + pb.log_prob.dot(&d)
        };
        let pb = policy.forward_batch(states.view(), noise.view()).unwrap();
        let mut grads = policy.net.zeros_like();
        policy.backward_batch(&pb, c.view(), d.view(), &mut grads).unwrap();
        let theta = policy.net.flat_params();
        let analytic = grads.flat_params();
        let mut probe = policy.clone();
        for k in 0..theta.len() {
            let fd = central_difference(
                |t| {
                    let mut p = theta.clone();
                    p[k] = t;
                    probe.net.set_flat_params(&p).unwrap();
                    loss(&probe)
                },
                theta[k],
                GRAD_FD_STEP,
            );
            assert!(
                relative_error(analytic[k], fd) <= GRAD_REL_TOL,
                "param {k}: {} vs {fd}",
                analytic[k]
            );
        }
    }

    #[test]
    fn odd_output_width_is_rejected() {
        let net = Mlp::zeros(&[2, 3]).unwrap();
        assert!(PolicyNet::from_net(net, 1.0).is_err());
    }
}
