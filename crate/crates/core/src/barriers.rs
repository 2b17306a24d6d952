//! Obstacle barrier functions and their Log-Sum-Exp composite.
//!
//! Each barrier `h_i` is nonnegative on its safe set. The composite
//!
//! ```text
//! h(x) = -(1/κ) ln Σ_i exp(-κ h_i(x))
//! ```
//!
//! is a smooth under-approximation of `min_i h_i`, with
//! `min_i h_i - ln(I)/κ ≤ h ≤ min_i h_i`. Its gradient is the
//! softmax-weighted sum of the component gradients with weights
//! `λ_i = exp(-κ (h_i - h))`.

use serde::{Deserialize, Serialize};

use crate::dynamics::{AffineSystem, StateVec};
use crate::error::{check_len, Error, Result};

/// Slack allowed on the sandwich bound before it is reported as a bug.
pub const BOUND_TOLERANCE: f64 = 1e-9;

/// A scalar barrier with an analytic gradient.
pub trait Barrier {
    /// Smallest state dimension the barrier can be evaluated on.
    fn min_state_dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    /// Adds `scale · ∂h/∂x` into `out`.
    fn add_gradient(&self, x: &[f64], scale: f64, out: &mut [f64]);

    fn eval(&self, x: &[f64]) -> Result<BarrierEval> {
        if x.len() < self.min_state_dim() {
            return Err(Error::Shape {
                context: "barrier state",
                expected: self.min_state_dim(),
                actual: x.len(),
            });
        }
        let mut gradient = vec![0.0; x.len()];
        self.add_gradient(x, 1.0, &mut gradient);
        Ok(BarrierEval {
            value: self.value(x),
            gradient,
        })
    }
}

/// Value and gradient of a single barrier at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierEval {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// `h(p) = ‖p − center‖² − radius²` on the first two state coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircularObstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

impl CircularObstacle {
    pub fn new(center: [f64; 2], radius: f64) -> Result<Self> {
        let obstacle = Self { center, radius };
        obstacle.validate()?;
        Ok(obstacle)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Parameter {
                name: "radius",
                reason: format!("safe radius must be positive and finite, got {}", self.radius),
            });
        }
        if !self.center.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite("obstacle center"));
        }
        Ok(())
    }

    /// Euclidean distance from `p` to the center.
    pub fn distance(&self, p: [f64; 2]) -> f64 {
        (p[0] - self.center[0]).hypot(p[1] - self.center[1])
    }
}

impl Barrier for CircularObstacle {
    fn min_state_dim(&self) -> usize {
        2
    }

    #[inline]
    fn value(&self, x: &[f64]) -> f64 {
        let dx = x[0] - self.center[0];
        let dy = x[1] - self.center[1];
        dx * dx + dy * dy - self.radius * self.radius
    }

    #[inline]
    fn add_gradient(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        out[0] += scale * 2.0 * (x[0] - self.center[0]);
        out[1] += scale * 2.0 * (x[1] - self.center[1]);
    }
}

/// Evaluates one obstacle barrier at `x`.
pub fn eval_barrier(b: &CircularObstacle, x: &StateVec) -> Result<BarrierEval> {
    b.eval(x)
}

/// Ordered, nonempty collection of obstacle barriers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<CircularObstacle>", into = "Vec<CircularObstacle>")]
pub struct BarrierSet {
    barriers: Vec<CircularObstacle>,
}

impl BarrierSet {
    pub fn new(barriers: Vec<CircularObstacle>) -> Result<Self> {
        if barriers.is_empty() {
            return Err(Error::Parameter {
                name: "barriers",
                reason: "a barrier set needs at least one barrier".into(),
            });
        }
        for b in &barriers {
            b.validate()?;
        }
        Ok(Self { barriers })
    }

    pub fn len(&self) -> usize {
        self.barriers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.barriers.is_empty()
    }

    pub fn barriers(&self) -> &[CircularObstacle] {
        &self.barriers
    }

    pub fn iter(&self) -> std::slice::Iter<'_, CircularObstacle> {
        self.barriers.iter()
    }

    /// Individual barrier values `h_i(x)`.
    pub fn values(&self, x: &StateVec) -> Result<Vec<f64>> {
        check_state(x)?;
        Ok(self.barriers.iter().map(|b| b.value(x)).collect())
    }

    pub fn min_value(&self, x: &StateVec) -> Result<f64> {
        Ok(self.values(x)?.into_iter().fold(f64::INFINITY, f64::min))
    }
}

impl TryFrom<Vec<CircularObstacle>> for BarrierSet {
    type Error = Error;

    fn try_from(v: Vec<CircularObstacle>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BarrierSet> for Vec<CircularObstacle> {
    fn from(set: BarrierSet) -> Self {
        set.barriers
    }
}

fn check_state(x: &[f64]) -> Result<()> {
    if x.len() < 2 {
        return Err(Error::Shape {
            context: "barrier state (needs planar position)",
            expected: 2,
            actual: x.len(),
        });
    }
    Ok(())
}

fn check_kappa(kappa: f64) -> Result<()> {
    if kappa > 0.0 && kappa.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter {
            name: "kappa",
            reason: format!("smoothing gain must be positive and finite, got {kappa}"),
        })
    }
}

/// Log-Sum-Exp soft minimum of `values` and its softmax weights, written into `weights`.
///
/// Shifted by the minimum so every exponent is `≤ 0`.
pub fn soft_min_into(values: &[f64], kappa: f64, weights: &mut [f64]) -> f64 {
    debug_assert_eq!(values.len(), weights.len());
    let shift = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    for (w, &v) in weights.iter_mut().zip(values) {
        *w = (-kappa * (v - shift)).exp();
        total += *w;
    }
    for w in weights.iter_mut() {
        *w /= total;
    }
    shift - total.ln() / kappa
}

/// Composite barrier value, weights and Lie derivatives at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeEval {
    /// Composite value `h(x)`.
    pub value: f64,
    /// Component values `h_i(x)` in set order.
    pub components: Vec<f64>,
    /// Softmax weights `λ_i(x)`, summing to one.
    pub weights: Vec<f64>,
    /// `∂h/∂x = Σ λ_i ∂h_i/∂x`.
    pub gradient: Vec<f64>,
    /// `L_f h = ∂h/∂x · f(x)`.
    pub lie_f: f64,
    /// `L_g h = ∂h/∂x · g(x)`, length `m`.
    pub lie_g: Vec<f64>,
}

impl CompositeEval {
    pub fn min_component(&self) -> f64 {
        self.components.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Evaluates `h`, `λ`, `∂h/∂x` and the Lie derivatives in one pass.
pub fn composite(set: &BarrierSet, kappa: f64, x: &StateVec, system: &dyn AffineSystem) -> Result<CompositeEval> {
    check_kappa(kappa)?;
    check_state(x)?;
    check_len("composite state", system.state_dim(), x.len())?;

    let components: Vec<f64> = set.barriers.iter().map(|b| b.value(x)).collect();
    let mut weights = vec![0.0; components.len()];
    let value = soft_min_into(&components, kappa, &mut weights);

    let mut gradient = vec![0.0; x.len()];
    for (b, &w) in set.barriers.iter().zip(&weights) {
        b.add_gradient(x, w, &mut gradient);
    }
    let mut lie_g = vec![0.0; system.input_dim()];
    let lie_f = system.lie_derivatives(x, &gradient, &mut lie_g)?;

    Ok(CompositeEval {
        value,
        components,
        weights,
        gradient,
        lie_f,
        lie_g,
    })
}

/// Composite value `h(x) = -(1/κ) ln Σ exp(-κ h_i(x))`.
pub fn composite_value(set: &BarrierSet, kappa: f64, x: &StateVec) -> Result<f64> {
    check_kappa(kappa)?;
    let values = set.values(x)?;
    let mut weights = vec![0.0; values.len()];
    Ok(soft_min_into(&values, kappa, &mut weights))
}

/// Softmax weights `λ_i = exp(-κ (h_i - h))`.
pub fn composite_weights(set: &BarrierSet, kappa: f64, x: &StateVec) -> Result<Vec<f64>> {
    check_kappa(kappa)?;
    let values = set.values(x)?;
    let mut weights = vec![0.0; values.len()];
    soft_min_into(&values, kappa, &mut weights);
    Ok(weights)
}

/// `(L_f h, L_g h)` for the composite barrier.
pub fn composite_lie(set: &BarrierSet, kappa: f64, x: &StateVec, system: &dyn AffineSystem) -> Result<(f64, Vec<f64>)> {
    let eval = composite(set, kappa, x, system)?;
    Ok((eval.lie_f, eval.lie_g))
}

/// Sandwich bound `min h_i − ln(I)/κ ≤ h ≤ min h_i` at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub lower: f64,
    pub value: f64,
    pub upper: f64,
}

/// Computes the sandwich bound and fails if `h` escapes it by more than [`BOUND_TOLERANCE`].
pub fn bound_check(set: &BarrierSet, kappa: f64, x: &StateVec) -> Result<BoundCheck> {
    check_kappa(kappa)?;
    let values = set.values(x)?;
    let mut weights = vec![0.0; values.len()];
    let value = soft_min_into(&values, kappa, &mut weights);
    let upper = values.iter().copied().fold(f64::INFINITY, f64::min);
    let lower = upper - (values.len() as f64).ln() / kappa;
    if value < lower - BOUND_TOLERANCE || value > upper + BOUND_TOLERANCE {
        return Err(Error::Internal(format!(
            "composite value {value} outside [{lower}, {upper}]"
        )));
    }
    Ok(BoundCheck { lower, value, upper })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{FnSystem, SingleIntegrator2D};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state(v: &[f64]) -> StateVec {
        StateVec::new(v.to_vec()).unwrap()
    }

    fn obstacle(cx: f64, cy: f64, r: f64) -> CircularObstacle {
        CircularObstacle::new([cx, cy], r).unwrap()
    }

    fn default_set() -> BarrierSet {
        BarrierSet::new(vec![
            obstacle(1.0, 1.0, 0.4),
            obstacle(2.0, 0.5, 0.3),
            obstacle(1.5, 2.0, 0.5),
        ])
        .unwrap()
    }

    /// Barrier whose value is a constant, for exercising the aggregation alone.
    fn set_with_values(values: &[f64]) -> (BarrierSet, StateVec) {
        // h = d² − r² with d = 2 and r² = 4 − v.
        let x = state(&[0.0, 0.0]);
        let barriers = values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let angle = i as f64;
                obstacle(2.0 * angle.cos(), 2.0 * angle.sin(), (4.0 - v).sqrt())
            })
            .collect();
        (BarrierSet::new(barriers).unwrap(), x)
    }

    #[test]
    fn circle_barrier_examples() {
        let e = eval_barrier(&obstacle(0.0, 0.0, 0.5), &state(&[1.0, 0.0])).unwrap();
        assert_eq!(e.value, 0.75);
        assert_eq!(e.gradient, vec![2.0, 0.0]);
        let e = eval_barrier(&obstacle(0.0, 0.0, 1.0), &state(&[1.0, 0.0])).unwrap();
        assert_eq!(e.value, 0.0);
        let e = eval_barrier(&obstacle(2.0, 2.0, 0.5), &state(&[2.0, 2.0])).unwrap();
        assert_eq!(e.value, -0.25);
    }

    #[test]
    fn circle_barrier_pads_gradient_for_larger_states() {
        let e = eval_barrier(&obstacle(1.0, 0.0, 0.5), &state(&[0.0, 1.0, 7.0])).unwrap();
        assert_eq!(e.gradient, vec![-2.0, 2.0, 0.0]);
    }

    #[test]
    fn circle_barrier_needs_planar_state() {
        assert!(matches!(
            eval_barrier(&obstacle(0.0, 0.0, 0.5), &state(&[1.0])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn invalid_obstacles_are_rejected() {
        assert!(CircularObstacle::new([0.0, 0.0], 0.0).is_err());
        assert!(CircularObstacle::new([0.0, 0.0], -1.0).is_err());
        assert!(CircularObstacle::new([f64::NAN, 0.0], 1.0).is_err());
        assert!(BarrierSet::new(vec![]).is_err());
    }

    #[test]
    fn single_barrier_composite_is_exact() {
        let (set, x) = set_with_values(&[0.37]);
        let h = composite_value(&set, 2.0, &x).unwrap();
        assert_abs_diff_eq!(h, 0.37, epsilon = 1e-15);
        assert_eq!(composite_weights(&set, 2.0, &x).unwrap(), vec![1.0]);
    }

    #[test]
    fn equal_barriers_shift_by_log_count() {
        let (set, x) = set_with_values(&[1.5, 1.5, 1.5]);
        let h = composite_value(&set, 2.0, &x).unwrap();
        assert_abs_diff_eq!(h, 1.5 - 3f64.ln() / 2.0, epsilon = 1e-12);
        for w in composite_weights(&set, 2.0, &x).unwrap() {
            assert_abs_diff_eq!(w, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn frozen_values_for_one_two_three() {
        // 40-digit reference evaluation of the Log-Sum-Exp sum.
        let (set, x) = set_with_values(&[1.0, 2.0, 3.0]);
        let h = composite_value(&set, 2.0, &x).unwrap();
        assert_abs_diff_eq!(h, 0.928_534_185_750_050_2, epsilon = 1e-12);
        let w = composite_weights(&set, 2.0, &x).unwrap();
        let expected = [
            0.866_813_332_197_334_9,
            0.117_310_427_826_198_36,
            0.015_876_239_976_466_766,
        ];
        for (a, b) in w.iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);

        let b = bound_check(&set, 2.0, &x).unwrap();
        assert_abs_diff_eq!(b.lower, 0.450_693_855_665_945_2, epsilon = 1e-12);
        assert_abs_diff_eq!(b.upper, 1.0, epsilon = 1e-12);
        assert!(b.lower <= b.value && b.value <= b.upper);
    }

    #[test]
    fn bound_check_equality_and_degenerate_cases() {
        let (set, x) = set_with_values(&[0.0, 0.0, 0.0]);
        let b = bound_check(&set, 2.0, &x).unwrap();
        assert_abs_diff_eq!(b.lower, -0.549_306_144_334_054_8, epsilon = 1e-12);
        assert_abs_diff_eq!(b.value, b.lower, epsilon = 1e-12);
        assert_abs_diff_eq!(b.upper, 0.0, epsilon = 1e-12);

        let (set, x) = set_with_values(&[-0.8]);
        let b = bound_check(&set, 10.0, &x).unwrap();
        assert_abs_diff_eq!(b.lower, -0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(b.value, -0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(b.upper, -0.8, epsilon = 1e-12);
    }

    #[test]
    fn non_positive_kappa_is_rejected() {
        let set = default_set();
        let x = state(&[0.0, 0.0]);
        for k in [0.0, -1.0, f64::NAN] {
            assert!(matches!(
                composite_value(&set, k, &x),
                Err(Error::Parameter { name: "kappa", .. })
            ));
            assert!(composite_weights(&set, k, &x).is_err());
            assert!(bound_check(&set, k, &x).is_err());
        }
    }

    #[test]
    fn large_exponents_do_not_overflow() {
        // κ h_i spans ±700.
        let set = BarrierSet::new(vec![obstacle(0.0, 0.0, 1.0), obstacle(100.0, 0.0, 1.0)]).unwrap();
        let x = state(&[0.0, 0.0]);
        let h = composite_value(&set, 700.0, &x).unwrap();
        assert_abs_diff_eq!(h, -1.0, epsilon = 1e-12);
        let x = state(&[20.0, 0.0]);
        let values = set.values(&x).unwrap();
        let h = composite_value(&set, 700.0 / values[0], &x).unwrap();
        assert!(h.is_finite());
        let w = composite_weights(&set, 700.0 / values[0], &x).unwrap();
        assert!(w.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn lie_derivatives_single_barrier() {
        let set = BarrierSet::new(vec![obstacle(0.0, 0.0, 0.5)]).unwrap();
        let (lf, lg) = composite_lie(&set, 2.0, &state(&[1.0, 0.0]), &SingleIntegrator2D).unwrap();
        assert_eq!(lf, 0.0);
        assert_eq!(lg, vec![2.0, 0.0]);
    }

    #[test]
    fn lie_f_vanishes_without_drift() {
        let set = default_set();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = state(&[rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)]);
            let (lf, _) = composite_lie(&set, 2.0, &x, &SingleIntegrator2D).unwrap();
            assert_eq!(lf, 0.0);
        }
    }

    /// Directional central difference of the composite value.
    fn fd_directional(set: &BarrierSet, kappa: f64, x: &[f64], dir: &[f64], step: f64) -> f64 {
        let shifted = |s: f64| {
            let p: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + s * d).collect();
            composite_value(set, kappa, &StateVec::new(p).unwrap()).unwrap()
        };
        (shifted(step) - shifted(-step)) / (2.0 * step)
    }

    #[test]
    fn lie_g_matches_finite_differences_with_drift() {
        // Non-trivial f and g so both Lie derivatives are exercised.
        let sys = FnSystem::new(
            2,
            2,
            |x: &[f64]| vec![x[1], -0.5 * x[0]],
            |x: &[f64]| ndarray::arr2(&[[1.0, 0.3 * x[1]], [0.2, 1.5]]),
        )
        .unwrap();
        let set = default_set();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let x = vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let xs = state(&x);
            let (lf, lg) = composite_lie(&set, 2.0, &xs, &sys).unwrap();
            let f = sys.drift(&x);
            let g: Array2<f64> = sys.actuation(&x);
            let fd_f = fd_directional(&set, 2.0, &x, &f, 1e-6);
            assert!((lf - fd_f).abs() <= 1e-6 * fd_f.abs().max(1.0), "{lf} vs {fd_f}");
            for j in 0..2 {
                let col: Vec<f64> = g.column(j).to_vec();
                let fd = fd_directional(&set, 2.0, &x, &col, 1e-6);
                assert!((lg[j] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "{} vs {fd}", lg[j]);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_at_random_states() {
        let set = default_set();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let x = vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let eval = composite(&set, 2.0, &state(&x), &SingleIntegrator2D).unwrap();
            for (k, dir) in [[1.0, 0.0], [0.0, 1.0]].iter().enumerate() {
                let fd = fd_directional(&set, 2.0, &x, dir, 1e-6);
                let rel = (eval.gradient[k] - fd).abs() / fd.abs().max(1.0);
                assert!(rel <= 1e-5, "component {k}: {} vs {fd}", eval.gradient[k]);
            }
        }
    }

    proptest! {
        #[test]
        fn lemma_bounds_hold(px in -5.0f64..5.0, py in -5.0f64..5.0, k in prop::sample::select(vec![0.5, 2.0, 10.0])) {
            let set = default_set();
            let x = state(&[px, py]);
            let b = bound_check(&set, k, &x).unwrap();
            prop_assert!(b.lower - BOUND_TOLERANCE <= b.value && b.value <= b.upper + BOUND_TOLERANCE);
            prop_assert!((b.value - b.upper).abs() <= 3f64.ln() / k + BOUND_TOLERANCE);
            // h ≥ 0 implies every component is nonnegative.
            if b.value >= 0.0 {
                prop_assert!(set.values(&x).unwrap().iter().all(|&h| h >= 0.0));
            }
        }

        #[test]
        fn larger_kappa_sharpens(px in -5.0f64..5.0, py in -5.0f64..5.0) {
            let set = default_set();
            let x = state(&[px, py]);
            let coarse = composite_value(&set, 0.5, &x).unwrap();
            let sharp = composite_value(&set, 10.0, &x).unwrap();
            prop_assert!(sharp >= coarse);
        }

        #[test]
        fn weights_form_a_simplex(values in prop::collection::vec(-50.0f64..50.0, 1..12), k in 0.1f64..20.0) {
            let mut w = vec![0.0; values.len()];
            let h = soft_min_into(&values, k, &mut w);
            prop_assert!(h.is_finite());
            prop_assert!(w.iter().all(|&v| v >= 0.0 && v <= 1.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn gradient_is_weighted_sum(px in -5.0f64..5.0, py in -5.0f64..5.0) {
            let set = default_set();
            let x = state(&[px, py]);
            let eval = composite(&set, 2.0, &x, &SingleIntegrator2D).unwrap();
            let mut expected = [0.0; 2];
            for (b, w) in set.iter().zip(&eval.weights) {
                let e = eval_barrier(b, &x).unwrap();
                expected[0] += w * e.gradient[0];
                expected[1] += w * e.gradient[1];
            }
            prop_assert!((expected[0] - eval.gradient[0]).abs() <= 1e-12 * (1.0 + expected[0].abs()));
            prop_assert!((expected[1] - eval.gradient[1]).abs() <= 1e-12 * (1.0 + expected[1].abs()));
        }
    }
}
