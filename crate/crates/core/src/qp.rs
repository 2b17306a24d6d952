//! Dense multi-constraint CBF quadratic program and a dual coordinate ascent solver.
//!
//! Solves `min ½‖u − ū‖²  s.t.  A u ≥ b`. The Hessian is the identity, so the
//! primal is recovered from the duals as `u = ū + Aᵀλ` and each coordinate of
//! the concave dual `d(λ) = −½‖Aᵀλ‖² − λᵀ(Aū − b)` can be maximized exactly:
//!
//! ```text
//! λ_i ← max(0, λ_i − (a_i·u − b_i) / ‖a_i‖²)
//! ```
//!
//! Rows are swept cyclically in a fixed order.

use ndarray::{Array1, Array2};

use crate::barriers::{Barrier, BarrierSet};
use crate::dynamics::{ActionVec, AffineSystem, StateVec};
use crate::error::{check_len, Error, Result};
use crate::filter::ClassKLinear;

/// `min ½‖u − ū‖²  s.t.  A u ≥ b`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolytopeQp {
    /// `I × m`; row `i` is `L_g h_i(x)`.
    pub a_matrix: Array2<f64>,
    /// `b_i = −L_f h_i(x) − α(h_i(x))`.
    pub b_vector: Array1<f64>,
    /// Nominal action `ū`.
    pub nominal: Array1<f64>,
}

impl PolytopeQp {
    pub fn new(a_matrix: Array2<f64>, b_vector: Array1<f64>, nominal: Array1<f64>) -> Result<Self> {
        check_len("qp rows", a_matrix.nrows(), b_vector.len())?;
        check_len("qp columns", a_matrix.ncols(), nominal.len())?;
        if a_matrix.iter().chain(&b_vector).chain(&nominal).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("quadratic program data"));
        }
        let a_matrix = if a_matrix.is_standard_layout() {
            a_matrix
        } else {
            a_matrix.as_standard_layout().into_owned()
        };
        Ok(Self {
            a_matrix,
            b_vector,
            nominal,
        })
    }

    /// The one-row program `L_f h + L_g h · u ≥ −α(h)`.
    pub fn single_constraint(
        lie_f: f64,
        lie_g: &[f64],
        h: f64,
        alpha: ClassKLinear,
        nominal: &ActionVec,
    ) -> Result<Self> {
        let a = Array2::from_shape_vec((1, lie_g.len()), lie_g.to_vec()).map_err(|_| Error::Shape {
            context: "single constraint",
            expected: lie_g.len(),
            actual: 0,
        })?;
        Self::new(
            a,
            Array1::from(vec![-lie_f - alpha.apply(h)]),
            Array1::from(nominal.as_slice().to_vec()),
        )
    }

    pub fn num_constraints(&self) -> usize {
        self.a_matrix.nrows()
    }

    pub fn num_vars(&self) -> usize {
        self.a_matrix.ncols()
    }

    fn row(&self, i: usize) -> &[f64] {
        let m = self.num_vars();
        &self.a_matrix.as_slice().expect("standard layout")[i * m..(i + 1) * m]
    }

    /// Dual objective `d(λ) = −½‖Aᵀλ‖² − λᵀ(Aū − b)`.
    pub fn dual_objective(&self, duals: &[f64]) -> f64 {
        let m = self.num_vars();
        let mut at_lambda = vec![0.0; m];
        let mut linear = 0.0;
        for (i, &l) in duals.iter().enumerate() {
            let row = self.row(i);
            for (acc, a) in at_lambda.iter_mut().zip(row) {
                *acc += a * l;
            }
            linear += l * (dot(row, self.nominal.as_slice().unwrap()) - self.b_vector[i]);
        }
        -0.5 * dot(&at_lambda, &at_lambda) - linear
    }
}

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Target KKT residual.
    pub tolerance: f64,
    /// Maximum number of full sweeps.
    pub max_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 10_000,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::Parameter {
                name: "tolerance",
                reason: format!("must be positive, got {}", self.tolerance),
            });
        }
        if self.max_iterations == 0 {
            return Err(Error::Parameter {
                name: "max_iterations",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub solution: Vec<f64>,
    pub duals: Vec<f64>,
    pub kkt_residual: f64,
    /// Completed sweeps.
    pub iterations: usize,
    pub converged: bool,
}

/// Builds the `I`-row CBF program at `x`: `L_f h_i + L_g h_i · u ≥ −α(h_i)`.
pub fn build_cbf_qp(
    set: &BarrierSet,
    x: &StateVec,
    system: &dyn AffineSystem,
    alpha: ClassKLinear,
    nominal: &ActionVec,
) -> Result<PolytopeQp> {
    check_len("qp nominal", system.input_dim(), nominal.len())?;
    check_len("qp state", system.state_dim(), x.len())?;
    if x.len() < 2 {
        return Err(Error::Shape {
            context: "qp state (needs planar position)",
            expected: 2,
            actual: x.len(),
        });
    }
    let m = system.input_dim();
    let rows = set.len();
    let mut a = Array2::zeros((rows, m));
    let mut b = Array1::zeros(rows);
    let mut grad = vec![0.0; x.len()];
    for ((barrier, mut row), b_i) in set.iter().zip(a.rows_mut()).zip(b.iter_mut()) {
        grad.iter_mut().for_each(|v| *v = 0.0);
        barrier.add_gradient(x, 1.0, &mut grad);
        let lie_f = system.lie_derivatives(x, &grad, row.as_slice_mut().expect("contiguous row"))?;
        *b_i = -lie_f - alpha.apply(barrier.value(x));
    }
    PolytopeQp::new(a, b, Array1::from(nominal.as_slice().to_vec()))
}

/// Iterate state of the dual coordinate ascent; exposed so callers can observe sweeps.
pub struct DualAscent<'a> {
    qp: &'a PolytopeQp,
    duals: Vec<f64>,
    primal: Vec<f64>,
    row_norms_sq: Vec<f64>,
    sweeps: usize,
}

impl<'a> DualAscent<'a> {
    pub fn new(qp: &'a PolytopeQp) -> Self {
        let row_norms_sq = (0..qp.num_constraints())
            .map(|i| {
                let r = qp.row(i);
                dot(r, r)
            })
            .collect();
        Self {
            qp,
            duals: vec![0.0; qp.num_constraints()],
            primal: qp.nominal.to_vec(),
            row_norms_sq,
            sweeps: 0,
        }
    }

    /// One cyclic pass of exact coordinate maximizations.
    pub fn sweep(&mut self) {
        for i in 0..self.duals.len() {
            let norm_sq = self.row_norms_sq[i];
            if norm_sq == 0.0 {
                continue;
            }
            let row = self.qp.row(i);
            let residual = dot(row, &self.primal) - self.qp.b_vector[i];
            let updated = (self.duals[i] - residual / norm_sq).max(0.0);
            let delta = updated - self.duals[i];
            if delta != 0.0 {
                for (u, a) in self.primal.iter_mut().zip(row) {
                    *u += delta * a;
                }
                self.duals[i] = updated;
            }
        }
        self.sweeps += 1;
    }

    pub fn duals(&self) -> &[f64] {
        &self.duals
    }

    pub fn primal(&self) -> &[f64] {
        &self.primal
    }

    pub fn sweeps(&self) -> usize {
        self.sweeps
    }

    pub fn dual_objective(&self) -> f64 {
        self.qp.dual_objective(&self.duals)
    }

    pub fn kkt_residual(&self) -> f64 {
        kkt_residual(self.qp, &self.primal, &self.duals)
    }

    fn into_solution(self, converged: bool) -> QpSolution {
        let kkt_residual = self.kkt_residual();
        QpSolution {
            solution: self.primal,
            duals: self.duals,
            kkt_residual,
            iterations: self.sweeps,
            converged,
        }
    }
}

/// Runs sweeps until the KKT residual drops to `cfg.tolerance` or the sweep cap is hit.
///
/// Hitting the cap is not an error: the last iterate is returned with `converged = false`.
pub fn solve_dual_ascent(qp: &PolytopeQp, cfg: SolverConfig) -> QpSolution {
    let mut state = DualAscent::new(qp);
    for _ in 0..cfg.max_iterations {
        state.sweep();
        if state.kkt_residual() <= cfg.tolerance {
            return state.into_solution(true);
        }
    }
    state.into_solution(false)
}

/// Largest violation among stationarity (∞-norm), primal feasibility,
/// dual feasibility and complementarity.
pub fn kkt_residual(qp: &PolytopeQp, candidate_u: &[f64], candidate_duals: &[f64]) -> f64 {
    let m = qp.num_vars();
    let mut stationarity = vec![0.0; m];
    for ((s, u), ubar) in stationarity.iter_mut().zip(candidate_u).zip(&qp.nominal) {
        *s = u - ubar;
    }
    let mut worst: f64 = 0.0;
    for (i, &l) in candidate_duals.iter().enumerate() {
        let row = qp.row(i);
        for (s, a) in stationarity.iter_mut().zip(row) {
            *s -= a * l;
        }
        let slack = dot(row, candidate_u) - qp.b_vector[i];
        worst = worst.max(-slack).max(-l).max((l * slack).abs());
    }
    stationarity.iter().fold(worst, |acc, s| acc.max(s.abs()))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barriers::CircularObstacle;
    use crate::dynamics::SingleIntegrator2D;
    use crate::filter::safe_action;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn alpha5() -> ClassKLinear {
        ClassKLinear::new(5.0).unwrap()
    }

    fn action(v: &[f64]) -> ActionVec {
        ActionVec::new(v.to_vec()).unwrap()
    }

    fn single_obstacle() -> BarrierSet {
        BarrierSet::new(vec![CircularObstacle::new([0.0, 0.0], 0.5).unwrap()]).unwrap()
    }

    #[test]
    fn builds_single_obstacle_row() {
        let x = StateVec::new(vec![1.0, 0.0]).unwrap();
        let qp = build_cbf_qp(
            &single_obstacle(),
            &x,
            &SingleIntegrator2D,
            alpha5(),
            &action(&[-3.0, 0.0]),
        )
        .unwrap();
        assert_eq!(qp.a_matrix, arr2(&[[2.0, 0.0]]));
        assert_eq!(qp.b_vector, arr1(&[-3.75]));
    }

    #[test]
    fn slack_instance_returns_nominal_after_one_sweep() {
        let set = BarrierSet::new(vec![
            CircularObstacle::new([1.0, 1.0], 0.4).unwrap(),
            CircularObstacle::new([2.0, 0.5], 0.3).unwrap(),
            CircularObstacle::new([1.5, 2.0], 0.5).unwrap(),
        ])
        .unwrap();
        let x = StateVec::new(vec![0.0, 0.0]).unwrap();
        let nominal = action(&[-1.0, -0.5]);
        let qp = build_cbf_qp(&set, &x, &SingleIntegrator2D, alpha5(), &nominal).unwrap();
        let sol = solve_dual_ascent(&qp, SolverConfig::default());
        assert!(sol.converged);
        assert_eq!(sol.iterations, 1);
        assert_eq!(sol.solution, nominal.as_slice());
        assert_eq!(sol.duals, vec![0.0; 3]);
        assert_eq!(kkt_residual(&qp, nominal.as_slice(), &[0.0; 3]), 0.0);
    }

    #[test]
    fn single_violated_row_matches_closed_form() {
        let x = StateVec::new(vec![1.0, 0.0]).unwrap();
        let nominal = action(&[-3.0, 0.0]);
        let qp = build_cbf_qp(&single_obstacle(), &x, &SingleIntegrator2D, alpha5(), &nominal).unwrap();
        let sol = solve_dual_ascent(&qp, SolverConfig::default());
        assert!(sol.converged);
        assert_abs_diff_eq!(sol.solution[0], -1.875, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.solution[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.duals[0], 0.5625, epsilon = 1e-12);
        // Hand solution is an exact KKT point.
        assert!(kkt_residual(&qp, &[-1.875, 0.0], &[0.5625]) <= 1e-12);
    }

    #[test]
    fn duplicate_rows_give_the_same_primal() {
        let x = StateVec::new(vec![1.0, 0.0]).unwrap();
        let nominal = action(&[-3.0, 0.7]);
        let one = build_cbf_qp(&single_obstacle(), &x, &SingleIntegrator2D, alpha5(), &nominal).unwrap();
        let twice = BarrierSet::new(vec![single_obstacle().barriers()[0]; 2]).unwrap();
        let two = build_cbf_qp(&twice, &x, &SingleIntegrator2D, alpha5(), &nominal).unwrap();
        let a = solve_dual_ascent(&one, SolverConfig::default());
        let b = solve_dual_ascent(&two, SolverConfig::default());
        assert!(a.converged && b.converged);
        for (p, q) in a.solution.iter().zip(&b.solution) {
            assert_abs_diff_eq!(p, q, epsilon = 1e-8);
        }
        assert_abs_diff_eq!(b.duals.iter().sum::<f64>(), a.duals[0], epsilon = 1e-8);
    }

    #[test]
    fn residual_responds_to_perturbation() {
        let qp = PolytopeQp::new(arr2(&[[1.0, 2.0], [-1.0, 1.0]]), arr1(&[3.0, 1.0]), arr1(&[0.0, 0.0])).unwrap();
        let sol = solve_dual_ascent(&qp, SolverConfig::default());
        assert!(sol.converged && sol.kkt_residual <= 1e-8);
        let mut bumped = sol.solution.clone();
        bumped[0] += 1e-3;
        assert!(kkt_residual(&qp, &bumped, &sol.duals) >= 1e-4);
    }

    #[test]
    fn two_active_rows_converge() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut seen = 0;
        while seen < 50 {
            let a = Array2::from_shape_fn((2, 2), |_| rng.random_range(-2.0..2.0));
            let nominal = arr1(&[rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]);
            let b = a.dot(&nominal) + arr1(&[rng.random_range(0.1..2.0), rng.random_range(0.1..2.0)]);
            let qp = PolytopeQp::new(a, b, nominal).unwrap();
            let sol = solve_dual_ascent(&qp, SolverConfig::default());
            if sol.duals.iter().all(|&l| l > 1e-6) {
                assert!(sol.converged);
                assert!(sol.kkt_residual <= 1e-8);
                seen += 1;
            }
        }
    }

    #[test]
    fn infeasible_program_reports_non_convergence() {
        let qp = PolytopeQp::new(arr2(&[[1.0, 0.0], [-1.0, 0.0]]), arr1(&[1.0, 1.0]), arr1(&[0.0, 0.0])).unwrap();
        let sol = solve_dual_ascent(
            &qp,
            SolverConfig {
                tolerance: 1e-8,
                max_iterations: 200,
            },
        );
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 200);
    }

    #[test]
    fn zero_row_is_skipped() {
        let qp = PolytopeQp::new(arr2(&[[0.0, 0.0], [1.0, 0.0]]), arr1(&[-1.0, 1.0]), arr1(&[0.0, 0.0])).unwrap();
        let sol = solve_dual_ascent(&qp, SolverConfig::default());
        assert!(sol.converged);
        assert_abs_diff_eq!(sol.solution[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn shape_and_config_validation() {
        assert!(PolytopeQp::new(Array2::zeros((2, 2)), arr1(&[0.0]), arr1(&[0.0, 0.0])).is_err());
        assert!(PolytopeQp::new(Array2::zeros((1, 2)), arr1(&[0.0]), arr1(&[0.0])).is_err());
        assert!(PolytopeQp::new(Array2::zeros((1, 2)), arr1(&[f64::NAN]), arr1(&[0.0, 0.0])).is_err());
        assert!(SolverConfig {
            tolerance: 0.0,
            max_iterations: 1
        }
        .validate()
        .is_err());
        assert!(SolverConfig {
            tolerance: 1e-8,
            max_iterations: 0
        }
        .validate()
        .is_err());
    }

    proptest! {
        #[test]
        fn dual_objective_never_decreases(
            entries in prop::collection::vec(-2.0f64..2.0, 10),
            offsets in prop::collection::vec(-1.0f64..2.0, 5),
            nominal in prop::array::uniform2(-3.0f64..3.0),
        ) {
            let a = Array2::from_shape_vec((5, 2), entries).unwrap();
            let nominal = arr1(&nominal);
            let b = a.dot(&nominal) + arr1(&offsets);
            let qp = PolytopeQp::new(a, b, nominal).unwrap();
            let mut state = DualAscent::new(&qp);
            let mut last = state.dual_objective();
            for _ in 0..50 {
                state.sweep();
                let now = state.dual_objective();
                prop_assert!(now >= last - 1e-12 * (1.0 + last.abs()));
                prop_assert!(state.duals().iter().all(|&l| l >= 0.0));
                last = now;
            }
        }

        #[test]
        fn single_row_agrees_with_closed_form(
            lf in -5.0f64..5.0,
            g in prop::array::uniform2(-4.0f64..4.0),
            h in -1.0f64..3.0,
            u in prop::array::uniform2(-3.0f64..3.0),
        ) {
            prop_assume!(g[0].abs() + g[1].abs() > 1e-2);
            let nominal = action(&u);
            let qp = PolytopeQp::single_constraint(lf, &g, h, alpha5(), &nominal).unwrap();
            let sol = solve_dual_ascent(&qp, SolverConfig::default());
            let closed = safe_action(lf, &g, h, &nominal, alpha5()).unwrap();
            prop_assert!(sol.converged);
            for k in 0..2 {
                prop_assert!((sol.solution[k] - closed.safe_action[k]).abs() <= 1e-6);
            }
        }
    }
}
