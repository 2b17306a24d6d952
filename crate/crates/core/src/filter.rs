//! Closed-form safety layer for a single composite CBF constraint.
//!
//! The filter solves
//!
//! ```text
//! min_u ½‖u − ū‖²   s.t.   L_f h + L_g h · u ≥ −α(h)
//! ```
//!
//! analytically: `u_s = ū + max(0, η) L_g hᵀ` with
//! `η = −(L_f h + L_g h · ū + α(h)) / ‖L_g h‖²` (and `η = 0` when `L_g h = 0`).
//! Away from `η = 0` the map `ū ↦ u_s` is affine, so its Jacobian is either
//! the identity or the projector onto the orthogonal complement of `L_g h`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::barriers::{composite, BarrierSet, CompositeEval};
use crate::dynamics::{ActionVec, AffineSystem, StateVec};
use crate::error::{check_len, Error, Result};

/// Components of `L_g h` at or below this magnitude are treated as zero.
pub const ZERO_LIE_G: f64 = 1e-12;

/// Linear extended class-K function `α(h) = gain · h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassKLinear {
    gain: f64,
}

impl ClassKLinear {
    pub fn new(gain: f64) -> Result<Self> {
        if gain > 0.0 && gain.is_finite() {
            Ok(Self { gain })
        } else {
            Err(Error::Parameter {
                name: "alpha_gain",
                reason: format!("class-K gain must be positive and finite, got {gain}"),
            })
        }
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    #[inline]
    pub fn apply(&self, h: f64) -> f64 {
        self.gain * h
    }
}

impl Default for ClassKLinear {
    fn default() -> Self {
        Self { gain: 5.0 }
    }
}

/// Output of the closed-form filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub safe_action: ActionVec,
    pub eta: f64,
    /// `η > 0` (and `L_g h ≠ 0`): the nominal action was corrected.
    pub active: bool,
    /// `L_f h + L_g h · u_s + α(h)`; nonnegative when the constraint holds.
    pub constraint_slack: f64,
}

/// `∂u_s/∂ū`, an `m × m` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterJacobian {
    pub matrix: Array2<f64>,
}

impl FilterJacobian {
    /// `Jᵀ v`; `J` is symmetric so this is also `J v`.
    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        self.matrix.t().dot(&ndarray::ArrayView1::from(v)).to_vec()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn lie_g_is_zero(lie_g: &[f64]) -> bool {
    lie_g.iter().all(|v| v.abs() <= ZERO_LIE_G)
}

/// Multiplier `η` of the closed-form solution.
pub fn eta(lie_f: f64, lie_g: &[f64], h: f64, nominal: &[f64], alpha: ClassKLinear) -> f64 {
    if lie_g_is_zero(lie_g) {
        return 0.0;
    }
    let norm_sq = dot(lie_g, lie_g);
    -(lie_f + dot(lie_g, nominal) + alpha.apply(h)) / norm_sq
}

/// Minimal correction of `nominal` satisfying the composite constraint.
pub fn safe_action(
    lie_f: f64,
    lie_g: &[f64],
    h: f64,
    nominal: &ActionVec,
    alpha: ClassKLinear,
) -> Result<FilterResult> {
    check_len("safe_action nominal", lie_g.len(), nominal.len())?;
    let eta = eta(lie_f, lie_g, h, nominal, alpha);
    let active = eta > 0.0;
    let safe: Vec<f64> = if active {
        nominal.iter().zip(lie_g).map(|(u, g)| u + eta * g).collect()
    } else {
        nominal.as_slice().to_vec()
    };
    let constraint_slack = lie_f + dot(lie_g, &safe) + alpha.apply(h);
    Ok(FilterResult {
        safe_action: ActionVec::new(safe)?,
        eta,
        active,
        constraint_slack,
    })
}

/// Jacobian of the safe action with respect to the nominal action.
///
/// At the kink `η = 0` the inactive branch (identity) is returned.
pub fn jacobian_wrt_nominal(lie_g: &[f64], eta_value: f64) -> FilterJacobian {
    let m = lie_g.len();
    let mut matrix = Array2::eye(m);
    if eta_value > 0.0 && !lie_g_is_zero(lie_g) {
        let norm_sq = dot(lie_g, lie_g);
        for i in 0..m {
            for j in 0..m {
                matrix[[i, j]] -= lie_g[i] * lie_g[j] / norm_sq;
            }
        }
    }
    FilterJacobian { matrix }
}

/// Everything the filter produces at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub result: FilterResult,
    pub jacobian: FilterJacobian,
    pub composite: CompositeEval,
}

/// Composite CBF evaluation followed by the closed-form correction.
pub fn filter_pipeline(
    set: &BarrierSet,
    kappa: f64,
    system: &dyn AffineSystem,
    alpha: ClassKLinear,
    x: &StateVec,
    nominal: &ActionVec,
) -> Result<FilterOutput> {
    check_len("filter state", system.state_dim(), x.len())?;
    check_len("filter nominal", system.input_dim(), nominal.len())?;
    let composite = composite(set, kappa, x, system)?;
    let result = safe_action(composite.lie_f, &composite.lie_g, composite.value, nominal, alpha)?;
    let jacobian = jacobian_wrt_nominal(&composite.lie_g, result.eta);
    Ok(FilterOutput {
        result,
        jacobian,
        composite,
    })
}

/// A configured safety layer: barrier set, smoothing gain, class-K function and plant.
pub struct SafetyFilter<S> {
    pub barriers: BarrierSet,
    pub kappa: f64,
    pub alpha: ClassKLinear,
    pub system: S,
}

impl<S: AffineSystem> SafetyFilter<S> {
    pub fn new(barriers: BarrierSet, kappa: f64, alpha: ClassKLinear, system: S) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::Parameter {
                name: "kappa",
                reason: format!("smoothing gain must be positive and finite, got {kappa}"),
            });
        }
        Ok(Self {
            barriers,
            kappa,
            alpha,
            system,
        })
    }

    pub fn apply(&self, x: &StateVec, nominal: &ActionVec) -> Result<FilterOutput> {
        filter_pipeline(&self.barriers, self.kappa, &self.system, self.alpha, x, nominal)
    }

    pub fn composite(&self, x: &StateVec) -> Result<CompositeEval> {
        composite(&self.barriers, self.kappa, x, &self.system)
    }
}
