//! Control-affine dynamics `ẋ = f(x) + g(x) u` and forward-Euler propagation.

use std::ops::Deref;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};

macro_rules! real_vector {
    ($(#[$meta:meta])* $name:ident, $what:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(Vec<f64>);

        impl $name {
            /// Wraps `entries`, rejecting NaN and infinities.
            pub fn new(entries: Vec<f64>) -> Result<Self> {
                check_finite($what, &entries)?;
                Ok(Self(entries))
            }

            pub fn zeros(len: usize) -> Self {
                Self(vec![0.0; len])
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }
        }

        impl Deref for $name {
            type Target = [f64];

            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl TryFrom<Vec<f64>> for $name {
            type Error = Error;

            fn try_from(v: Vec<f64>) -> Result<Self> {
                Self::new(v)
            }
        }

        impl<const N: usize> TryFrom<[f64; N]> for $name {
            type Error = Error;

            fn try_from(v: [f64; N]) -> Result<Self> {
                Self::new(v.to_vec())
            }
        }
    };
}

real_vector!(
    /// System state `x`. For the planar task the first two entries are the position.
    StateVec,
    "state"
);
real_vector!(
    /// Control input `u`.
    ActionVec,
    "action"
);

/// A control-affine system `ẋ = f(x) + g(x) u`.
///
/// Implementations must be deterministic and return finite values of the
/// declared shape for every finite state.
pub trait AffineSystem: Send + Sync {
    /// State dimension `n`.
    fn state_dim(&self) -> usize;

    /// Input dimension `m`.
    fn input_dim(&self) -> usize;

    /// Drift `f(x)`, length `n`.
    fn drift(&self, x: &[f64]) -> Vec<f64>;

    /// Actuation matrix `g(x)`, shape `n × m`.
    fn actuation(&self, x: &[f64]) -> Array2<f64>;

    /// Lie derivatives of a scalar function with gradient `grad` at `x`:
    /// returns `grad · f(x)` and writes `gradᵀ g(x)` into `lie_g` (length `m`).
    fn lie_derivatives(&self, x: &[f64], grad: &[f64], lie_g: &mut [f64]) -> Result<f64> {
        check_len("lie_derivatives gradient", self.state_dim(), grad.len())?;
        check_len("lie_derivatives output", self.input_dim(), lie_g.len())?;
        let f = self.drift(x);
        let g = self.actuation(x);
        check_len("drift output", self.state_dim(), f.len())?;
        check_len("actuation rows", self.state_dim(), g.nrows())?;
        check_len("actuation columns", self.input_dim(), g.ncols())?;
        for (j, out) in lie_g.iter_mut().enumerate() {
            *out = grad.iter().zip(g.column(j)).map(|(a, b)| a * b).sum();
        }
        let lie_f: f64 = grad.iter().zip(&f).map(|(a, b)| a * b).sum();
        if !lie_f.is_finite() || lie_g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Lie derivatives"));
        }
        Ok(lie_f)
    }
}

/// Planar single integrator: `f = 0`, `g = I₂`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SingleIntegrator2D;

impl AffineSystem for SingleIntegrator2D {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn drift(&self, _x: &[f64]) -> Vec<f64> {
        vec![0.0; 2]
    }

    fn actuation(&self, _x: &[f64]) -> Array2<f64> {
        Array2::eye(2)
    }

    fn lie_derivatives(&self, _x: &[f64], grad: &[f64], lie_g: &mut [f64]) -> Result<f64> {
        check_len("lie_derivatives gradient", 2, grad.len())?;
        check_len("lie_derivatives output", 2, lie_g.len())?;
        lie_g.copy_from_slice(grad);
        Ok(0.0)
    }
}

/// A system defined by a pair of closures.
pub struct FnSystem<F, G> {
    n: usize,
    m: usize,
    f: F,
    g: G,
}

impl<F, G> FnSystem<F, G>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
    G: Fn(&[f64]) -> Array2<f64> + Send + Sync,
{
    pub fn new(n: usize, m: usize, f: F, g: G) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::Parameter {
                name: "dimension",
                reason: format!("state and input dimensions must be positive (n={n}, m={m})"),
            });
        }
        Ok(Self { n, m, f, g })
    }
}

impl<F, G> AffineSystem for FnSystem<F, G>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
    G: Fn(&[f64]) -> Array2<f64> + Send + Sync,
{
    fn state_dim(&self) -> usize {
        self.n
    }

    fn input_dim(&self) -> usize {
        self.m
    }

    fn drift(&self, x: &[f64]) -> Vec<f64> {
        (self.f)(x)
    }

    fn actuation(&self, x: &[f64]) -> Array2<f64> {
        (self.g)(x)
    }
}

/// Evaluates `f(x)` with shape and finiteness checks.
pub fn eval_f(system: &dyn AffineSystem, x: &StateVec) -> Result<Vec<f64>> {
    check_len("eval_f state", system.state_dim(), x.len())?;
    let f = system.drift(x);
    check_len("eval_f output", system.state_dim(), f.len())?;
    check_finite("drift f(x)", &f)?;
    Ok(f)
}

/// Evaluates `g(x)` with shape and finiteness checks.
pub fn eval_g(system: &dyn AffineSystem, x: &StateVec) -> Result<Array2<f64>> {
    check_len("eval_g state", system.state_dim(), x.len())?;
    let g = system.actuation(x);
    check_len("eval_g rows", system.state_dim(), g.nrows())?;
    check_len("eval_g columns", system.input_dim(), g.ncols())?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("actuation g(x)"));
    }
    Ok(g)
}

/// One explicit Euler step: `x + dt (f(x) + g(x) u)`.
pub fn step_euler(system: &dyn AffineSystem, x: &StateVec, u: &ActionVec, dt: f64) -> Result<StateVec> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Parameter {
            name: "dt",
            reason: format!("time step must be positive and finite, got {dt}"),
        });
    }
    check_len("step_euler action", system.input_dim(), u.len())?;
    let f = eval_f(system, x)?;
    let g = eval_g(system, x)?;
    let next = x
        .iter()
        .zip(f.iter())
        .zip(g.rows())
        .map(|((&xi, &fi), gi)| {
            let gu: f64 = gi.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
            xi + dt * (fi + gu)
        })
        .collect();
    StateVec::new(next)
}
