use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::Result;
use crate::learner::mlp::{soft_update, Mlp, Tape};

/// Twin Q-functions `Q(x, u)` with target copies.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticNet {
    pub q1: Mlp,
    pub q2: Mlp,
    pub target1: Mlp,
    pub target2: Mlp,
}

/// Stacks `[x, u]` row-wise as the critic input.
pub(crate) fn critic_input(states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    concatenate(Axis(1), &[states, actions]).map_err(|e| crate::Error::Internal(format!("critic input: {e}")))
}

impl CriticNet {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let sizes = [state_dim + action_dim, hidden, hidden, 1];
        let q1 = Mlp::new(&sizes, rng)?;
        let q2 = Mlp::new(&sizes, rng)?;
        Ok(Self {
            target1: q1.clone(),
            target2: q2.clone(),
            q1,
            q2,
        })
    }

    /// Validates that targets mirror the online shapes.
    pub fn from_parts(q1: Mlp, q2: Mlp, target1: Mlp, target2: Mlp) -> Result<Self> {
        let sizes = q1.layer_sizes();
        for (name, net) in [("q2", &q2), ("target1", &target1), ("target2", &target2)] {
            if net.layer_sizes() != sizes {
                return Err(crate::Error::Parameter {
                    name: "critic",
                    reason: format!("{name} has layer sizes {:?}, expected {sizes:?}", net.layer_sizes()),
                });
            }
        }
        if sizes.last() != Some(&1) {
            return Err(crate::Error::Parameter {
                name: "critic",
                reason: format!("Q-network must output a scalar, got sizes {sizes:?}"),
            });
        }
        Ok(Self {
            q1,
            q2,
            target1,
            target2,
        })
    }

    /// Online forward passes of both critics.
    pub fn online(&self, input: ArrayView2<'_, f64>) -> Result<(Tape, Tape)> {
        Ok((self.q1.forward_batch(input)?, self.q2.forward_batch(input)?))
    }

    /// Elementwise `min(Q̂₁, Q̂₂)`.
    pub fn target_min(&self, input: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let t1 = self.target1.forward_batch(input)?;
        let t2 = self.target2.forward_batch(input)?;
        Ok(t1
            .output()
            .column(0)
            .iter()
            .zip(t2.output().column(0))
            .map(|(a, b)| a.min(*b))
            .collect())
    }

    pub fn soft_update_targets(&mut self, tau: f64) -> Result<()> {
        soft_update(&mut self.target1, &self.q1, tau)?;
        soft_update(&mut self.target2, &self.q2, tau)
    }
}
