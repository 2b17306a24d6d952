use crate::error::{check_len, Result};
use crate::learner::mlp::Mlp;

/// Adam with bias correction, one instance per network.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    steps: i32,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 0,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// Descends along `grads`.
    pub fn step(&mut self, params: &mut Mlp, grads: &Mlp) -> Result<()> {
        check_len("optimizer state", self.first.len(), params.num_params())?;
        check_len("optimizer gradient", self.first.len(), grads.num_params())?;
        self.steps = self.steps.saturating_add(1);
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        let mut k = 0;
        for (p, g) in params.param_slices_mut().zip(grads.param_slices()) {
            for (p, &g) in p.iter_mut().zip(g) {
                let m = &mut self.first[k];
                let v = &mut self.second[k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
                k += 1;
            }
        }
        Ok(())
    }
}
