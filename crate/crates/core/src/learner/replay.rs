use ndarray::{Array1, Array2};
use rand::Rng;

use crate::env::Transition;
use crate::error::{Error, Result};

/// Fixed-capacity ring of transitions with uniform sampling (with replacement).
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

/// Column-stacked minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    /// 1.0 for terminal transitions, else 0.0.
    pub dones: Array1<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn from_transitions(items: &[&Transition]) -> Result<Self> {
        let first = items.first().ok_or(Error::NotReady {
            available: 0,
            required: 1,
        })?;
        let (n, m) = (first.state.len(), first.action.len());
        let mut batch = Batch {
            states: Array2::zeros((items.len(), n)),
            actions: Array2::zeros((items.len(), m)),
            rewards: Array1::zeros(items.len()),
            next_states: Array2::zeros((items.len(), n)),
            dones: Array1::zeros(items.len()),
        };
        for (r, t) in items.iter().enumerate() {
            if t.state.len() != n || t.next_state.len() != n || t.action.len() != m {
                return Err(Error::Shape {
                    context: "replay transition",
                    expected: n + m,
                    actual: t.state.len() + t.action.len(),
                });
            }
            batch.states.row_mut(r).assign(&ndarray::aview1(t.state.as_slice()));
            batch.actions.row_mut(r).assign(&ndarray::aview1(t.action.as_slice()));
            batch
                .next_states
                .row_mut(r)
                .assign(&ndarray::aview1(t.next_state.as_slice()));
            batch.rewards[r] = t.reward;
            batch.dones[r] = if t.done { 1.0 } else { 0.0 };
        }
        Ok(batch)
    }
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Parameter {
                name: "capacity",
                reason: "replay buffer needs room for at least one transition".into(),
            });
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Inserts, overwriting the oldest record once full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Batch> {
        if batch_size == 0 || self.items.len() < batch_size {
            return Err(Error::NotReady {
                available: self.items.len(),
                required: batch_size.max(1),
            });
        }
        let picks: Vec<&Transition> = (0..batch_size)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect();
        Batch::from_transitions(&picks)
    }
}
