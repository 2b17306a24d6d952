//! Fully connected tanh network with an activation tape for exact backprop.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{check_len, Error, Result};

/// One affine map. `weight` is `in × out` so a batch forward is `a · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Tanh on every hidden layer, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Inputs to every layer plus the final output, enough to replay gradients.
#[derive(Debug, Clone)]
pub struct Tape {
    activations: Vec<Array2<f64>>,
}

impl Tape {
    /// Network output, `batch × out`.
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("tape always holds the input")
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.activations[0]
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::Parameter {
            name: "layer_sizes",
            reason: format!("need at least two positive sizes, got {sizes:?}"),
        });
    }
    Ok(())
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Layer {
                    weight: Array2::from_shape_simple_fn((w[0], w[1]), || rng.random_range(-limit..limit)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Ok(Self { layers })
    }

    /// Validates that the layers chain and hold finite values.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Parameter {
                name: "layers",
                reason: "network needs at least one layer".into(),
            });
        }
        for (i, layer) in layers.iter().enumerate() {
            let (rows, cols) = layer.weight.dim();
            if rows == 0 || cols == 0 {
                return Err(Error::Parameter {
                    name: "layers",
                    reason: format!("layer {i} has an empty weight matrix"),
                });
            }
            check_len("layer bias", cols, layer.bias.len())?;
            if i > 0 {
                check_len("layer chaining", layers[i - 1].weight.ncols(), rows)?;
            }
            if !(layer.weight.iter().all(|v| v.is_finite()) && layer.bias.iter().all(|v| v.is_finite())) {
                return Err(Error::NonFinite("network parameters"));
            }
        }
        Ok(Self { layers })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.weight.ncols()))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameter blocks in a fixed order (per layer: weight, then bias).
    pub fn param_slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| {
            [
                l.weight.as_slice().expect("standard layout"),
                l.bias.as_slice().expect("standard layout"),
            ]
        })
    }

    pub fn param_slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers.iter_mut().flat_map(|l| {
            [
                l.weight.as_slice_mut().expect("standard layout"),
                l.bias.as_slice_mut().expect("standard layout"),
            ]
        })
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.param_slices().flatten().copied().collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        check_len("flat parameters", self.num_params(), values.len())?;
        let mut rest = values;
        for block in self.param_slices_mut() {
            let (head, tail) = rest.split_at(block.len());
            block.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    pub fn fill_zero(&mut self) {
        for block in self.param_slices_mut() {
            block.fill(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices().flatten().all(|v| v.is_finite())
    }

    /// Single-input forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let view = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        let tape = self.forward_batch(view)?;
        Ok((tape.output().row(0).to_vec(), tape))
    }

    /// Batched forward pass over the rows of `input`.
    pub fn forward_batch(&self, input: ArrayView2<'_, f64>) -> Result<Tape> {
        check_len("network input", self.input_dim(), input.ncols())?;
        if !input.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("network input"));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_owned());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Array2::from_shape_fn((input.nrows(), layer.bias.len()), |(_, j)| layer.bias[j]);
            general_mat_mul(1.0, &activations[i], &layer.weight, 1.0, &mut z);
            if i < last {
                z.mapv_inplace(f64::tanh);
            }
            activations.push(z);
        }
        Ok(Tape { activations })
    }

    /// Backpropagates `d_output` (`batch × out`) through the tape.
    ///
    /// Parameter gradients are accumulated into `grads` when given. Returns the
    /// gradient with respect to the input rows.
    pub fn backward(
        &self,
        tape: &Tape,
        d_output: ArrayView2<'_, f64>,
        mut grads: Option<&mut Mlp>,
    ) -> Result<Array2<f64>> {
        check_len("tape depth", self.layers.len() + 1, tape.activations.len())?;
        check_len("output gradient rows", tape.output().nrows(), d_output.nrows())?;
        check_len("output gradient columns", self.output_dim(), d_output.ncols())?;
        if let Some(g) = grads.as_deref() {
            check_len("gradient depth", self.layers.len(), g.layers.len())?;
        }
        let mut delta = d_output.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let a_in = &tape.activations[i];
            if let Some(g) = grads.as_deref_mut() {
                let gl = &mut g.layers[i];
                general_mat_mul(1.0, &a_in.t(), &delta, 1.0, &mut gl.weight);
                gl.bias += &delta.sum_axis(Axis(0));
            }
            let mut d_in = delta.dot(&layer.weight.t());
            if i > 0 {
                d_in.zip_mut_with(a_in, |d, &a| *d *= 1.0 - a * a);
            }
            delta = d_in;
        }
        Ok(delta)
    }
}

/// `target ← τ·online + (1 − τ)·target`, elementwise.
pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Parameter {
            name: "tau",
            reason: format!("must lie in [0, 1], got {tau}"),
        });
    }
    if target.layer_sizes() != online.layer_sizes() {
        return Err(Error::Shape {
            context: "soft update parameter count",
            expected: target.num_params(),
            actual: online.num_params(),
        });
    }
    for (t, o) in target.param_slices_mut().zip(online.param_slices()) {
        for (t, &o) in t.iter_mut().zip(o) {
            *t = tau * o + (1.0 - tau) * *t;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{central_difference, relative_error, GRAD_FD_STEP, GRAD_REL_TOL};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_output_final_bias() {
        let mut net = Mlp::zeros(&[3, 5, 2]).unwrap();
        net.layers[1].bias = array![0.25, -1.5];
        let (out, _) = net.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.25, -1.5]);
    }

    #[test]
    fn identity_linear_layer() {
        let net = Mlp::from_layers(vec![Layer {
            weight: Array2::eye(3),
            bias: Array1::zeros(3),
        }])
        .unwrap();
        let (out, _) = net.forward(&[0.5, -7.0, 2.0]).unwrap();
        assert_eq!(out, vec![0.5, -7.0, 2.0]);
    }

    #[test]
    fn shape_errors() {
        let net = Mlp::zeros(&[3, 4, 1]).unwrap();
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::Shape { .. })));
        assert!(Mlp::zeros(&[3]).is_err());
        assert!(Mlp::zeros(&[3, 0, 1]).is_err());
        let bad = vec![
            Layer {
                weight: Array2::zeros((2, 3)),
                bias: Array1::zeros(3),
            },
            Layer {
                weight: Array2::zeros((4, 1)),
                bias: Array1::zeros(1),
            },
        ];
        assert!(Mlp::from_layers(bad).is_err());
    }

    #[test]
    fn batch_rows_match_single_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[2, 8, 8, 3], &mut rng).unwrap();
        let batch = array![[0.1, -0.4], [2.0, 1.0], [-1.5, 0.3]];
        let tape = net.forward_batch(batch.view()).unwrap();
        for (r, row) in batch.rows().into_iter().enumerate() {
            let (single, _) = net.forward(row.as_slice().unwrap()).unwrap();
            for (a, b) in single.iter().zip(tape.output().row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Scalar loss `Σ c ⊙ output` so that `∂L/∂output = c`.
    fn weighted_sum(net: &Mlp, x: &Array2<f64>, c: &Array2<f64>) -> f64 {
        let tape = net.forward_batch(x.view()).unwrap();
        (tape.output() * c).sum()
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..10 {
            let depth = 1 + trial % 3;
            let mut sizes = vec![rng.random_range(1..5)];
            sizes.extend((0..depth).map(|_| rng.random_range(2..7)));
            sizes.push(rng.random_range(1..4));
            let net = Mlp::new(&sizes, &mut rng).unwrap();
            let batch = rng.random_range(1..5);
            let x = Array2::from_shape_simple_fn((batch, sizes[0]), || rng.random_range(-1.5..1.5));
            let c = Array2::from_shape_simple_fn((batch, *sizes.last().unwrap()), || rng.random_range(-1.0..1.0));

            let tape = net.forward_batch(x.view()).unwrap();
            let mut grads = net.zeros_like();
            let d_input = net.backward(&tape, c.view(), Some(&mut grads)).unwrap();

            let theta = net.flat_params();
            let analytic = grads.flat_params();
            let mut probe = net.clone();
            for k in 0..theta.len() {
                let fd = central_difference(
                    |t| {
                        let mut p = theta.clone();
                        p[k] = t;
                        probe.set_flat_params(&p).unwrap();
                        weighted_sum(&probe, &x, &c)
                    },
                    theta[k],
                    GRAD_FD_STEP,
                );
                let err = relative_error(analytic[k], fd);
                assert!(
                    err <= GRAD_REL_TOL,
                    "trial {trial} param {k}: {} vs {fd} ({err})",
                    analytic[k]
                );
            }
            for idx in 0..x.len() {
                let (r, col) = (idx / x.ncols(), idx % x.ncols());
                let fd = central_difference(
                    |t| {
                        let mut xp = x.clone();
                        xp[[r, col]] = t;
                        weighted_sum(&net, &xp, &c)
                    },
                    x[[r, col]],
                    GRAD_FD_STEP,
                );
                assert!(relative_error(d_input[[r, col]], fd) <= GRAD_REL_TOL);
            }
        }
    }

    #[test]
    fn soft_update_examples() {
        let online = {
            let mut n = Mlp::zeros(&[2, 3, 1]).unwrap();
            n.set_flat_params(&vec![2.0; n.num_params()]).unwrap();
            n
        };
        let mut target = Mlp::zeros(&[2, 3, 1]).unwrap();
        soft_update(&mut target, &online, 0.0).unwrap();
        assert!(target.flat_params().iter().all(|&v| v == 0.0));
        soft_update(&mut target, &online, 0.5).unwrap();
        assert!(target.flat_params().iter().all(|&v| v == 1.0));
        soft_update(&mut target, &online, 1.0).unwrap();
        assert_eq!(target, online);
        let mut other = Mlp::zeros(&[2, 4, 1]).unwrap();
        assert!(soft_update(&mut other, &online, 0.5).is_err());
        assert!(soft_update(&mut target, &online, 1.5).is_err());
    }

    #[test]
    fn flat_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&[2, 4, 3], &mut rng).unwrap();
        let mut copy = net.zeros_like();
        copy.set_flat_params(&net.flat_params()).unwrap();
        assert_eq!(copy, net);
        assert_eq!(net.num_params(), 2 * 4 + 4 + 4 * 3 + 3);
        assert_eq!(net.layer_sizes(), vec![2, 4, 3]);
    }
}
