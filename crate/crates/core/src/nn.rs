//! Multilayer perceptrons used by couplings, classifiers and conditional
//! distributions.

use crate::ad::{Parameter, Parameterized, Tensor, Var};
use crate::error::{Error, Result};
use crate::noise::Noise;

/// Fully connected network with ReLU between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    sizes: Vec<usize>,
    weights: Vec<Parameter>,
    biases: Vec<Parameter>,
}

impl Mlp {
    /// `sizes = [input, hidden.., output]`. Weights and biases start
    /// uniform in `±1/sqrt(fan_in)`; `zero_last` zeroes the output layer.
    pub fn new(prefix: &str, sizes: &[usize], zero_last: bool, noise: &mut Noise) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::config(format!("{prefix}: invalid layer sizes {sizes:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let last = sizes.len() - 2;
        for (i, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut init = |n: usize| -> Vec<f64> {
                if zero_last && i == last {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| bound * (2.0 * noise.uniform() - 1.0)).collect()
                }
            };
            let wdata = init(fan_in * fan_out);
            let bdata = init(fan_out);
            weights.push(Parameter::new(
                format!("{prefix}.{i}.weight"),
                Tensor::from_parts(vec![fan_in, fan_out], wdata),
            ));
            biases.push(Parameter::new(
                format!("{prefix}.{i}.bias"),
                Tensor::from_parts(vec![fan_out], bdata),
            ));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty sizes")
    }

    pub fn hidden(&self) -> &[usize] {
        &self.sizes[1..self.sizes.len() - 1]
    }

    pub fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        let mut h = x;
        let n = self.weights.len();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.affine(tape.param(w), tape.param(b))?;
            if i + 1 < n {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Output layer weight and bias, mainly for hand-set test networks.
    pub fn output_layer_mut(&mut self) -> (&mut Parameter, &mut Parameter) {
        let i = self.weights.len() - 1;
        (&mut self.weights[i], &mut self.biases[i])
    }

    pub fn layer_mut(&mut self, i: usize) -> (&mut Parameter, &mut Parameter) {
        (&mut self.weights[i], &mut self.biases[i])
    }
}

impl Parameterized for Mlp {
    fn parameters(&self) -> Vec<&Parameter> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::Tape;

    #[test]
    fn parameter_count_for_coupling_net() {
        let mut noise = Noise::from_seed(0);
        let net = Mlp::new("c", &[1, 200, 100, 2], true, &mut noise).unwrap();
        assert_eq!(net.num_parameters(), 1 * 200 + 200 + 200 * 100 + 100 + 100 * 2 + 2);
    }

    #[test]
    fn zero_last_layer_outputs_zero() {
        let mut noise = Noise::from_seed(1);
        let net = Mlp::new("c", &[3, 8, 2], true, &mut noise).unwrap();
        let tape = Tape::new();
        let x = tape.rows(&[[0.1, -2.0, 3.0]]).unwrap();
        let y = net.forward(x).unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0]);
    }
}
