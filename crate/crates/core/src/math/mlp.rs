use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::linalg::{softplus, Matrix, Vector};
use super::tape::{Tape, Var};
use crate::error::{check_len, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
    Softplus,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
            Activation::Softplus => softplus(x),
        }
    }

    fn apply_tape(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
            Activation::Softplus => tape.softplus(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vector,
    pub activation: Activation,
}

/// Fully connected network. Parameters flatten layer by layer as
/// `[W_0 (row-major), b_0, W_1, b_1, ...]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    seed: u64,
}

impl Mlp {
    /// `sizes = [in, h_1, ..., out]`, one activation per layer. Weights are
    /// drawn uniformly from `±1/√fan_in` with a per-layer seed; biases start at 0.
    pub fn new(sizes: &[usize], activations: &[Activation], seed: u64) -> Self {
        assert_eq!(
            sizes.len(),
            activations.len() + 1,
            "one activation per layer"
        );
        let layers = sizes
            .windows(2)
            .zip(activations)
            .enumerate()
            .map(|(i, (w, &activation))| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let weight =
                    Matrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..=bound));
                Layer {
                    weight,
                    bias: Vector::zeros(fan_out),
                    activation,
                }
            })
            .collect();
        Self { layers, seed }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Self {
        Self { layers, seed: 0 }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.cols())
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.rows())
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vector> {
        check_len("mlp_forward", self.input_width(), x.len())?;
        let mut h: Vector = x.to_vec().into();
        for layer in &self.layers {
            let z = layer.weight.matvec(&h)?;
            h = z
                .iter()
                .zip(layer.bias.iter())
                .map(|(z, b)| layer.activation.apply(z + b))
                .collect();
        }
        Ok(h)
    }

    /// Records the forward pass on `tape`; parameters are registered starting
    /// at `offset` in the owning flat vector.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var, offset: usize) -> Result<Var> {
        check_len("mlp_forward", self.input_width(), tape.len_of(x))?;
        let mut h = x;
        let mut off = offset;
        for layer in &self.layers {
            let (rows, cols) = (layer.weight.rows(), layer.weight.cols());
            let w = tape.param(off, layer.weight.as_slice());
            off += rows * cols;
            let b = tape.param(off, &layer.bias);
            off += rows;
            let z = tape.matvec(w, rows, cols, h)?;
            let zb = tape.add(z, b)?;
            h = layer.activation.apply_tape(tape, zb);
        }
        Ok(h)
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.as_slice());
            out.extend_from_slice(&layer.bias);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.flatten_into(&mut out);
        out
    }

    /// Overwrites every parameter from `flat`, which must hold exactly
    /// [`Mlp::num_params`] values.
    pub fn restore(&mut self, flat: &[f64]) -> Result<()> {
        check_len("mlp_restore", self.num_params(), flat.len())?;
        let mut off = 0;
        for layer in &mut self.layers {
            let n = layer.weight.rows() * layer.weight.cols();
            layer
                .weight
                .as_mut_slice()
                .copy_from_slice(&flat[off..off + n]);
            off += n;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }
}
