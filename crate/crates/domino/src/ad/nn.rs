use rand::Rng;

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::{gemm, sigmoid, Layout, Tensor};
use crate::error::{dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// `x * sigmoid(x)`.
    Swish,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Swish => x * sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    fn on_tape(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Swish => tape.swish(v),
            Activation::Tanh => tape.tanh(v),
            Activation::Identity => v,
        }
    }
}

/// Fully connected network whose weights live in a [`ParamStore`].
///
/// Weights are stored `fan_in x fan_out`, so a layer computes `x W + b` on row
/// batches. `hidden` is applied after every layer but the last, `output`
/// after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    widths: Vec<usize>,
    hidden: Activation,
    output: Activation,
    first_param: usize,
}

impl Mlp {
    /// Adds the layers to `store` with Glorot-uniform weights and zero biases.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return dim_err(format!("layer widths {widths:?} need at least an input and an output"));
        }
        let first_param = store.len();
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
            store.add(format!("{prefix}l{l}.w"), Tensor::matrix(fan_in, fan_out, w)?);
            store.add(format!("{prefix}l{l}.b"), Tensor::zeros(&[1, fan_out]));
        }
        Ok(Self { widths: widths.to_vec(), hidden, output, first_param })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn in_width(&self) -> usize {
        self.widths[0]
    }

    pub fn out_width(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Store indices of layer `l`'s weight and bias.
    pub fn layer_params(&self, l: usize) -> (usize, usize) {
        (self.first_param + 2 * l, self.first_param + 2 * l + 1)
    }

    fn activation(&self, l: usize) -> Activation {
        if l + 1 == self.num_layers() {
            self.output
        } else {
            self.hidden
        }
    }

    /// Forward pass recorded on `tape`; `x` is `batch x in_width`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.in_width() {
            return dim_err(format!("input width {} for a network expecting {}", tape.value(x).cols(), self.in_width()));
        }
        let mut h = x;
        for l in 0..self.num_layers() {
            let (w, b) = self.layer_params(l);
            let z = tape.matmul(h, bound.var(w))?;
            let z = tape.add_bias(z, bound.var(b))?;
            h = self.activation(l).on_tape(tape, z);
        }
        Ok(h)
    }

    /// Tape-free forward pass for inference; numerically identical to [`Mlp::forward`].
    pub fn infer(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let (rows, cols) = x.dims();
        if cols != self.in_width() {
            return dim_err(format!("input width {cols} for a network expecting {}", self.in_width()));
        }
        let mut h = x.data().to_vec();
        for l in 0..self.num_layers() {
            let (wi, bi) = self.layer_params(l);
            let (k, n) = (self.widths[l], self.widths[l + 1]);
            let mut z = vec![0.0; rows * n];
            gemm(rows, k, n, &h, Layout::Normal, store.get(wi).data(), Layout::Normal, 0.0, &mut z);
            let b = store.get(bi).data();
            let act = self.activation(l);
            for row in z.chunks_mut(n) {
                for (v, bb) in row.iter_mut().zip(b) {
                    *v = act.apply(*v + bb);
                }
            }
            h = z;
        }
        Tensor::matrix(rows, self.out_width(), h)
    }
}
