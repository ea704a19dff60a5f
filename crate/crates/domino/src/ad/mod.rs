//! Numerical substrate: dense tensors, a reverse-mode tape, MLP layers and Adam.

pub mod checkpoint;
mod nn;
mod params;
mod tape;
mod tensor;

pub use nn::{Activation, Mlp};
pub use params::{AdamConfig, Bound, ParamStore};
pub use tape::{degenerate_normalizations, Gradients, Tape, Var};
pub use tensor::{logsumexp, sigmoid, Tensor};

pub(crate) use tape::note_degenerate_normalization as note_degenerate;
