//! Numeric substrate for the HyNT model.
//!
//! Every value is a rank-2 matrix laid out with one column per sequence
//! position, so a sequence of `n` positions in `d` dimensions is a `d x n`
//! matrix. Operations are recorded on a [`Graph`] and differentiated in
//! reverse mode by [`Graph::backward`]. Learnable arrays live in a
//! [`ParamStore`] and are updated by [`Adam`] under a [`CosineRestarts`]
//! learning-rate schedule.

mod checkpoint;
mod error;
mod graph;
mod optim;
mod params;
mod real;

pub use checkpoint::{read_container, write_container, DType, NamedTensor};
pub use error::{KernelError, Result};
pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub use optim::{Adam, AdamConfig, CosineRestarts};
pub use params::{ParamId, ParamStore};
pub use real::Real;

pub use ndarray::{Array2, ArrayView2};
