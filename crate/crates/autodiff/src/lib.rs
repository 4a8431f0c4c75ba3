//! Minimal reverse-mode automatic differentiation for `f64` tensors.
//!
//! Parameters live in a [`ParamStore`] that outlives any single forward
//! pass. Each pass builds a fresh [`Graph`], binds parameters into it,
//! computes a scalar loss and calls [`Tensor::backward`]. Gradients are
//! read back with [`Graph::param_grads`].
//!
//! ```
//! use rimsa_autodiff::Graph;
//!
//! let g = Graph::new();
//! let x = g.variable(vec![1.0, 2.0], &[2]).unwrap();
//! let y = x.square().sum();
//! y.backward().unwrap();
//! assert_eq!(x.grad(), vec![2.0, 4.0]);
//! ```

mod checkpoint;
mod error;
mod gradcheck;
mod kernels;
mod param;
mod tensor;

pub use checkpoint::{load, read_checkpoint, save, write_checkpoint};
pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, grad_check_entries, grad_check_params};
pub use param::{Init, ParamId, ParamStore, Parameter};
pub use tensor::{Graph, Tensor};
