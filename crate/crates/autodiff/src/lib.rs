//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is deliberately small: a tape ([`Graph`]) of primitives with
//! hand-written vector-Jacobian products, a named [`ParamStore`], an
//! [`AdamWState`] optimizer and a finite-difference [`grad_check`].
//!
//! ```
//! use coa_autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod error;
pub mod gradcheck;
mod graph;
pub mod optim;
mod params;
pub mod rng;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::grad_check;
pub use graph::{sigmoid, AttnLayout, Gradients, Graph, Var};
pub use optim::{AdamWConfig, AdamWState};
pub use params::{trunc_normal, Binder, GradStore, ParamStore};
pub use tensor::Tensor;
