//! Minimal dense-tensor library with reverse-mode automatic differentiation.
//!
//! Computations are recorded on a [`Graph`] as they execute. Every operation
//! appends one node whose inputs were created earlier, so the node list is
//! already in topological order and [`Graph::backward`] is a single reverse
//! sweep over it.
//!
//! ```
//! use cyclevae_autograd::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
//! let sq = g.square(x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
//! ```
//!
//! Images use the NCHW convention and all buffers are row-major.

mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod scalar;
mod tensor;

pub use error::TensorError;
pub use gradcheck::{grad_check, grad_check_with_fault, op_suite, GradCheckReport, OpCheck};
pub use graph::{BackwardStats, Gradients, Graph, OpKind, Var};
pub use kernels::{conv2d_output_size, conv_transpose2d_output_size};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
