//! Small dense-tensor library with tape-based reverse-mode differentiation.
//!
//! ```
//! use hgere_autodiff::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
//! let loss = x.hadamard(&x).unwrap().sum().unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod nn;
mod ops;
pub mod optim;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use nn::{Linear, ParamId, ParamSet};
pub use ops::{bce_value, log_sum_exp, sigmoid, softmax, Activation, BCE_EPS};
pub use optim::{Adam, WarmupLinear};
pub use tensor::{Result, Tensor, TensorError};
