//! Small dense tensor engine with tape-based reverse-mode differentiation.
//!
//! The op set is deliberately narrow: exactly what a detection decoder,
//! its losses, and an LSTM policy need. Everything runs on the CPU in `f32`
//! for training and `f64` for gradient checks.
//!
//! ```
//! use nfcs_tensor::{Graph, Tensor};
//!
//! let g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap());
//! let y = x.mul(x).unwrap().sum();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0]);
//! ```

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod ops;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use ops::{BatchStats, Conv2dOptions, LstmState};
pub use optim::{adam_step, polyak_update, Adam, AdamConfig};
pub use params::{ParamStore, ParamVars};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
