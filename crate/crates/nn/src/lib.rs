//! `grad-nn`: a small f64 tensor autodiff engine on top of `ndarray`.
//!
//! Built for training compact convolutional networks on CPU. The one
//! property that sets it apart from a toy tape is that backward passes are
//! recorded in the same primitive set as forward passes, so losses that
//! contain gradients (input-gradient penalties) can be differentiated
//! again exactly.

pub mod check;
pub mod init;
pub mod kernels;
pub mod ops;
pub mod optim;
pub mod probe;
mod var;

pub use var::{grad, Var};
