//! Dense `f64` tensors, neural primitives, temporal interpolation and a
//! reverse-mode tape with a finite-difference checker.

pub mod autodiff;
pub mod branch;
pub mod gradcheck;
pub mod init;
pub mod ops;
pub mod params;
pub mod tensor;

pub use autodiff::{CustomBackward, Tape, Var};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use ops::{interp_sample, layer_norm, linear, relu, sigmoid, softmax, softplus, LAYER_NORM_EPS};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
