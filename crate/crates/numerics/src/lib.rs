//! Numeric substrate for taxolink: dense row-major `f64` tensors, stable
//! reductions, the Adam optimizer, inverted dropout, a seeded generator and
//! a central-difference gradient oracle.
//!
//! Every trainable layer in the workspace computes its own analytic
//! gradients; this crate only supplies the building blocks and the means to
//! check them.

pub mod adam;
pub mod dropout;
pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod rng;
pub mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use dropout::{apply_dropout, DropoutMask};
pub use error::{NumericsError, Result};
pub use gradcheck::{finite_difference_gradient, relative_error};
pub use ops::{log_sum_exp, sigmoid, softmax};
pub use params::{Grads, ParamGroup, Parameterized};
pub use rng::{Categorical, Rng};
pub use tensor::Tensor;
