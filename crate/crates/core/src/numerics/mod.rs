//! Dense tensors, reverse-mode differentiation, recurrent cells, Adam and
//! finite-difference gradient checking.

mod adam;
mod gradcheck;
pub mod nn;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{gradcheck, gradcheck_params, GradcheckOptions, GradcheckReport};
pub use params::{Checkpoint, NamedArray, ParameterSet, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::{cosine, Tensor};

#[cfg(test)]
mod tests;
