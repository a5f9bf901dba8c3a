//! Dense arrays, a reverse-mode gradient tape, fixed layers, Adam, and
//! finite-difference gradient checking.

pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use layers::{bind, Activation, Bound, Gru, Linear, Mlp};
pub use params::{AdamConfig, ParamBlock, ParamStore};
pub use tape::{Gradients, ParamKey, Tape, Var};
pub use tensor::{Real, Tensor};

/// Clamp applied to every log input.
pub const LOG_FLOOR: f64 = 1e-12;

#[cfg(test)]
mod tests;
