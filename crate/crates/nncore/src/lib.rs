//! Small differentiable-computation core for CPU training of fixed
//! architectures: dense and 1D convolution layers, group normalization, SiLU,
//! FiLM modulation, Adam, finite-difference gradient checks and a binary
//! tensor checkpoint format.
//!
//! There is no autodiff graph. Each layer exposes a pure `forward` returning a
//! cache and a `backward` consuming it; models compose these by hand.

pub mod adam;
pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod layers;
mod param;
pub mod probes;
mod real;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{AnyTensor, NamedTensors};
pub use error::{CheckpointError, NnError, Result};
pub use gradcheck::{gradient_check, GradCheckable, GradReport};
pub use layers::{film_backward, film_modulate, Conv1d, GroupNorm, Linear, Mlp};
pub use param::{Module, Param};
pub use real::{Dtype, Real};
pub use tensor::Tensor;
