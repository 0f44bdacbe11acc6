//! Style-conditioned diffusion policies for transparent robot motion.

pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod metrics;
pub mod observer;
pub mod policy;
pub mod rng;
pub mod style;
pub mod world;

pub use error::{Result, ScdpError};
pub use geometry::Vec2;
pub use rng::SimRng;
