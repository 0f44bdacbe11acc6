//! DDPM machinery and the goal-conditioned base diffusion policy.

mod base;
pub mod sample;
pub mod schedule;
pub mod train;
pub mod unet;

pub use base::{encode_observation, ActionNorm, Horizons, Policy, PolicyConfig, Window};
pub use sample::{FilmRow, FilmSelector, FixedSelector, IdentitySelector, Rollout, RolloutConfig, Selection};
pub use schedule::{NoiseSchedule, ScheduleKind, StepCoefficients};
pub use train::{train_base, TrainConfig};
pub use unet::{BackwardScope, FilmPort, UNet, UNetConfig};
