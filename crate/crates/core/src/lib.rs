//! Desk-scale erase diffusion: mix-up latent chains trained with a
//! chain-rectifying objective, self-rectifying attention, deterministic DDIM
//! erase sampling and a closed-form oracle denoiser.

pub mod check;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod sampler;
pub mod scenegen;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Scalar, Tape, Tensor, Var};
pub use config::RunConfig;
pub use model::{DenoiserConfig, DenoiserModel};
pub use scenegen::{Mask, SceneConfig, ScenePair};
pub use schedule::{NoiseSchedule, ScheduleConfig};
