//! Neural components of the forecasting pipeline: the windowed-attention
//! forecaster with lateral boundary conditioning, variational codecs with
//! adversarial training, a latent-diffusion precipitation diagnoser, the
//! greedy multi-model rollout scheduler, and their training loops.

pub mod attention;
pub mod checkpoint;
pub mod embed;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod swin;
pub mod tensor;

pub use error::{ModelError, Result};
