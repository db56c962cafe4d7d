pub mod balance;
pub mod checkpoint;
pub mod denoiser;
pub mod diffusion_train;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod net;
pub mod numerics;
pub mod optim;
pub mod pipeline;
pub mod sampler;
pub mod schedule;
pub mod student;
pub mod toydata;

pub use error::{Error, Result};
pub use numerics::{Rng, Scalar, Tensor};
