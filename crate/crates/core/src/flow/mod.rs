//! Flow-matching model, training, and sampling over joint RGB + alpha latents.

pub mod checkpoint;
pub mod gradcheck;
pub mod latent;
pub mod loss;
pub mod model;
pub mod sample;
pub mod train;

pub use gradcheck::{grad_check, GradCheckReport};
pub use latent::{
    concat_latents, decode_frames, decode_latent, encode_frame, encode_frames, encode_latent, interpolate_path,
    target_velocity, LatentGrid, POOL,
};
pub use loss::{compute_losses, LossParts};
pub use model::{Backbone, Condition, Denoiser, DenoiserConfig, Geometry, MaskMode, ModelSpec, Trace};
pub use sample::{euler_integrate, initial_noise, sample_euler, sample_latent, SampleConfig, VelocityField};
pub use train::{cosine_lr, train, train_step, AdamW, LossRecord, TrainConfig, TrainExample};
