//! Noise schedule, forward/reverse diffusion steps, latent autoencoder and
//! the ancestral sampler.

pub mod latent;
pub mod sampler;
pub mod schedule;

pub use latent::{LatentDecoder, LatentEncoder};
pub use sampler::ancestral_sample;
pub use schedule::{forward_diffuse, predict_x0, predict_x0_coefs, reverse_step, NoiseSchedule};
