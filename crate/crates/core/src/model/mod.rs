//! Encoder/decoder with a probabilistic bottleneck.
//!
//! A shared encoder maps the shadow image to skip features and a bottleneck.
//! The prior heads read the pooled bottleneck; the posterior branch has its
//! own encoder over the channel-concatenated (shadow, shadow-free) pair. Both
//! predict diagonal Gaussians over a per-channel shift `a` and scale `b`,
//! which modulate the instance-normalized bottleneck before decoding.

mod complexity;
mod config;
mod latent;
mod network;

pub use complexity::{conv_flops, count_flops, count_flops_sampled, count_params, ParamCount};
pub use config::ModelConfig;
pub use latent::{sample_latent, DiagGaussian, LatentDists, LatentSample};
pub use network::{
    images_to_tensor, pem, tensor_to_image, Encoded, GaussVars, HeadVars, MapInference, ShadowNet, HEAD_LOGVAR_INIT,
    HEAD_SCALE_MU_INIT,
};

/// Floor on per-channel standard deviations and on the sampled scale `b`.
pub const STD_FLOOR: f64 = 1e-5;
