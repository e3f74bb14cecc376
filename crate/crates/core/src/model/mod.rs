//! Desk-scale analysis/synthesis networks, gain modulation, quantisation,
//! the hyperprior rate model, and image I/O.

mod codec;
mod config;
mod image;
mod scaling;

pub use codec::{
    estimate_rate, quantize, y_likelihood, Analysis, Codec, Masking, Quant, StageRouting, Synthesis,
    LIKELIHOOD_FLOOR, MASK_THRESHOLD, SIGMA_MIN,
};
pub use config::{ModelConfig, Task, DOWNSCALE, ROUTED_STAGES, STAGES};
pub use image::Image;
pub use scaling::{isf_modulate, quality_split, sf_interpolate, sf_modulate, sf_vector};

#[cfg(test)]
mod tests;
