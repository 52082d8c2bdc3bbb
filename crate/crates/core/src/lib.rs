//! Lens flare removal with a latent diffusion prior.
//!
//! The crate is organised along the data flow of the method:
//!
//! * [`imaging`]: images, YCbCr, PSNR/SSIM.
//! * [`synthesis`]: paired flare/flare-free sample generation.
//! * [`lgp`]: luminance-threshold masks and their attention form.
//! * [`vq`]: the frozen vector-quantized autoencoder defining the latent space.
//! * [`diffusion`]: noise schedule, denoiser, guidance and DDPM sampling.
//! * [`sgim`]: the structural guidance side encoder and its modulation layers.
//! * [`affm`]: encoder/decoder feature fusion with masked self-attention.
//! * [`pipeline`]: configuration, staged training, inference and evaluation.

pub mod affm;
pub mod diffusion;
pub mod error;
pub mod imaging;
pub mod lgp;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod sgim;
pub mod synthesis;
pub mod vq;

pub use error::{Error, Result};
