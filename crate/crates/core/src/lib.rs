//! Latent-feature-maximization GAN training toolkit.

pub mod autograd;
pub mod data;
pub mod eval;
pub mod latent;
pub mod lfm;
pub mod nets;
pub mod records;
pub mod train;
