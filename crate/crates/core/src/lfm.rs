//! Latent feature maximization loss and the combined GAN objectives.
//!
//! For a batch of `B` features where rows `i` and `i + B/2` come from an
//! orthogonal latent pair, the base term is
//!
//! ```text
//! base = | Σ_{i < B/2} f_i · f_{i+B/2} | / (B/2) / 2
//! ```
//!
//! The generator minimizes `base`; the discriminator minimizes
//! `c_max - base`, i.e. pushes paired features towards alignment.

use thiserror::Error;

use crate::autograd::{AutogradError, Tape, Var};
use crate::nets::LfmMode;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LfmError {
    #[error("paired features need an even batch, got {0}")]
    OddBatch(usize),
    #[error("invalid regularizer configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

pub type Result<T> = std::result::Result<T, LfmError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LfmConfig {
    pub lambda_d: f64,
    pub lambda_g: f64,
    /// Constant the discriminator-side term is subtracted from.
    pub c_max: f64,
    pub feature_dim: usize,
    pub mode: LfmMode,
}

impl Default for LfmConfig {
    fn default() -> Self {
        LfmConfig { lambda_d: 1.0, lambda_g: 1.0, c_max: 100.0, feature_dim: 100, mode: LfmMode::Full }
    }
}

impl LfmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_d >= 0.0 && self.lambda_g >= 0.0) {
            return Err(LfmError::InvalidConfig(format!(
                "weights must be non-negative (lambda_d {}, lambda_g {})",
                self.lambda_d, self.lambda_g
            )));
        }
        if !(self.c_max >= self.feature_dim as f64 / 2.0) {
            return Err(LfmError::InvalidConfig(format!(
                "c_max {} is below feature_dim/2 = {}",
                self.c_max,
                self.feature_dim as f64 / 2.0
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Generator,
    Discriminator,
}

/// The base regularizer over a `[B, ...]` feature batch.
pub fn lfm_base(tape: &mut Tape, features: Var) -> Result<Var> {
    let rows = tape.shape(features).first().copied().unwrap_or(0);
    if rows == 0 || rows % 2 != 0 {
        return Err(LfmError::OddBatch(rows));
    }
    let half = rows / 2;
    let flat = tape.flatten(features)?;
    let first = tape.slice_rows(flat, 0, half)?;
    let second = tape.slice_rows(flat, half, rows)?;
    // Rows are contiguous, so one dot over both halves is the sum of the
    // per-pair dot products.
    let dot = tape.dot(first, second)?;
    let scaled = tape.scale(dot, 1.0 / half as f64 / 2.0)?;
    Ok(tape.abs(scaled)?)
}

pub fn lfm_loss(tape: &mut Tape, features: Var, side: Side, cfg: &LfmConfig) -> Result<Var> {
    let base = lfm_base(tape, features)?;
    match side {
        Side::Generator => Ok(base),
        Side::Discriminator => Ok(tape.affine(base, -1.0, cfg.c_max)?),
    }
}

/// A total loss with its parts kept for reporting.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub adversarial: Var,
    /// `lfm_base` of the features, when the regularizer applies to this side.
    pub lfm_base: Option<Var>,
}

/// `bce(real, 1) + bce(fake, 0) + λ_D · (c_max − base)`; the last term only
/// in [`LfmMode::Full`].
pub fn d_total_loss(
    tape: &mut Tape,
    score_real: Var,
    score_fake: Var,
    feature_f_fake: Var,
    cfg: &LfmConfig,
) -> Result<LossTerms> {
    let real = tape.bce_const(score_real, 1.0)?;
    let fake = tape.bce_const(score_fake, 0.0)?;
    let adversarial = tape.add(real, fake)?;
    if cfg.mode != LfmMode::Full {
        return Ok(LossTerms { total: adversarial, adversarial, lfm_base: None });
    }
    let base = lfm_base(tape, feature_f_fake)?;
    let reg = tape.affine(base, -cfg.lambda_d, cfg.lambda_d * cfg.c_max)?;
    let total = tape.add(adversarial, reg)?;
    Ok(LossTerms { total, adversarial, lfm_base: Some(base) })
}

/// Generator loss plus `λ_G · base` (whenever the mode is not off).
///
/// The default adversarial term is the non-saturating `bce(fake, 1)`;
/// `saturating` switches to the literal `mean(log(1 − D(x̂)))`.
pub fn g_total_loss(
    tape: &mut Tape,
    score_fake: Var,
    feature_f_fake: Var,
    cfg: &LfmConfig,
    saturating: bool,
) -> Result<LossTerms> {
    let adversarial = if saturating {
        let b = tape.bce_const(score_fake, 0.0)?;
        tape.scale(b, -1.0)?
    } else {
        tape.bce_const(score_fake, 1.0)?
    };
    if cfg.mode == LfmMode::Off {
        return Ok(LossTerms { total: adversarial, adversarial, lfm_base: None });
    }
    let base = lfm_base(tape, feature_f_fake)?;
    let reg = tape.scale(base, cfg.lambda_g)?;
    let total = tape.add(adversarial, reg)?;
    Ok(LossTerms { total, adversarial, lfm_base: Some(base) })
}
