//! Generator and split-head discriminator networks.
//!
//! The discriminator has a shared backbone feeding two heads: a classifier
//! head producing a real/fake probability and a feature head producing a
//! tanh-bounded feature vector. In [`LfmMode::Full`] a trainable
//! feature-to-feature layer `F` (also tanh-bounded) follows the feature
//! head; the regularizer reads its output.

mod dcgan;
mod mlp;

pub use dcgan::{DcganConfig, DiscriminatorNet, GeneratorNet};
pub use mlp::{build_mlp_gan, MlpDiscriminator, MlpGanPair, MlpGenerator};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autograd::{AutogradError, BatchNormMode, BatchNormState, ParamStore, Tape, Tensor, Var};
use crate::latent::LatentBatch;

/// Standard deviation of the Gaussian weight initialisation.
pub const INIT_STD: f64 = 0.02;
/// Negative slope of the discriminator's leaky ReLUs.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("unsupported image size {0}; expected 16, 32 or 64")]
    UnsupportedSize(usize),
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("input shape {got:?} does not match the network (expected {expected})")]
    InputShape { got: Vec<usize>, expected: String },
    #[error("missing state entry {0}")]
    MissingState(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LfmMode {
    /// Trainable `F` layer; the regularizer acts on both players.
    #[default]
    Full,
    /// No `F` layer; the regularizer acts on the generator only.
    GOnly,
    /// No regularizer.
    Off,
}

impl LfmMode {
    pub fn has_lfm_layer(self) -> bool {
        self == LfmMode::Full
    }

    pub fn name(self) -> &'static str {
        match self {
            LfmMode::Full => "full",
            LfmMode::GOnly => "g_only",
            LfmMode::Off => "off",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(LfmMode::Full),
            "g_only" | "gonly" => Some(LfmMode::GOnly),
            "off" => Some(LfmMode::Off),
            _ => None,
        }
    }
}

/// How gradients from the regularizer may flow into the discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureGrad {
    /// Through `F`, the feature head and the backbone.
    #[default]
    Full,
    /// Into `F` only; its input is detached from the feature head.
    LfmLayerOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardCtx {
    /// Whether parameters are recorded as differentiable leaves.
    pub track_params: bool,
    pub bn: BatchNormMode,
    pub feature_grad: FeatureGrad,
}

impl ForwardCtx {
    pub fn train(track_params: bool) -> Self {
        ForwardCtx {
            track_params,
            bn: BatchNormMode::Train { update_running: true },
            feature_grad: FeatureGrad::Full,
        }
    }

    pub fn eval() -> Self {
        ForwardCtx { track_params: false, bn: BatchNormMode::Eval, feature_grad: FeatureGrad::Full }
    }
}

/// Discriminator outputs for one batch.
#[derive(Debug, Clone, Copy)]
pub struct DOutput {
    pub backbone: Var,
    /// Real/fake probability.
    pub score: Var,
    /// Feature head output.
    pub feature_raw: Var,
    /// `F(feature_raw)` when an `F` layer exists, otherwise `feature_raw`.
    pub feature_f: Var,
}

/// Named non-trainable state (batch-norm running statistics).
pub type Buffers = Vec<(String, Tensor)>;

pub trait Generator: Send {
    fn z_dim(&self) -> usize;
    /// Shape of one generated sample.
    fn sample_shape(&self) -> Vec<usize>;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn buffers(&self) -> Buffers;
    fn load_buffers(&mut self, buffers: &[(String, Tensor)]) -> Result<()>;
    fn init_weights(&mut self, rng: &mut dyn rand::RngCore);
    /// Latents in this network's input layout.
    fn input_tensor(&self, z: &LatentBatch) -> Tensor;
    fn forward(&mut self, tape: &mut Tape, z: Var, ctx: ForwardCtx) -> Result<Var>;

    fn generate(&mut self, tape: &mut Tape, z: &LatentBatch, ctx: ForwardCtx) -> Result<Var> {
        if z.z_dim() != self.z_dim() {
            return Err(NetError::InputShape {
                got: vec![z.batch(), z.z_dim()],
                expected: format!("latent width {}", self.z_dim()),
            });
        }
        let input = tape.constant(&self.input_tensor(z))?;
        self.forward(tape, input, ctx)
    }
}

pub trait Discriminator: Send {
    fn feature_dim(&self) -> usize;
    fn mode(&self) -> LfmMode;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn buffers(&self) -> Buffers;
    fn load_buffers(&mut self, buffers: &[(String, Tensor)]) -> Result<()>;
    fn init_weights(&mut self, rng: &mut dyn rand::RngCore);
    fn forward(&mut self, tape: &mut Tape, x: Var, ctx: ForwardCtx) -> Result<DOutput>;
}

pub(crate) fn normal_fill(t: &mut Tensor, mean: f64, std: f64, rng: &mut dyn rand::RngCore) {
    let dist = Normal::new(mean, std).expect("positive std");
    for v in t.data_mut() {
        *v = dist.sample(rng);
    }
}

pub(crate) fn uniform_fill(t: &mut Tensor, bound: f64, rng: &mut dyn rand::RngCore) {
    for v in t.data_mut() {
        *v = rng.random_range(-bound..=bound);
    }
}

pub(crate) fn bn_buffers(prefix: &str, st: &BatchNormState) -> [(String, Tensor); 2] {
    let c = st.channels();
    [
        (format!("{prefix}.running_mean"), Tensor::new(vec![c], st.running_mean.clone()).expect("shape")),
        (format!("{prefix}.running_var"), Tensor::new(vec![c], st.running_var.clone()).expect("shape")),
    ]
}

pub(crate) fn load_bn(prefix: &str, st: &mut BatchNormState, buffers: &[(String, Tensor)]) -> Result<()> {
    let channels = st.channels();
    let find = |suffix: &str| {
        let key = format!("{prefix}.{suffix}");
        buffers
            .iter()
            .find(|(n, _)| *n == key)
            .map(|(_, t)| t.data().to_vec())
            .filter(|d| d.len() == channels)
            .ok_or(NetError::MissingState(key))
    };
    let mean = find("running_mean")?;
    let var = find("running_var")?;
    st.running_mean = mean;
    st.running_var = var;
    Ok(())
}
