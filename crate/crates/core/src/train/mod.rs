//! Alternating GAN training with the latent-feature regularizer,
//! checkpointing and deterministic replay.

mod checkpoint;
mod config;
mod run;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{Arch, ConfigError, DScope, TrainConfig, CONFIG_KEYS};
pub use run::{coverage_threshold, metrics_row, run, train, Evaluator, RunOutputs, RunSummary, METRICS_HEADER};

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{AdamState, AutogradError, BatchNormMode, Tape, Tensor};
use crate::data::{keyed_rng, DataError};
use crate::eval::{EvalError, ModeCoverage};
use crate::latent::{orthogonal_pairs, sample_gaussian, LatentBatch, LatentError};
use crate::lfm::{d_total_loss, g_total_loss, LfmError};
use crate::nets::{
    DcganConfig, Discriminator, DiscriminatorNet, FeatureGrad, ForwardCtx, Generator, GeneratorNet, LfmMode,
    MlpDiscriminator, MlpGenerator, NetError,
};
use crate::records::RecordError;

/// Key of the training-noise stream.
pub const PURPOSE_NOISE: u64 = 10;
/// Key of the weight-initialisation stream.
pub const PURPOSE_INIT: u64 = 11;
/// Key of the evaluation-latent streams (indexed by iteration).
pub const PURPOSE_EVAL: u64 = 12;
/// Key of the sampling stream used by [`TrainState::sample`].
pub const PURPOSE_SAMPLE: u64 = 13;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Lfm(#[from] LfmError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("real batch has shape {got:?}, expected {expected:?}")]
    BatchShape { got: Vec<usize>, expected: Vec<usize> },
    #[error("training diverged at iteration {iteration}: {cause}{}", dump.as_ref().map(|p| format!(" (diagnostics in {p})")).unwrap_or_default())]
    Diverged { iteration: u64, cause: String, dump: Option<String> },
    #[error("checkpoint does not match: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Per-iteration numbers written to the metrics file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// Iteration count after this step (the first step is 1).
    pub iteration: u64,
    pub loss_d: f64,
    pub loss_g: f64,
    /// Regularizer base value on the generator step's fakes.
    pub lfm_value: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    pub iteration: u64,
    pub fid: f64,
    pub n: usize,
    pub coverage: Option<ModeCoverage>,
}

/// Builds and initialises both networks for `cfg`. Parameters are rounded
/// to the run precision.
pub fn build_networks(cfg: &TrainConfig, sample_shape: &[usize]) -> Result<(Box<dyn Generator>, Box<dyn Discriminator>)> {
    let (mut g, mut d): (Box<dyn Generator>, Box<dyn Discriminator>) = match cfg.resolved_arch() {
        Arch::Mlp => {
            let [dim] = sample_shape else {
                return Err(ConfigError::Invalid(format!("the mlp architecture needs flat samples, got {sample_shape:?}")).into());
            };
            let mut g = MlpGenerator::new(cfg.z_dim, cfg.hidden, *dim)?;
            let mut d = MlpDiscriminator::new(*dim, cfg.hidden, cfg.feature_dim, cfg.lfm_mode)?;
            let mut rng = keyed_rng(cfg.seed, PURPOSE_INIT, 0);
            g.init_weights(&mut rng);
            d.init_weights(&mut rng);
            (Box::new(g), Box::new(d))
        }
        Arch::Dcgan | Arch::Auto => {
            let expected = [3, cfg.image_size, cfg.image_size];
            if sample_shape != expected {
                return Err(ConfigError::Invalid(format!("dcgan at size {} needs {expected:?} samples, got {sample_shape:?}", cfg.image_size)).into());
            }
            let dc = DcganConfig {
                z_dim: cfg.z_dim,
                image_size: cfg.image_size,
                base_channels: cfg.base_channels,
                feature_dim: cfg.feature_dim,
                mode: cfg.lfm_mode,
            };
            let mut g = GeneratorNet::new(dc)?;
            let mut d = DiscriminatorNet::new(dc)?;
            let mut rng = keyed_rng(cfg.seed, PURPOSE_INIT, 0);
            g.init_weights(&mut rng);
            d.init_weights(&mut rng);
            (Box::new(g), Box::new(d))
        }
    };
    for t in g.params_mut().tensors_mut().iter_mut().chain(d.params_mut().tensors_mut()) {
        cfg.precision.round_slice(t.data_mut());
    }
    Ok((g, d))
}

/// Everything needed to continue a run exactly.
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: Box<dyn Generator>,
    pub discriminator: Box<dyn Discriminator>,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    pub iteration: u64,
    pub(crate) noise_rng: ChaCha8Rng,
    pub(crate) sample_shape: Vec<usize>,
    pub history: Vec<StepMetrics>,
    pub evals: Vec<EvalPoint>,
}

impl std::fmt::Debug for TrainState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainState")
            .field("iteration", &self.iteration)
            .field("sample_shape", &self.sample_shape)
            .field("g_params", &self.generator.params().num_scalars())
            .field("d_params", &self.discriminator.params().num_scalars())
            .finish_non_exhaustive()
    }
}

impl TrainState {
    /// Fresh state for samples of shape `sample_shape` (excluding batch).
    pub fn new(config: TrainConfig, sample_shape: &[usize]) -> Result<Self> {
        config.validate()?;
        let (generator, discriminator) = build_networks(&config, sample_shape)?;
        let adam_g = AdamState::new(config.adam, generator.params());
        let adam_d = AdamState::new(config.adam, discriminator.params());
        let noise_rng = keyed_rng(config.seed, PURPOSE_NOISE, 0);
        Ok(TrainState {
            config,
            generator,
            discriminator,
            adam_g,
            adam_d,
            iteration: 0,
            noise_rng,
            sample_shape: sample_shape.to_vec(),
            history: Vec::new(),
            evals: Vec::new(),
        })
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn noise_rng(&self) -> &ChaCha8Rng {
        &self.noise_rng
    }

    fn training_latents(&mut self) -> Result<LatentBatch> {
        let cfg = &self.config;
        Ok(if cfg.lfm_mode == LfmMode::Off {
            sample_gaussian(cfg.batch_size, cfg.z_dim, &mut self.noise_rng)?
        } else {
            orthogonal_pairs(cfg.batch_size, cfg.z_dim, cfg.pair_variant, &mut self.noise_rng)?
        })
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, real: &Tensor) -> Result<StepMetrics> {
        let mut expected = vec![self.config.batch_size];
        expected.extend_from_slice(&self.sample_shape);
        if real.shape() != expected {
            return Err(TrainError::BatchShape { got: real.shape().to_vec(), expected });
        }
        let precision = self.config.precision;
        let lfm = self.config.lfm_config();

        // Discriminator step on real data and detached fakes.
        let z = self.training_latents()?;
        let mut tape = Tape::new(precision);
        let fake = self.generator.generate(&mut tape, &z, ForwardCtx::train(false))?;
        let fake = tape.detach(fake)?;
        let real_var = tape.constant(real)?;
        let d_ctx = ForwardCtx::train(true);
        let out_real = self.discriminator.forward(&mut tape, real_var, d_ctx)?;
        let fake_ctx = ForwardCtx {
            feature_grad: match self.config.lfm_d_scope {
                DScope::Full => FeatureGrad::Full,
                DScope::FOnly => FeatureGrad::LfmLayerOnly,
            },
            ..d_ctx
        };
        let out_fake = self.discriminator.forward(&mut tape, fake, fake_ctx)?;
        let d_loss = d_total_loss(&mut tape, out_real.score, out_fake.score, out_fake.feature_f, &lfm)?;
        tape.backward(d_loss.total)?;
        let d_params = self.discriminator.params_mut();
        d_params.zero_grad();
        tape.accumulate_param_grads(d_params);
        self.adam_d.step(d_params, precision)?;
        let loss_d = tape.item(d_loss.total);
        let d_real_mean = mean(tape.value(out_real.score));
        let d_fake_mean = mean(tape.value(out_fake.score));
        drop(tape);

        // Generator step through a frozen discriminator.
        let z = self.training_latents()?;
        let mut tape = Tape::new(precision);
        let fake = self.generator.generate(&mut tape, &z, ForwardCtx::train(true))?;
        let frozen = ForwardCtx { track_params: false, bn: BatchNormMode::Train { update_running: false }, feature_grad: FeatureGrad::Full };
        let out = self.discriminator.forward(&mut tape, fake, frozen)?;
        let g_loss = g_total_loss(&mut tape, out.score, out.feature_f, &lfm, self.config.saturating_g)?;
        let lfm_value = match g_loss.lfm_base {
            Some(b) => tape.item(b),
            // Diagnostic only: alignment of the plain-noise fakes.
            None if self.config.batch_size % 2 == 0 => {
                let b = crate::lfm::lfm_base(&mut tape, out.feature_f)?;
                tape.item(b)
            }
            None => f64::NAN,
        };
        tape.backward(g_loss.total)?;
        let g_params = self.generator.params_mut();
        g_params.zero_grad();
        tape.accumulate_param_grads(g_params);
        self.adam_g.step(g_params, precision)?;
        let loss_g = tape.item(g_loss.total);

        self.iteration += 1;
        let m = StepMetrics { iteration: self.iteration, loss_d, loss_g, lfm_value, d_real_mean, d_fake_mean };
        self.history.push(m);
        Ok(m)
    }

    fn sample_ctx(&self) -> ForwardCtx {
        let bn = if self.config.eval_bn_train { BatchNormMode::Train { update_running: false } } else { BatchNormMode::Eval };
        ForwardCtx { track_params: false, bn, feature_grad: FeatureGrad::Full }
    }

    /// Generator output for `z`; leaves all state untouched.
    pub fn generate_from(&mut self, z: &LatentBatch) -> Result<Tensor> {
        let mut tape = Tape::new(self.config.precision);
        let ctx = self.sample_ctx();
        let x = self.generator.generate(&mut tape, z, ctx)?;
        Ok(tape.to_tensor(x))
    }

    /// `n` samples for `seed`, independent of the training noise.
    pub fn sample(&mut self, n: usize, seed: u64) -> Result<Tensor> {
        let z = sample_gaussian(n, self.config.z_dim, &mut keyed_rng(seed, PURPOSE_SAMPLE, 0))?;
        self.generate_from(&z)
    }

    /// The evaluation latents of `iteration`, always plain Gaussian.
    pub fn eval_latents(&self, iteration: u64) -> Result<LatentBatch> {
        Ok(sample_gaussian(self.config.eval_n, self.config.z_dim, &mut keyed_rng(self.config.seed, PURPOSE_EVAL, iteration))?)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
