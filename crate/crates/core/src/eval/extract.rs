use std::fmt;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Activation, Precision, Tape, Tensor};
use crate::nets::{Discriminator, ForwardCtx};

use super::{EvalError, Result};

/// Maps a batch of samples `[N, ...]` to feature rows `[N, output_dim]`.
pub trait FeatureExtractor {
    /// Identifies the extractor in stats files; stats are only comparable
    /// under equal tags.
    fn tag(&self) -> String;
    fn output_dim(&self) -> usize;
    fn extract(&mut self, samples: &Tensor) -> Result<Tensor>;
}

/// Parsed extractor selection, as written on the command line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExtractorTag {
    Identity,
    RandomCnn { seed: u64 },
    TrainedDf { checkpoint: PathBuf },
}

impl ExtractorTag {
    /// `identity`, `random_cnn[:SEED]` or `trained_df:PATH`.
    pub fn parse(s: &str) -> Option<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        match (kind, arg) {
            ("identity", None) => Some(ExtractorTag::Identity),
            ("random_cnn", None) => Some(ExtractorTag::RandomCnn { seed: 0 }),
            ("random_cnn", Some(a)) => a.parse().ok().map(|seed| ExtractorTag::RandomCnn { seed }),
            ("trained_df", Some(a)) if !a.is_empty() => Some(ExtractorTag::TrainedDf { checkpoint: a.into() }),
            _ => None,
        }
    }
}

impl fmt::Display for ExtractorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtractorTag::Identity => write!(f, "identity"),
            ExtractorTag::RandomCnn { seed } => write!(f, "random_cnn:{seed}"),
            ExtractorTag::TrainedDf { checkpoint } => write!(f, "trained_df:{}", checkpoint.display()),
        }
    }
}

/// Flattens each sample.
#[derive(Debug, Clone)]
pub struct Identity {
    dim: usize,
}

impl Identity {
    pub fn new(dim: usize) -> Self {
        Identity { dim }
    }
}

impl FeatureExtractor for Identity {
    fn tag(&self) -> String {
        ExtractorTag::Identity.to_string()
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn extract(&mut self, samples: &Tensor) -> Result<Tensor> {
        let n = samples.shape().first().copied().unwrap_or(0);
        if n == 0 || samples.numel() != n * self.dim {
            return Err(EvalError::Invalid(format!("samples {:?} do not have {} features", samples.shape(), self.dim)));
        }
        Ok(Tensor::new(vec![n, self.dim], samples.data().to_vec())?)
    }
}

/// A frozen, seeded three-layer convolutional encoder on `[N, 3, S, S]`
/// images with global average pooling.
#[derive(Debug, Clone)]
pub struct RandomCnn {
    seed: u64,
    layers: Vec<Tensor>,
}

const CNN_CHANNELS: [usize; 4] = [3, 16, 32, 64];
const CHUNK: usize = 64;

impl RandomCnn {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = CNN_CHANNELS
            .windows(2)
            .map(|w| {
                let fan_in = w[0] * 16;
                let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(vec![w[1], w[0], 4, 4], |_| dist.sample(&mut rng))
            })
            .collect();
        RandomCnn { seed, layers }
    }
}

impl FeatureExtractor for RandomCnn {
    fn tag(&self) -> String {
        ExtractorTag::RandomCnn { seed: self.seed }.to_string()
    }

    fn output_dim(&self) -> usize {
        CNN_CHANNELS[3]
    }

    fn extract(&mut self, samples: &Tensor) -> Result<Tensor> {
        let s = samples.shape();
        if s.len() != 4 || s[1] != 3 || s[2] < 8 || s[3] < 8 {
            return Err(EvalError::Invalid(format!("random_cnn expects [N, 3, H, W] images with H, W >= 8, got {s:?}")));
        }
        let (n, per) = (s[0], s[1] * s[2] * s[3]);
        let dim = self.output_dim();
        let mut out = Vec::with_capacity(n * dim);
        for start in (0..n).step_by(CHUNK) {
            let rows = CHUNK.min(n - start);
            let chunk = Tensor::new(vec![rows, s[1], s[2], s[3]], samples.data()[start * per..(start + rows) * per].to_vec())?;
            let mut tape = Tape::new(Precision::F64);
            let mut h = tape.constant(&chunk)?;
            for w in &self.layers {
                let w = tape.constant(w)?;
                h = tape.conv2d(h, w, None, 2, 1)?;
                h = tape.activation(h, Activation::LeakyRelu(0.2))?;
            }
            let hs = tape.shape(h).to_vec();
            let area = hs[2] * hs[3];
            for cell in tape.value(h).chunks_exact(area) {
                out.push(cell.iter().sum::<f64>() / area as f64);
            }
        }
        Ok(Tensor::new(vec![n, dim], out)?)
    }
}

/// The feature head of a trained discriminator, in eval mode.
pub struct DiscriminatorFeatures {
    net: Box<dyn Discriminator>,
    tag: String,
}

impl DiscriminatorFeatures {
    pub fn new(net: Box<dyn Discriminator>, tag: impl Into<String>) -> Self {
        DiscriminatorFeatures { net, tag: tag.into() }
    }
}

impl FeatureExtractor for DiscriminatorFeatures {
    fn tag(&self) -> String {
        self.tag.clone()
    }

    fn output_dim(&self) -> usize {
        self.net.feature_dim()
    }

    fn extract(&mut self, samples: &Tensor) -> Result<Tensor> {
        let n = samples.shape().first().copied().unwrap_or(0);
        let mut tape = Tape::new(Precision::F64);
        let x = tape.constant(samples)?;
        let out = self.net.forward(&mut tape, x, ForwardCtx::eval())?;
        Ok(Tensor::new(vec![n, self.output_dim()], tape.value(out.feature_raw).to_vec())?)
    }
}
