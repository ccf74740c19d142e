//! Fully-connected GAN pair for low-dimensional data, with the same
//! head-splitting layout as the convolutional discriminator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Activation, ParamId, ParamStore, Tape, Tensor, Var};
use crate::latent::LatentBatch;

use super::{
    uniform_fill, Buffers, DOutput, Discriminator, FeatureGrad, ForwardCtx, Generator, LfmMode, NetError, Result,
    LEAKY_SLOPE,
};

#[derive(Debug, Clone, Copy)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
    fan_in: usize,
}

impl Dense {
    fn build(params: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = params.add(format!("{name}.weight"), Tensor::zeros(vec![fan_out, fan_in]));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]));
        Dense { weight, bias, fan_in }
    }

    fn forward(&self, params: &ParamStore, tape: &mut Tape, x: Var, track: bool) -> Result<Var> {
        let w = tape.param(params, self.weight, track)?;
        let b = tape.param(params, self.bias, track)?;
        Ok(tape.linear(x, w, Some(b))?)
    }

    /// `U(-1/√fan_in, 1/√fan_in)` for weights and biases.
    fn init(&self, params: &mut ParamStore, rng: &mut dyn rand::RngCore) {
        let bound = 1.0 / (self.fan_in as f64).sqrt();
        uniform_fill(params.get_mut(self.weight), bound, rng);
        uniform_fill(params.get_mut(self.bias), bound, rng);
    }
}

/// `z -> hidden -> hidden -> out_dim`, ReLU hidden layers, linear output.
#[derive(Debug, Clone)]
pub struct MlpGenerator {
    z_dim: usize,
    out_dim: usize,
    params: ParamStore,
    layers: [Dense; 3],
}

impl MlpGenerator {
    pub fn new(z_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        if z_dim == 0 || hidden == 0 || out_dim == 0 {
            return Err(NetError::InvalidConfig("mlp dimensions must be positive".into()));
        }
        let mut params = ParamStore::new();
        let layers = [
            Dense::build(&mut params, "g.0", z_dim, hidden),
            Dense::build(&mut params, "g.1", hidden, hidden),
            Dense::build(&mut params, "g.2", hidden, out_dim),
        ];
        Ok(MlpGenerator { z_dim, out_dim, params, layers })
    }
}

impl Generator for MlpGenerator {
    fn z_dim(&self) -> usize {
        self.z_dim
    }

    fn sample_shape(&self) -> Vec<usize> {
        vec![self.out_dim]
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn buffers(&self) -> Buffers {
        Vec::new()
    }

    fn load_buffers(&mut self, _buffers: &[(String, Tensor)]) -> Result<()> {
        Ok(())
    }

    fn init_weights(&mut self, rng: &mut dyn rand::RngCore) {
        for l in &self.layers {
            l.init(&mut self.params, rng);
        }
    }

    fn input_tensor(&self, z: &LatentBatch) -> Tensor {
        z.to_matrix()
    }

    fn forward(&mut self, tape: &mut Tape, z: Var, ctx: ForwardCtx) -> Result<Var> {
        let s = tape.shape(z);
        if s.len() != 2 || s[1] != self.z_dim {
            return Err(NetError::InputShape { got: s.to_vec(), expected: format!("(N, {})", self.z_dim) });
        }
        let t = ctx.track_params;
        let h = self.layers[0].forward(&self.params, tape, z, t)?;
        let h = tape.relu(h)?;
        let h = self.layers[1].forward(&self.params, tape, h, t)?;
        let h = tape.relu(h)?;
        self.layers[2].forward(&self.params, tape, h, t)
    }
}

/// `in -> hidden -> hidden` leaky-ReLU backbone with a sigmoid score head,
/// a tanh feature head and an optional tanh `F` layer.
#[derive(Debug, Clone)]
pub struct MlpDiscriminator {
    in_dim: usize,
    f_dim: usize,
    mode: LfmMode,
    params: ParamStore,
    backbone: [Dense; 2],
    head_c: Dense,
    head_f: Dense,
    lfm_layer: Option<Dense>,
}

impl MlpDiscriminator {
    pub fn new(in_dim: usize, hidden: usize, f_dim: usize, mode: LfmMode) -> Result<Self> {
        if in_dim == 0 || hidden == 0 || f_dim == 0 {
            return Err(NetError::InvalidConfig("mlp dimensions must be positive".into()));
        }
        let mut params = ParamStore::new();
        let backbone = [Dense::build(&mut params, "d.0", in_dim, hidden), Dense::build(&mut params, "d.1", hidden, hidden)];
        let head_c = Dense::build(&mut params, "d.head_c", hidden, 1);
        let head_f = Dense::build(&mut params, "d.head_f", hidden, f_dim);
        let lfm_layer = mode.has_lfm_layer().then(|| Dense::build(&mut params, "d.lfm_f", f_dim, f_dim));
        Ok(MlpDiscriminator { in_dim, f_dim, mode, params, backbone, head_c, head_f, lfm_layer })
    }
}

impl Discriminator for MlpDiscriminator {
    fn feature_dim(&self) -> usize {
        self.f_dim
    }

    fn mode(&self) -> LfmMode {
        self.mode
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn buffers(&self) -> Buffers {
        Vec::new()
    }

    fn load_buffers(&mut self, _buffers: &[(String, Tensor)]) -> Result<()> {
        Ok(())
    }

    fn init_weights(&mut self, rng: &mut dyn rand::RngCore) {
        let params = &mut self.params;
        for l in self.backbone.iter().chain([&self.head_c, &self.head_f]).chain(self.lfm_layer.iter()) {
            l.init(params, rng);
        }
    }

    fn forward(&mut self, tape: &mut Tape, x: Var, ctx: ForwardCtx) -> Result<DOutput> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.in_dim {
            return Err(NetError::InputShape { got: s.to_vec(), expected: format!("(N, {})", self.in_dim) });
        }
        let t = ctx.track_params;
        let mut h = x;
        for l in &self.backbone {
            h = l.forward(&self.params, tape, h, t)?;
            h = tape.activation(h, Activation::LeakyRelu(LEAKY_SLOPE))?;
        }
        let backbone = h;
        let score = self.head_c.forward(&self.params, tape, backbone, t)?;
        let score = tape.sigmoid(score)?;
        let feature_raw = self.head_f.forward(&self.params, tape, backbone, t)?;
        let feature_raw = tape.tanh(feature_raw)?;
        let feature_f = match &self.lfm_layer {
            Some(f) => {
                let input = match ctx.feature_grad {
                    FeatureGrad::Full => feature_raw,
                    FeatureGrad::LfmLayerOnly => tape.detach(feature_raw)?,
                };
                let y = f.forward(&self.params, tape, input, t)?;
                tape.tanh(y)?
            }
            None => feature_raw,
        };
        Ok(DOutput { backbone, score, feature_raw, feature_f })
    }
}

#[derive(Debug, Clone)]
pub struct MlpGanPair {
    pub generator: MlpGenerator,
    pub discriminator: MlpDiscriminator,
}

/// Builds and initialises a 2-D MLP GAN pair.
pub fn build_mlp_gan(z_dim: usize, hidden: usize, f_dim: usize, mode: LfmMode, seed: u64) -> Result<MlpGanPair> {
    let mut generator = MlpGenerator::new(z_dim, hidden, 2)?;
    let mut discriminator = MlpDiscriminator::new(2, hidden, f_dim, mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generator.init_weights(&mut rng);
    discriminator.init_weights(&mut rng);
    Ok(MlpGanPair { generator, discriminator })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Precision;
    use crate::latent::sample_gaussian;

    #[test]
    fn shapes_and_bounds() {
        let mut pair = build_mlp_gan(4, 16, 5, LfmMode::Full, 3).unwrap();
        let z = sample_gaussian(6, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut tape = Tape::new(Precision::F64);
        let x = pair.generator.generate(&mut tape, &z, ForwardCtx::train(false)).unwrap();
        assert_eq!(tape.shape(x), [6, 2]);
        let out = pair.discriminator.forward(&mut tape, x, ForwardCtx::train(false)).unwrap();
        assert_eq!(tape.shape(out.score), [6, 1]);
        assert_eq!(tape.shape(out.feature_f), [6, 5]);
        assert!(tape.value(out.score).iter().all(|p| *p > 0.0 && *p < 1.0));
        assert!(tape.value(out.feature_raw).iter().all(|f| f.abs() <= 1.0));
        assert!(tape.value(out.feature_f).iter().all(|f| f.abs() <= 1.0));
    }

    #[test]
    fn g_only_has_no_lfm_layer() {
        let full = build_mlp_gan(4, 8, 3, LfmMode::Full, 0).unwrap();
        let g_only = build_mlp_gan(4, 8, 3, LfmMode::GOnly, 0).unwrap();
        let off = build_mlp_gan(4, 8, 3, LfmMode::Off, 0).unwrap();
        assert!(g_only.discriminator.params().num_scalars() < full.discriminator.params().num_scalars());
        assert_eq!(off.discriminator.params().names(), g_only.discriminator.params().names());
        assert!(g_only.discriminator.params().find("d.lfm_f.weight").is_none());
    }

    #[test]
    fn zero_dims_are_rejected() {
        assert!(build_mlp_gan(0, 8, 3, LfmMode::Full, 0).is_err());
        assert!(build_mlp_gan(2, 8, 0, LfmMode::Full, 0).is_err());
    }
}
