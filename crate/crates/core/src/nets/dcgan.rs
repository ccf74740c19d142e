use crate::autograd::{Activation, BatchNormState, ParamId, ParamStore, Tape, Tensor, Var};
use crate::latent::LatentBatch;

use super::{
    bn_buffers, load_bn, normal_fill, Buffers, DOutput, Discriminator, FeatureGrad, ForwardCtx, Generator, LfmMode,
    NetError, Result, INIT_STD, LEAKY_SLOPE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DcganConfig {
    pub z_dim: usize,
    pub image_size: usize,
    pub base_channels: usize,
    pub feature_dim: usize,
    pub mode: LfmMode,
}

impl Default for DcganConfig {
    fn default() -> Self {
        DcganConfig { z_dim: 100, image_size: 64, base_channels: 64, feature_dim: 100, mode: LfmMode::Full }
    }
}

impl DcganConfig {
    /// Number of stride-2 stages between the 4×4 map and the image.
    fn stages(&self) -> Result<usize> {
        match self.image_size {
            16 => Ok(2),
            32 => Ok(3),
            64 => Ok(4),
            s => Err(NetError::UnsupportedSize(s)),
        }
    }

    fn validate(&self) -> Result<usize> {
        let stages = self.stages()?;
        if self.z_dim == 0 || self.base_channels == 0 || self.feature_dim == 0 {
            return Err(NetError::InvalidConfig(format!("{self:?}")));
        }
        Ok(stages)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConvKind {
    Forward,
    Transposed,
}

#[derive(Debug, Clone)]
struct ConvBlock {
    name: String,
    kind: ConvKind,
    weight: ParamId,
    bias: Option<ParamId>,
    bn: Option<(ParamId, ParamId, BatchNormState)>,
    stride: usize,
    pad: usize,
    act: Activation,
}

struct BlockSpec<'a> {
    name: &'a str,
    kind: ConvKind,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    bias: bool,
    bn: bool,
    act: Activation,
}

impl ConvBlock {
    fn build(params: &mut ParamStore, s: BlockSpec) -> Self {
        let wshape = match s.kind {
            ConvKind::Forward => vec![s.cout, s.cin, s.k, s.k],
            ConvKind::Transposed => vec![s.cin, s.cout, s.k, s.k],
        };
        let weight = params.add(format!("{}.weight", s.name), Tensor::zeros(wshape));
        let bias = s.bias.then(|| params.add(format!("{}.bias", s.name), Tensor::zeros(vec![s.cout])));
        let bn = s.bn.then(|| {
            let g = params.add(format!("{}.bn.gamma", s.name), Tensor::from_fn(vec![s.cout], |_| 1.0));
            let b = params.add(format!("{}.bn.beta", s.name), Tensor::zeros(vec![s.cout]));
            (g, b, BatchNormState::new(s.cout))
        });
        ConvBlock { name: s.name.to_string(), kind: s.kind, weight, bias, bn, stride: s.stride, pad: s.pad, act: s.act }
    }

    fn forward(&mut self, params: &ParamStore, tape: &mut Tape, x: Var, ctx: ForwardCtx) -> Result<Var> {
        let track = ctx.track_params;
        let w = tape.param(params, self.weight, track)?;
        let b = self.bias.map(|id| tape.param(params, id, track)).transpose()?;
        let mut h = match self.kind {
            ConvKind::Forward => tape.conv2d(x, w, b, self.stride, self.pad)?,
            ConvKind::Transposed => tape.conv_transpose2d(x, w, b, self.stride, self.pad)?,
        };
        if let Some((g, bt, state)) = self.bn.as_mut() {
            let g = tape.param(params, *g, track)?;
            let bt = tape.param(params, *bt, track)?;
            h = tape.batchnorm2d(h, g, bt, ctx.bn, state)?;
        }
        Ok(tape.activation(h, self.act)?)
    }

    fn init(&self, params: &mut ParamStore, rng: &mut dyn rand::RngCore) {
        normal_fill(params.get_mut(self.weight), 0.0, INIT_STD, rng);
        if let Some(b) = self.bias {
            params.get_mut(b).data_mut().fill(0.0);
        }
        if let Some((g, b, _)) = &self.bn {
            normal_fill(params.get_mut(*g), 1.0, INIT_STD, rng);
            params.get_mut(*b).data_mut().fill(0.0);
        }
    }

    fn buffers(&self, out: &mut Buffers) {
        if let Some((_, _, st)) = &self.bn {
            out.extend(bn_buffers(&format!("{}.bn", self.name), st));
        }
    }

    fn load_buffers(&mut self, buffers: &[(String, Tensor)]) -> Result<()> {
        if let Some((_, _, st)) = self.bn.as_mut() {
            load_bn(&format!("{}.bn", self.name), st, buffers)?;
        }
        Ok(())
    }
}

/// Transposed-convolution generator: `(N, z, 1, 1) -> (N, 3, S, S)`.
#[derive(Debug, Clone)]
pub struct GeneratorNet {
    config: DcganConfig,
    params: ParamStore,
    blocks: Vec<ConvBlock>,
}

impl GeneratorNet {
    pub fn new(config: DcganConfig) -> Result<Self> {
        let stages = config.validate()?;
        let mut params = ParamStore::new();
        let mut blocks = Vec::with_capacity(stages + 1);
        let mut ch = config.base_channels << (stages - 1);
        blocks.push(ConvBlock::build(
            &mut params,
            BlockSpec {
                name: "g.0",
                kind: ConvKind::Transposed,
                cin: config.z_dim,
                cout: ch,
                k: 4,
                stride: 1,
                pad: 0,
                bias: false,
                bn: true,
                act: Activation::Relu,
            },
        ));
        for i in 1..stages {
            let name = format!("g.{i}");
            blocks.push(ConvBlock::build(
                &mut params,
                BlockSpec {
                    name: &name,
                    kind: ConvKind::Transposed,
                    cin: ch,
                    cout: ch / 2,
                    k: 4,
                    stride: 2,
                    pad: 1,
                    bias: false,
                    bn: true,
                    act: Activation::Relu,
                },
            ));
            ch /= 2;
        }
        let name = format!("g.{stages}");
        blocks.push(ConvBlock::build(
            &mut params,
            BlockSpec {
                name: &name,
                kind: ConvKind::Transposed,
                cin: ch,
                cout: 3,
                k: 4,
                stride: 2,
                pad: 1,
                bias: true,
                bn: false,
                act: Activation::Tanh,
            },
        ));
        Ok(GeneratorNet { config, params, blocks })
    }

    pub fn config(&self) -> &DcganConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }
}

impl Generator for GeneratorNet {
    fn z_dim(&self) -> usize {
        self.config.z_dim
    }

    fn sample_shape(&self) -> Vec<usize> {
        vec![3, self.config.image_size, self.config.image_size]
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn buffers(&self) -> Buffers {
        let mut out = Vec::new();
        self.blocks.iter().for_each(|b| b.buffers(&mut out));
        out
    }

    fn load_buffers(&mut self, buffers: &[(String, Tensor)]) -> Result<()> {
        self.blocks.iter_mut().try_for_each(|b| b.load_buffers(buffers))
    }

    fn init_weights(&mut self, rng: &mut dyn rand::RngCore) {
        for b in &self.blocks {
            b.init(&mut self.params, rng);
        }
    }

    fn input_tensor(&self, z: &LatentBatch) -> Tensor {
        z.to_image_input()
    }

    fn forward(&mut self, tape: &mut Tape, z: Var, ctx: ForwardCtx) -> Result<Var> {
        let s = tape.shape(z);
        if s.len() != 4 || s[1] != self.config.z_dim || s[2] != 1 || s[3] != 1 {
            return Err(NetError::InputShape { got: s.to_vec(), expected: format!("(N, {}, 1, 1)", self.config.z_dim) });
        }
        let outs = self.forward_layers(tape, z, ctx)?;
        Ok(*outs.last().expect("at least one block"))
    }
}

impl GeneratorNet {
    /// The output of every block, input side first.
    pub fn forward_layers(&mut self, tape: &mut Tape, z: Var, ctx: ForwardCtx) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut h = z;
        for b in &mut self.blocks {
            h = b.forward(&self.params, tape, h, ctx)?;
            outs.push(h);
        }
        Ok(outs)
    }
}

/// Convolutional discriminator with a shared backbone, a sigmoid classifier
/// head, a tanh feature head and (in full mode) a 1×1 tanh `F` layer.
#[derive(Debug, Clone)]
pub struct DiscriminatorNet {
    config: DcganConfig,
    params: ParamStore,
    backbone: Vec<ConvBlock>,
    head_c: ConvBlock,
    head_f: ConvBlock,
    lfm_layer: Option<ConvBlock>,
}

impl DiscriminatorNet {
    pub fn new(config: DcganConfig) -> Result<Self> {
        let stages = config.validate()?;
        let mut params = ParamStore::new();
        let base = config.base_channels;
        let mut backbone = vec![ConvBlock::build(
            &mut params,
            BlockSpec {
                name: "d.0",
                kind: ConvKind::Forward,
                cin: 3,
                cout: base,
                k: 4,
                stride: 2,
                pad: 1,
                bias: false,
                bn: false,
                act: Activation::LeakyRelu(LEAKY_SLOPE),
            },
        )];
        let mut ch = base;
        for i in 1..stages {
            let name = format!("d.{i}");
            backbone.push(ConvBlock::build(
                &mut params,
                BlockSpec {
                    name: &name,
                    kind: ConvKind::Forward,
                    cin: ch,
                    cout: ch * 2,
                    k: 4,
                    stride: 2,
                    pad: 1,
                    bias: false,
                    bn: true,
                    act: Activation::LeakyRelu(LEAKY_SLOPE),
                },
            ));
            ch *= 2;
        }
        let head = |params: &mut ParamStore, name: &str, cout: usize, act| {
            ConvBlock::build(
                params,
                BlockSpec { name, kind: ConvKind::Forward, cin: ch, cout, k: 4, stride: 1, pad: 0, bias: true, bn: false, act },
            )
        };
        let head_c = head(&mut params, "d.head_c", 1, Activation::Sigmoid);
        let head_f = head(&mut params, "d.head_f", config.feature_dim, Activation::Tanh);
        let lfm_layer = config.mode.has_lfm_layer().then(|| {
            ConvBlock::build(
                &mut params,
                BlockSpec {
                    name: "d.lfm_f",
                    kind: ConvKind::Forward,
                    cin: config.feature_dim,
                    cout: config.feature_dim,
                    k: 1,
                    stride: 1,
                    pad: 0,
                    bias: true,
                    bn: false,
                    act: Activation::Tanh,
                },
            )
        });
        Ok(DiscriminatorNet { config, params, backbone, head_c, head_f, lfm_layer })
    }

    pub fn config(&self) -> &DcganConfig {
        &self.config
    }

    /// The output of every backbone block, input side first.
    pub fn backbone_layers(&mut self, tape: &mut Tape, x: Var, ctx: ForwardCtx) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(self.backbone.len());
        let mut h = x;
        for b in &mut self.backbone {
            h = b.forward(&self.params, tape, h, ctx)?;
            outs.push(h);
        }
        Ok(outs)
    }

    fn all_blocks(&self) -> impl Iterator<Item = &ConvBlock> {
        self.backbone.iter().chain([&self.head_c, &self.head_f]).chain(self.lfm_layer.iter())
    }
}

impl Discriminator for DiscriminatorNet {
    fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn mode(&self) -> LfmMode {
        self.config.mode
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn buffers(&self) -> Buffers {
        let mut out = Vec::new();
        self.all_blocks().for_each(|b| b.buffers(&mut out));
        out
    }

    fn load_buffers(&mut self, buffers: &[(String, Tensor)]) -> Result<()> {
        self.backbone.iter_mut().try_for_each(|b| b.load_buffers(buffers))
    }

    fn init_weights(&mut self, rng: &mut dyn rand::RngCore) {
        let params = &mut self.params;
        for b in self.backbone.iter().chain([&self.head_c, &self.head_f]).chain(self.lfm_layer.iter()) {
            b.init(params, rng);
        }
    }

    fn forward(&mut self, tape: &mut Tape, x: Var, ctx: ForwardCtx) -> Result<DOutput> {
        let s = tape.shape(x);
        let size = self.config.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
            return Err(NetError::InputShape { got: s.to_vec(), expected: format!("(N, 3, {size}, {size})") });
        }
        let backbone = *self.backbone_layers(tape, x, ctx)?.last().expect("at least one block");
        let score = self.head_c.forward(&self.params, tape, backbone, ctx)?;
        let feature_raw = self.head_f.forward(&self.params, tape, backbone, ctx)?;
        let feature_f = match self.lfm_layer.as_mut() {
            Some(f) => {
                let input = match ctx.feature_grad {
                    FeatureGrad::Full => feature_raw,
                    FeatureGrad::LfmLayerOnly => tape.detach(feature_raw)?,
                };
                f.forward(&self.params, tape, input, ctx)?
            }
            None => feature_raw,
        };
        Ok(DOutput { backbone, score, feature_raw, feature_f })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Precision;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(mode: LfmMode) -> DcganConfig {
        DcganConfig { z_dim: 8, image_size: 16, base_channels: 4, feature_dim: 6, mode }
    }

    #[test]
    fn unsupported_sizes_are_rejected() {
        let cfg = DcganConfig { image_size: 48, ..DcganConfig::default() };
        assert_eq!(GeneratorNet::new(cfg).unwrap_err(), NetError::UnsupportedSize(48));
        assert!(DiscriminatorNet::new(cfg).is_err());
    }

    #[test]
    fn layer_counts_at_default_size() {
        let g = GeneratorNet::new(DcganConfig::default()).unwrap();
        assert_eq!(g.num_layers(), 5);
        let d = DiscriminatorNet::new(DcganConfig::default()).unwrap();
        assert_eq!(d.backbone.len(), 4);
    }

    #[test]
    fn wrong_latent_width_is_an_error() {
        let mut g = GeneratorNet::new(small(LfmMode::Full)).unwrap();
        let mut tape = Tape::new(Precision::F64);
        let z = tape.constant(&Tensor::zeros(vec![2, 7, 1, 1])).unwrap();
        assert!(matches!(g.forward(&mut tape, z, ForwardCtx::train(false)), Err(NetError::InputShape { .. })));
    }

    #[test]
    fn buffers_round_trip() {
        let mut g = GeneratorNet::new(small(LfmMode::Full)).unwrap();
        g.init_weights(&mut ChaCha8Rng::seed_from_u64(1));
        let mut tape = Tape::new(Precision::F64);
        let z = crate::latent::sample_gaussian(4, 8, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        g.generate(&mut tape, &z, ForwardCtx::train(false)).unwrap();
        let saved = g.buffers();
        let mut fresh = GeneratorNet::new(small(LfmMode::Full)).unwrap();
        fresh.load_buffers(&saved).unwrap();
        assert_eq!(fresh.buffers(), saved);
        assert!(fresh.load_buffers(&[]).is_err());
    }
}
