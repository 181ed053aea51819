//! U-Net generator: lightness `[B, 1, S, S]` → chrominance `[B, 2, S, S]`.
//!
//! Encoder block i is a 4×4 stride-2 convolution, normalization and
//! LeakyReLU(0.2). Decoder block j is a 4×4 stride-2 transposed convolution,
//! normalization, optional dropout and ReLU, whose output is concatenated
//! with the mirrored encoder output. A final transposed convolution with
//! tanh yields the two chrominance channels.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, ConvKind, ConvSpec, Ctx, Mode, Module, NormLayer, NormPolicy, Param};
use crate::scalar::Scalar;

pub const DEFAULT_ENCODER_CHANNELS: [usize; 7] = [64, 128, 256, 512, 512, 512, 512];
pub const DEFAULT_DECODER_CHANNELS: [usize; 6] = [512, 512, 512, 256, 128, 64];
pub const LEAKY_SLOPE: f64 = 0.2;
pub const DROPOUT_RATE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub encoder_norms: Vec<NormPolicy>,
    pub decoder_norms: Vec<NormPolicy>,
    /// Decoder block indices (0 = innermost) that apply dropout.
    pub dropout_layers: Vec<usize>,
    pub dropout_rate: f64,
    /// Keep dropout active in eval mode.
    pub eval_dropout: bool,
    pub input_size: usize,
    pub spectral_norm: bool,
    pub leaky_slope: f64,
}

impl Default for GeneratorConfig {
    /// Seven-level network for 256×256 inputs.
    fn default() -> Self {
        Self::with_depth(DEFAULT_ENCODER_CHANNELS.len(), 256)
    }
}

impl GeneratorConfig {
    /// The default channel plan truncated to `depth` encoder levels by
    /// dropping innermost 512-channel levels, with the default IBN schedule.
    pub fn with_depth(depth: usize, input_size: usize) -> Self {
        let depth = depth.clamp(2, DEFAULT_ENCODER_CHANNELS.len());
        let encoder_channels = DEFAULT_ENCODER_CHANNELS[..depth].to_vec();
        let decoder_channels = DEFAULT_DECODER_CHANNELS[DEFAULT_DECODER_CHANNELS.len() + 1 - depth..].to_vec();
        let (encoder_norms, decoder_norms) = ibn_schedule(depth);
        Self {
            encoder_channels,
            decoder_channels,
            kernel: 4,
            stride: 2,
            encoder_norms,
            decoder_norms,
            dropout_layers: (0..3.min(depth - 1)).collect(),
            dropout_rate: DROPOUT_RATE,
            eval_dropout: false,
            input_size,
            spectral_norm: true,
            leaky_slope: LEAKY_SLOPE,
        }
    }

    /// Deepest network that fits `input_size` (at most seven levels).
    pub fn for_image_size(input_size: usize) -> Self {
        let levels = input_size.max(1).trailing_zeros() as usize;
        Self::with_depth(levels.min(DEFAULT_ENCODER_CHANNELS.len()), input_size)
    }

    pub fn depth(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Encoder index concatenated onto the output of decoder block `j`.
    pub fn skip_partner(&self, j: usize) -> usize {
        self.depth() - 2 - j
    }

    /// Applies one policy per encoder/decoder level.
    pub fn with_uniform_norm(mut self, kind: crate::nn::NormKind) -> Self {
        let (enc, dec) = uniform_schedule(self.depth(), NormPolicy::new(kind));
        self.encoder_norms = enc;
        self.decoder_norms = dec;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let depth = self.depth();
        if depth < 2 {
            return Err(Error::Config("generator needs at least two encoder levels".into()));
        }
        if self.decoder_channels.len() + 1 != depth {
            return Err(Error::Config(format!(
                "{} encoder levels need {} decoder levels, got {}",
                depth,
                depth - 1,
                self.decoder_channels.len()
            )));
        }
        if self.encoder_norms.len() != depth || self.decoder_norms.len() != depth - 1 {
            return Err(Error::Config(format!(
                "normalization schedule has {}+{} entries for {}+{} levels",
                self.encoder_norms.len(),
                self.decoder_norms.len(),
                depth,
                depth - 1
            )));
        }
        let factor = self.stride.pow(depth as u32);
        if self.input_size == 0 || self.input_size % factor != 0 {
            return Err(Error::Config(format!(
                "input size {} is not divisible by {}^{} = {}",
                self.input_size, self.stride, depth, factor
            )));
        }
        if let Some(&j) = self.dropout_layers.iter().find(|&&j| j >= depth - 1) {
            return Err(Error::Config(format!("dropout layer {j} out of range")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Default placement: no normalization on the input and innermost levels,
/// IBN on encoder levels 1..=3 (0-based) and the decoder blocks mirroring
/// them, batch normalization elsewhere.
pub fn ibn_schedule(depth: usize) -> (Vec<NormPolicy>, Vec<NormPolicy>) {
    let shallow = |i: usize| (1..=3).contains(&i);
    let encoder = (0..depth)
        .map(|i| match i {
            0 => NormPolicy::NONE,
            i if i == depth - 1 => NormPolicy::NONE,
            i if shallow(i) => NormPolicy::IBN,
            _ => NormPolicy::BN,
        })
        .collect();
    let decoder = (0..depth - 1)
        .map(|j| {
            if shallow(depth - 2 - j) {
                NormPolicy::IBN
            } else {
                NormPolicy::BN
            }
        })
        .collect();
    (encoder, decoder)
}

/// Same layer exemptions as [`ibn_schedule`], one policy everywhere else.
pub fn uniform_schedule(depth: usize, policy: NormPolicy) -> (Vec<NormPolicy>, Vec<NormPolicy>) {
    let encoder = (0..depth)
        .map(|i| if i == 0 || i == depth - 1 { NormPolicy::NONE } else { policy })
        .collect();
    (encoder, vec![policy; depth - 1])
}

#[derive(Clone, Debug)]
struct Block<F> {
    conv: Conv2d<F>,
    norm: NormLayer<F>,
}

/// The U-Net and its learnable parameters.
#[derive(Clone, Debug)]
pub struct Generator<F> {
    cfg: GeneratorConfig,
    encoder: Vec<Block<F>>,
    decoder: Vec<Block<F>>,
    output: Conv2d<F>,
}

/// Structural summary of one block, for inspection and tests.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockInfo {
    pub in_channels: usize,
    pub out_channels: usize,
    pub norm: crate::nn::NormKind,
    pub spectral: bool,
}

impl<F: Scalar> Generator<F> {
    pub fn new<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let depth = cfg.depth();
        let conv = |kind, in_channels, out_channels, bias| ConvSpec {
            kind,
            in_channels,
            out_channels,
            kernel: cfg.kernel,
            stride: cfg.stride,
            pad: (cfg.kernel - cfg.stride) / 2,
            bias,
            spectral: cfg.spectral_norm,
        };
        let mut encoder = Vec::with_capacity(depth);
        let mut in_ch = 1;
        for (i, (&out_ch, &policy)) in cfg.encoder_channels.iter().zip(&cfg.encoder_norms).enumerate() {
            let prefix = format!("gen.enc{i}");
            let spec = conv(ConvKind::Forward, in_ch, out_ch, policy.kind == crate::nn::NormKind::None);
            encoder.push(Block {
                conv: Conv2d::new(&format!("{prefix}.conv"), spec, rng),
                norm: NormLayer::build(&prefix, policy, out_ch, rng)?,
            });
            in_ch = out_ch;
        }
        let mut decoder = Vec::with_capacity(depth - 1);
        for (j, (&out_ch, &policy)) in cfg.decoder_channels.iter().zip(&cfg.decoder_norms).enumerate() {
            let prefix = format!("gen.dec{j}");
            let spec = conv(ConvKind::Transposed, in_ch, out_ch, policy.kind == crate::nn::NormKind::None);
            decoder.push(Block {
                conv: Conv2d::new(&format!("{prefix}.conv"), spec, rng),
                norm: NormLayer::build(&prefix, policy, out_ch, rng)?,
            });
            in_ch = out_ch + cfg.encoder_channels[cfg.skip_partner(j)];
        }
        let output = Conv2d::new("gen.out", conv(ConvKind::Transposed, in_ch, 2, true), rng);
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            decoder,
            output,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn encoder_info(&self) -> Vec<BlockInfo> {
        self.encoder.iter().map(block_info).collect()
    }

    pub fn decoder_info(&self) -> Vec<BlockInfo> {
        self.decoder.iter().map(block_info).collect()
    }

    /// Compact channel plan, e.g. `e64:e128-d64`.
    pub fn structure(&self) -> String {
        let enc: Vec<String> = self.encoder_info().iter().map(|b| format!("e{}", b.out_channels)).collect();
        let dec: Vec<String> = self.decoder_info().iter().map(|b| format!("d{}", b.out_channels)).collect();
        format!("{}-{}", enc.join(":"), dec.join(":"))
    }

    pub fn output_info(&self) -> BlockInfo {
        BlockInfo {
            in_channels: self.output.spec.in_channels,
            out_channels: self.output.spec.out_channels,
            norm: crate::nn::NormKind::None,
            spectral: self.output.spectral.is_some(),
        }
    }

    /// Every convolution of the network, encoder first.
    pub fn convs(&self) -> impl Iterator<Item = &Conv2d<F>> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .map(|b| &b.conv)
            .chain(std::iter::once(&self.output))
    }

    pub fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv2d<F>> {
        self.encoder
            .iter_mut()
            .chain(&mut self.decoder)
            .map(|b| &mut b.conv)
            .chain(std::iter::once(&mut self.output))
    }

    fn dropout_mask(&self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<F> {
        let keep = 1.0 - self.cfg.dropout_rate;
        let scale = F::lit(1.0 / keep);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            if rng.random::<f64>() < keep {
                scale
            } else {
                F::zero()
            }
        })
    }

    /// Maps `[B, 1, S, S]` lightness to `[B, 2, S, S]` chrominance in (−1, 1).
    ///
    /// Dropout (the generator's noise source) is drawn from `seed` and is
    /// active in training mode, or in eval mode when configured.
    pub fn forward<'t>(&mut self, ctx: &mut Ctx<'t, F>, l_norm: Var<'t, F>, seed: u64) -> Result<Var<'t, F>> {
        let sh = l_norm.shape();
        let s = self.cfg.input_size;
        if sh.len() != 4 || sh[1] != 1 || sh[2] != s || sh[3] != s {
            return shape_err(format!("generator expects [B, 1, {s}, {s}], got {sh:?}"));
        }
        let dropout_on = ctx.training() || self.cfg.eval_dropout;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slope = F::lit(self.cfg.leaky_slope);

        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = l_norm;
        for block in &mut self.encoder {
            let z = block.conv.forward(ctx, h);
            h = block.norm.forward(ctx, z)?.leaky_relu(slope);
            skips.push(h);
        }
        for j in 0..self.decoder.len() {
            let block = &mut self.decoder[j];
            let z = block.conv.forward(ctx, h);
            let mut z = block.norm.forward(ctx, z)?;
            if dropout_on && self.cfg.dropout_layers.contains(&j) && self.cfg.dropout_rate > 0.0 {
                let mask = self.dropout_mask(&z.shape(), &mut rng);
                z = z.mul_const(mask);
            }
            let partner = skips[self.cfg.skip_partner(j)];
            h = Var::concat_channels(&[z.relu(), partner]);
        }
        Ok(self.output.forward(ctx, h).tanh())
    }

    /// Forward pass on a detached tape, returning the chrominance tensor.
    pub fn infer(&mut self, l_norm: &Tensor<F>, mode: Mode, seed: u64) -> Result<Tensor<F>> {
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, mode, false);
        let x = tape.constant(l_norm.clone());
        let y = self.forward(&mut ctx, x, seed)?;
        Ok((*y.value()).clone())
    }
}

fn block_info<F: Scalar>(b: &Block<F>) -> BlockInfo {
    BlockInfo {
        in_channels: b.conv.spec.in_channels,
        out_channels: b.conv.spec.out_channels,
        norm: b.norm.kind(),
        spectral: b.conv.spectral.is_some(),
    }
}

impl<F: Scalar> Module<F> for Generator<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>)) {
        for b in self.encoder.iter().chain(&self.decoder) {
            b.conv.visit_params(f);
            b.norm.visit_params(f);
        }
        self.output.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        for b in self.encoder.iter_mut().chain(&mut self.decoder) {
            b.conv.visit_params_mut(f);
            b.norm.visit_params_mut(f);
        }
        self.output.visit_params_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Param<F>)) {
        for b in self.encoder.iter().chain(&self.decoder) {
            b.conv.visit_buffers(f);
            b.norm.visit_buffers(f);
        }
        self.output.visit_buffers(f);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        for b in self.encoder.iter_mut().chain(&mut self.decoder) {
            b.conv.visit_buffers_mut(f);
            b.norm.visit_buffers_mut(f);
        }
        self.output.visit_buffers_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NormKind;

    #[test]
    fn default_plan() {
        let cfg = GeneratorConfig::default();
        assert_eq!(cfg.encoder_channels, DEFAULT_ENCODER_CHANNELS);
        assert_eq!(cfg.decoder_channels, DEFAULT_DECODER_CHANNELS);
        assert_eq!(cfg.dropout_layers, vec![0, 1, 2]);
        cfg.validate().unwrap();
    }

    #[test]
    fn truncated_plans_stay_symmetric() {
        let cfg = GeneratorConfig::for_image_size(64);
        assert_eq!(cfg.encoder_channels, vec![64, 128, 256, 512, 512, 512]);
        assert_eq!(cfg.decoder_channels, vec![512, 512, 256, 128, 64]);
        cfg.validate().unwrap();
        assert_eq!(GeneratorConfig::for_image_size(128).depth(), 7);
        assert_eq!(GeneratorConfig::for_image_size(512).depth(), 7);
    }

    #[test]
    fn indivisible_size_is_rejected() {
        let mut cfg = GeneratorConfig::default();
        cfg.input_size = 192;
        assert!(cfg.validate().is_err());
        cfg.input_size = 64;
        assert!(cfg.validate().is_err());
        cfg.input_size = 128;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn default_schedule_placement() {
        let (enc, dec) = ibn_schedule(7);
        let kinds: Vec<_> = enc.iter().map(|p| p.kind).collect();
        use NormKind::*;
        assert_eq!(kinds, vec![None, Ibn, Ibn, Ibn, BatchNorm, BatchNorm, None]);
        let kinds: Vec<_> = dec.iter().map(|p| p.kind).collect();
        assert_eq!(kinds, vec![BatchNorm, BatchNorm, Ibn, Ibn, Ibn, BatchNorm]);
    }
}
