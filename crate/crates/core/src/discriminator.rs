//! Conditional PatchGAN discriminator and its multi-scale pyramid.
//!
//! Input is the (1 + 2)-channel concatenation of lightness and chrominance.
//! Blocks are 4×4 convolutions with strides (2, 2, 2, 1), normalization and
//! LeakyReLU(0.2); a stride-1 4×4 head emits one raw logit per patch. With
//! these strides each logit sees a 70×70 input window.

use rand::Rng;

use crate::autodiff::{conv_output_size, Var};
use crate::error::{shape_err, Error, Result};
use crate::generator::LEAKY_SLOPE;
use crate::nn::{Conv2d, ConvKind, ConvSpec, Ctx, Module, NormKind, NormLayer, NormPolicy, Param};
use crate::scalar::Scalar;

pub const DEFAULT_CHANNELS: [usize; 4] = [64, 128, 256, 512];
pub const DEFAULT_STRIDES: [usize; 4] = [2, 2, 2, 1];
pub const DEFAULT_SCALES: usize = 3;
/// Lightness plus two chrominance channels.
pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub strides: Vec<usize>,
    pub norms: Vec<NormPolicy>,
    pub n_scales: usize,
    pub spectral_norm: bool,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: DEFAULT_CHANNELS.to_vec(),
            kernel: 4,
            strides: DEFAULT_STRIDES.to_vec(),
            norms: ibn_schedule(),
            n_scales: DEFAULT_SCALES,
            spectral_norm: true,
            leaky_slope: LEAKY_SLOPE,
        }
    }
}

/// No normalization on block 0, IBN on block 1, batch normalization after.
pub fn ibn_schedule() -> Vec<NormPolicy> {
    vec![NormPolicy::NONE, NormPolicy::IBN, NormPolicy::BN, NormPolicy::BN]
}

/// Block 0 unnormalized, `policy` on the rest.
pub fn uniform_schedule(blocks: usize, policy: NormPolicy) -> Vec<NormPolicy> {
    (0..blocks).map(|i| if i == 0 { NormPolicy::NONE } else { policy }).collect()
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("discriminator needs at least one block".into()));
        }
        if self.strides.len() != self.channels.len() || self.norms.len() != self.channels.len() {
            return Err(Error::Config(format!(
                "discriminator has {} blocks but {} strides and {} norms",
                self.channels.len(),
                self.strides.len(),
                self.norms.len()
            )));
        }
        if self.n_scales == 0 {
            return Err(Error::Config("discriminator needs at least one scale".into()));
        }
        Ok(())
    }

    fn pad(&self) -> usize {
        1
    }

    /// Compact channel plan of the strided blocks, e.g. `e64:e128`.
    pub fn structure(&self) -> String {
        self.channels.iter().map(|c| format!("e{c}")).collect::<Vec<_>>().join(":")
    }

    /// Input window seen by one output logit.
    pub fn receptive_field(&self) -> usize {
        let mut rf = self.kernel;
        for &s in self.strides.iter().rev() {
            rf = (rf - 1) * s + self.kernel;
        }
        rf
    }

    /// Logit-map side for a square input, `None` when the input is too small.
    pub fn output_size(&self, input: usize) -> Option<usize> {
        let mut side = input;
        for &s in &self.strides {
            side = conv_output_size(side, self.kernel, s, self.pad())?;
        }
        conv_output_size(side, self.kernel, 1, self.pad()).filter(|&n| n > 0)
    }

    /// Smallest input side producing at least one logit.
    pub fn min_input_size(&self) -> usize {
        (1..).find(|&s| self.output_size(s).is_some()).expect("some size fits")
    }

    /// Input side at each scale for a full-resolution side `input`.
    pub fn scale_sizes(&self, input: usize) -> Vec<usize> {
        (0..self.n_scales).map(|n| input >> n).collect()
    }
}

#[derive(Clone, Debug)]
struct Block<F> {
    conv: Conv2d<F>,
    norm: NormLayer<F>,
}

/// One PatchGAN.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator<F> {
    cfg: DiscriminatorConfig,
    blocks: Vec<Block<F>>,
    head: Conv2d<F>,
}

impl<F: Scalar> PatchDiscriminator<F> {
    pub fn new<R: Rng + ?Sized>(prefix: &str, cfg: &DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.channels.len());
        let mut in_ch = INPUT_CHANNELS;
        for (i, ((&out_ch, &stride), &policy)) in cfg.channels.iter().zip(&cfg.strides).zip(&cfg.norms).enumerate() {
            let name = format!("{prefix}.block{i}");
            let spec = ConvSpec {
                kind: ConvKind::Forward,
                in_channels: in_ch,
                out_channels: out_ch,
                kernel: cfg.kernel,
                stride,
                pad: cfg.pad(),
                bias: policy.kind == NormKind::None,
                spectral: cfg.spectral_norm,
            };
            blocks.push(Block {
                conv: Conv2d::new(&format!("{name}.conv"), spec, rng),
                norm: NormLayer::build(&name, policy, out_ch, rng)?,
            });
            in_ch = out_ch;
        }
        let head = Conv2d::new(
            &format!("{prefix}.head"),
            ConvSpec {
                kind: ConvKind::Forward,
                in_channels: in_ch,
                out_channels: 1,
                kernel: cfg.kernel,
                stride: 1,
                pad: cfg.pad(),
                bias: true,
                spectral: cfg.spectral_norm,
            },
            rng,
        );
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn norm_kinds(&self) -> Vec<NormKind> {
        self.blocks.iter().map(|b| b.norm.kind()).collect()
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d<F>> {
        self.blocks.iter().map(|b| &b.conv).chain(std::iter::once(&self.head))
    }

    pub fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv2d<F>> {
        self.blocks.iter_mut().map(|b| &mut b.conv).chain(std::iter::once(&mut self.head))
    }

    /// `[B, 3, H, W]` → raw logits `[B, 1, h, w]`.
    pub fn forward<'t>(&mut self, ctx: &mut Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let sh = x.shape();
        if sh.len() != 4 || sh[1] != INPUT_CHANNELS {
            return shape_err(format!("discriminator expects [B, 3, H, W], got {sh:?}"));
        }
        if self.cfg.output_size(sh[2].min(sh[3])).is_none() {
            return shape_err(format!(
                "discriminator input {}x{} is smaller than the minimum {}",
                sh[2],
                sh[3],
                self.cfg.min_input_size()
            ));
        }
        let slope = F::lit(self.cfg.leaky_slope);
        let mut h = x;
        for block in &mut self.blocks {
            let z = block.conv.forward(ctx, h);
            h = block.norm.forward(ctx, z)?.leaky_relu(slope);
        }
        Ok(self.head.forward(ctx, h))
    }
}

fn visit_blocks<F: Scalar>(d: &PatchDiscriminator<F>, f: &mut dyn FnMut(&Param<F>), buffers: bool) {
    for b in &d.blocks {
        if buffers {
            b.conv.visit_buffers(f);
            b.norm.visit_buffers(f);
        } else {
            b.conv.visit_params(f);
            b.norm.visit_params(f);
        }
    }
    if buffers {
        d.head.visit_buffers(f);
    } else {
        d.head.visit_params(f);
    }
}

fn visit_blocks_mut<F: Scalar>(d: &mut PatchDiscriminator<F>, f: &mut dyn FnMut(&mut Param<F>), buffers: bool) {
    for b in &mut d.blocks {
        if buffers {
            b.conv.visit_buffers_mut(f);
            b.norm.visit_buffers_mut(f);
        } else {
            b.conv.visit_params_mut(f);
            b.norm.visit_params_mut(f);
        }
    }
    if buffers {
        d.head.visit_buffers_mut(f);
    } else {
        d.head.visit_params_mut(f);
    }
}

impl<F: Scalar> Module<F> for PatchDiscriminator<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>)) {
        visit_blocks(self, f, false);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        visit_blocks_mut(self, f, false);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Param<F>)) {
        visit_blocks(self, f, true);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        visit_blocks_mut(self, f, true);
    }
}

/// `N` independent PatchGANs; scale `n` sees the input average-pooled by 2ⁿ.
#[derive(Clone, Debug)]
pub struct MultiScaleDiscriminator<F> {
    cfg: DiscriminatorConfig,
    scales: Vec<PatchDiscriminator<F>>,
}

impl<F: Scalar> MultiScaleDiscriminator<F> {
    pub fn new<R: Rng + ?Sized>(cfg: &DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let scales = (0..cfg.n_scales)
            .map(|n| PatchDiscriminator::new(&format!("disc.scale{n}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { cfg: cfg.clone(), scales })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn n_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn scale(&self, n: usize) -> &PatchDiscriminator<F> {
        &self.scales[n]
    }

    pub fn scale_mut(&mut self, n: usize) -> &mut PatchDiscriminator<F> {
        &mut self.scales[n]
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d<F>> {
        self.scales.iter().flat_map(|d| d.convs())
    }

    /// Inputs to every scale: the concatenated volume pooled by 2ⁿ, zero
    /// padded symmetrically when smaller than the PatchGAN minimum.
    pub fn scale_inputs<'t>(&self, l_norm: Var<'t, F>, ab: Var<'t, F>) -> Result<Vec<Var<'t, F>>> {
        let (ls, abs) = (l_norm.shape(), ab.shape());
        if ls.len() != 4 || abs.len() != 4 || ls[1] != 1 || abs[1] != 2 {
            return shape_err(format!("expected [B,1,H,W] and [B,2,H,W], got {ls:?} and {abs:?}"));
        }
        if ls[0] != abs[0] || ls[2..] != abs[2..] {
            return shape_err(format!("lightness {ls:?} and chrominance {abs:?} disagree"));
        }
        let factor = 1usize << (self.scales.len() - 1);
        if ls[2] % factor != 0 || ls[3] % factor != 0 {
            return shape_err(format!(
                "input {}x{} is not divisible by {factor} for {} scales",
                ls[2],
                ls[3],
                self.scales.len()
            ));
        }
        let x = Var::concat_channels(&[l_norm, ab]);
        let min = self.cfg.min_input_size();
        Ok((0..self.scales.len())
            .map(|n| {
                let xn = x.avg_pool(1 << n);
                let side = ls[2].min(ls[3]) >> n;
                xn.pad_spatial(min.saturating_sub(side).div_ceil(2))
            })
            .collect())
    }

    /// One raw logit map per scale, ordered n = 0…N−1.
    pub fn forward<'t>(&mut self, ctx: &mut Ctx<'t, F>, l_norm: Var<'t, F>, ab: Var<'t, F>) -> Result<Vec<Var<'t, F>>> {
        let inputs = self.scale_inputs(l_norm, ab)?;
        self.scales
            .iter_mut()
            .zip(inputs)
            .map(|(d, x)| d.forward(ctx, x))
            .collect()
    }
}

impl<F: Scalar> Module<F> for MultiScaleDiscriminator<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>)) {
        self.scales.iter().for_each(|d| d.visit_params(f));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.scales.iter_mut().for_each(|d| d.visit_params_mut(f));
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Param<F>)) {
        self.scales.iter().for_each(|d| d.visit_buffers(f));
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.scales.iter_mut().for_each(|d| d.visit_buffers_mut(f));
    }
}
