//! Frozen feature extractors for the perceptual distance, and a
//! differentiable conversion from network-range Lab to sRGB.

use std::path::Path;

use ndarray::{ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tensor, Var};
use crate::checkpoint::TensorFile;
use crate::colorspace::{
    lab_f_inv, lab_f_inv_deriv, linear_to_srgb, linear_to_srgb_deriv, AB_RANGE, L_MAX, WHITE_D65, XYZ_TO_RGB,
};
use crate::error::{shape_err, Error, Result};
use crate::nn::gaussian;
use crate::scalar::Scalar;

/// A frozen network exposing intermediate activations ("taps").
pub trait FeatureExtractor<F: Scalar> {
    fn n_taps(&self) -> usize;

    /// Smallest square input side the extractor accepts.
    fn min_input_size(&self) -> usize;

    /// Activations of every tap for an sRGB batch `[B, 3, H, W]` in [0, 1].
    /// Weights enter the graph as constants; gradients flow to the input only.
    fn features<'t>(&self, rgb: Var<'t, F>) -> Result<Vec<Var<'t, F>>>;
}

/// 3×3 convolution with bias followed by ReLU.
#[derive(Clone, Debug)]
struct FrozenConv<F> {
    weight: Tensor<F>,
    bias: Tensor<F>,
}

impl<F: Scalar> FrozenConv<F> {
    fn forward<'t>(&self, x: Var<'t, F>) -> Var<'t, F> {
        let tape = x.tape();
        x.conv2d(tape.constant(self.weight.clone()), 1, 1)
            .add_channel_bias(tape.constant(self.bias.clone()))
            .relu()
    }
}

/// Stages of 3×3 conv+ReLU layers separated by 2×2 max pooling; the first
/// activation of each stage is a tap.
#[derive(Clone, Debug)]
struct StagedNet<F> {
    stages: Vec<Vec<FrozenConv<F>>>,
}

impl<F: Scalar> StagedNet<F> {
    fn check_input(&self, sh: &[usize]) -> Result<()> {
        let min = 1 << (self.stages.len() - 1);
        if sh.len() != 4 || sh[1] != 3 || sh[2] < min || sh[3] < min {
            return shape_err(format!("feature extractor expects [B, 3, >={min}, >={min}], got {sh:?}"));
        }
        Ok(())
    }

    fn taps<'t>(&self, mut h: Var<'t, F>) -> Vec<Var<'t, F>> {
        let mut taps = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate() {
            if s > 0 {
                h = h.max_pool2();
            }
            for (i, conv) in stage.iter().enumerate() {
                h = conv.forward(h);
                if i == 0 {
                    taps.push(h);
                }
            }
        }
        taps
    }
}

/// Small random convolutional stack with five taps, reproducible from a
/// seed. Exercises the perceptual metric without pretrained weights.
#[derive(Clone, Debug)]
pub struct SeededConvStack<F> {
    net: StagedNet<F>,
    seed: u64,
}

impl<F: Scalar> SeededConvStack<F> {
    pub const CHANNELS: [usize; 5] = [8, 16, 16, 32, 32];

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_ch = 3;
        let stages = Self::CHANNELS
            .iter()
            .map(|&out| {
                let std = (2.0 / (9 * in_ch) as f64).sqrt();
                let conv = FrozenConv {
                    weight: gaussian(&[out, in_ch, 3, 3], 0.0, std, &mut rng),
                    bias: gaussian(&[out], 0.0, 0.1, &mut rng),
                };
                in_ch = out;
                vec![conv]
            })
            .collect();
        Self {
            net: StagedNet { stages },
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `(weight [out, in, 3, 3], bias [out])` of stage `i`.
    pub fn layer(&self, i: usize) -> (&Tensor<F>, &Tensor<F>) {
        let c = &self.net.stages[i][0];
        (&c.weight, &c.bias)
    }
}

impl<F: Scalar> FeatureExtractor<F> for SeededConvStack<F> {
    fn n_taps(&self) -> usize {
        self.net.stages.len()
    }

    fn min_input_size(&self) -> usize {
        1 << (self.net.stages.len() - 1)
    }

    fn features<'t>(&self, rgb: Var<'t, F>) -> Result<Vec<Var<'t, F>>> {
        self.net.check_input(&rgb.shape())?;
        Ok(self.net.taps(rgb))
    }
}

/// The 19-layer classification network truncated after `conv5_1`, tapping
/// `relu1_1`, `relu2_1`, `relu3_1`, `relu4_1` and `relu5_1`.
///
/// Weights are read from a tensor container holding `conv{s}_{i}.weight`
/// `[out, in, 3, 3]` and `conv{s}_{i}.bias` `[out]`. Inputs are sRGB in
/// [0, 1]; the usual per-channel ImageNet standardization is applied
/// internally.
#[derive(Clone, Debug)]
pub struct Vgg19<F> {
    net: StagedNet<F>,
}

impl<F: Scalar> Vgg19<F> {
    /// Convolutions per stage up to and including `conv5_1`.
    pub const LAYERS: [(usize, usize); 5] = [(2, 64), (2, 128), (4, 256), (4, 512), (1, 512)];
    pub const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
    pub const STD: [f64; 3] = [0.229, 0.224, 0.225];

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_tensors(&TensorFile::load(path)?)
    }

    pub fn from_tensors(file: &TensorFile<F>) -> Result<Self> {
        let mut in_ch = 3;
        let mut stages = Vec::new();
        for (s, &(count, out)) in Self::LAYERS.iter().enumerate() {
            let mut stage = Vec::new();
            for i in 0..count {
                let name = format!("conv{}_{}", s + 1, i + 1);
                let fetch = |suffix: &str, shape: &[usize]| -> Result<Tensor<F>> {
                    let key = format!("{name}.{suffix}");
                    let t = file
                        .get(&key)
                        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                    if t.shape() != shape {
                        return Err(Error::Checkpoint(format!(
                            "{key} has shape {:?}, expected {shape:?}",
                            t.shape()
                        )));
                    }
                    Ok(t.clone())
                };
                stage.push(FrozenConv {
                    weight: fetch("weight", &[out, in_ch, 3, 3])?,
                    bias: fetch("bias", &[out])?,
                });
                in_ch = out;
            }
            stages.push(stage);
        }
        Ok(Self {
            net: StagedNet { stages },
        })
    }
}

impl<F: Scalar> FeatureExtractor<F> for Vgg19<F> {
    fn n_taps(&self) -> usize {
        self.net.stages.len()
    }

    fn min_input_size(&self) -> usize {
        16
    }

    fn features<'t>(&self, rgb: Var<'t, F>) -> Result<Vec<Var<'t, F>>> {
        let sh = rgb.shape();
        self.net.check_input(&sh)?;
        let tape = rgb.tape();
        let mut inv_std = ArrayD::zeros(IxDyn(&sh));
        for c in 0..3 {
            inv_std.index_axis_mut(Axis(1), c).fill(F::lit(1.0 / Self::STD[c]));
        }
        let shift = ArrayD::from_shape_fn(IxDyn(&[3]), |i| F::lit(-Self::MEAN[i[0]] / Self::STD[i[0]]));
        let x = rgb.mul_const(inv_std).add_channel_bias(tape.constant(shift));
        Ok(self.net.taps(x))
    }
}

/// Network-range lightness `[B, 1, H, W]` and chrominance `[B, 2, H, W]` to
/// encoded sRGB `[B, 3, H, W]` in [0, 1].
///
/// Linear RGB is clipped to [0, 1] before encoding; the gradient of a
/// clipped channel is zero.
pub fn lab_norm_to_srgb<'t, F: Scalar>(l_norm: Var<'t, F>, ab_norm: Var<'t, F>) -> Result<Var<'t, F>> {
    let (ls, abs) = (l_norm.shape(), ab_norm.shape());
    if ls.len() != 4 || ls[1] != 1 || abs.len() != 4 || abs[1] != 2 || ls[0] != abs[0] || ls[2..] != abs[2..] {
        return shape_err(format!("expected [B,1,H,W] and [B,2,H,W], got {ls:?} and {abs:?}"));
    }
    let lab = Var::concat_channels(&[l_norm, ab_norm]);
    let x = lab.value();
    let (b, h, w) = (ls[0], ls[2], ls[3]);
    let plane = h * w;
    let xs = x.as_standard_layout().into_owned();
    let xs = xs.as_slice().expect("contiguous");
    let mut out = vec![F::zero(); xs.len()];
    // d(rgb_c)/d(input_k) per pixel, row-major 3×3.
    let mut jac = vec![[0.0f64; 9]; b * plane];
    let units = [L_MAX / 2.0, AB_RANGE, AB_RANGE];
    for n in 0..b {
        for p in 0..plane {
            let at = |c: usize| n * 3 * plane + c * plane + p;
            let l = (xs[at(0)].as_f64() + 1.0) * units[0];
            let (a, bb) = (xs[at(1)].as_f64() * units[1], xs[at(2)].as_f64() * units[2]);
            let fy = (l + 16.0) / 116.0;
            let f = [fy + a / 500.0, fy, fy - bb / 200.0];
            // df_i / d(L, a, b)
            let df = [
                [1.0 / 116.0, 1.0 / 500.0, 0.0],
                [1.0 / 116.0, 0.0, 0.0],
                [1.0 / 116.0, 0.0, -1.0 / 200.0],
            ];
            let xyz: [f64; 3] = std::array::from_fn(|i| WHITE_D65[i] * lab_f_inv(f[i]));
            let dxyz: [f64; 3] = std::array::from_fn(|i| WHITE_D65[i] * lab_f_inv_deriv(f[i]));
            let j = &mut jac[n * plane + p];
            for c in 0..3 {
                let lin: f64 = (0..3).map(|i| XYZ_TO_RGB[c][i] * xyz[i]).sum();
                let clipped = lin.clamp(0.0, 1.0);
                out[at(c)] = F::lit(linear_to_srgb(clipped));
                if lin > 0.0 && lin < 1.0 {
                    let gain = linear_to_srgb_deriv(lin);
                    for k in 0..3 {
                        let d: f64 = (0..3).map(|i| XYZ_TO_RGB[c][i] * dxyz[i] * df[i][k]).sum();
                        j[c * 3 + k] = gain * d * units[k];
                    }
                }
            }
        }
    }
    let y = ArrayD::from_shape_vec(IxDyn(&[b, 3, h, w]), out).expect("rgb shape");
    Ok(lab.tape().apply(y, &[lab], move |g, _| {
        let gs = g.as_standard_layout();
        let gs = gs.as_slice().expect("contiguous");
        let mut dx = vec![F::zero(); gs.len()];
        for n in 0..b {
            for p in 0..plane {
                let j = &jac[n * plane + p];
                for k in 0..3 {
                    let mut acc = 0.0;
                    for c in 0..3 {
                        acc += gs[n * 3 * plane + c * plane + p].as_f64() * j[c * 3 + k];
                    }
                    dx[n * 3 * plane + k * plane + p] = F::lit(acc);
                }
            }
        }
        vec![Some(ArrayD::from_shape_vec(IxDyn(&[b, 3, h, w]), dx).expect("grad shape"))]
    }))
}
