//! Batch, instance and IBN (instance-batch split) normalization.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Ctx, Init, Module, Param};
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_IBN_FRACTION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[serde(rename = "bn")]
    BatchNorm,
    #[serde(rename = "in")]
    InstanceNorm,
    Ibn,
    None,
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::BatchNorm => "bn",
            NormKind::InstanceNorm => "in",
            NormKind::Ibn => "ibn",
            NormKind::None => "none",
        })
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bn" | "batch" => Ok(NormKind::BatchNorm),
            "in" | "instance" => Ok(NormKind::InstanceNorm),
            "ibn" => Ok(NormKind::Ibn),
            "none" | "-" => Ok(NormKind::None),
            other => Err(Error::Config(format!("unknown normalization kind `{other}`"))),
        }
    }
}

/// Normalization declared for one layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormPolicy {
    pub kind: NormKind,
    /// Fraction of channels routed through instance normalization when
    /// `kind` is [`NormKind::Ibn`].
    pub ibn_instance_fraction: f64,
}

impl NormPolicy {
    pub const fn new(kind: NormKind) -> Self {
        Self {
            kind,
            ibn_instance_fraction: DEFAULT_IBN_FRACTION,
        }
    }

    pub const NONE: NormPolicy = NormPolicy::new(NormKind::None);
    pub const BN: NormPolicy = NormPolicy::new(NormKind::BatchNorm);
    pub const IN: NormPolicy = NormPolicy::new(NormKind::InstanceNorm);
    pub const IBN: NormPolicy = NormPolicy::new(NormKind::Ibn);

    pub fn with_fraction(mut self, fraction: f64) -> Self {
        self.ibn_instance_fraction = fraction;
        self
    }

    /// Number of instance-normalized channels for a layer of width `channels`.
    pub fn instance_channels(&self, channels: usize) -> Result<usize> {
        let frac = self.ibn_instance_fraction;
        if !(frac > 0.0 && frac < 1.0) {
            return Err(Error::Config(format!("IBN fraction {frac} outside (0, 1)")));
        }
        let exact = frac * channels as f64;
        let split = exact.ceil() as usize;
        if (exact - exact.round()).abs() > 1e-9 || split == 0 || split >= channels {
            return Err(Error::Config(format!(
                "IBN fraction {frac} does not split {channels} channels into two integer groups"
            )));
        }
        Ok(split)
    }
}

impl Default for NormPolicy {
    fn default() -> Self {
        Self::NONE
    }
}

impl fmt::Display for NormPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)
    }
}

/// Statistics of one normalization group.
struct GroupStats<F> {
    mean: Vec<F>,
    var: Vec<F>,
}

/// Mean and biased variance per group, where a group is a channel
/// (`per_instance = false`) or a (sample, channel) pair.
fn group_stats<F: Scalar>(x: &[F], b: usize, c: usize, s: usize, per_instance: bool) -> GroupStats<F> {
    let groups = if per_instance { b * c } else { c };
    let count = F::lit((if per_instance { s } else { b * s }) as f64);
    let group_of = |bi: usize, ci: usize| if per_instance { bi * c + ci } else { ci };
    let mut mean = vec![F::zero(); groups];
    for bi in 0..b {
        for ci in 0..c {
            let block = &x[(bi * c + ci) * s..(bi * c + ci + 1) * s];
            let g = group_of(bi, ci);
            mean[g] = mean[g] + block.iter().fold(F::zero(), |acc, &v| acc + v);
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / count);
    let mut var = vec![F::zero(); groups];
    for bi in 0..b {
        for ci in 0..c {
            let block = &x[(bi * c + ci) * s..(bi * c + ci + 1) * s];
            let g = group_of(bi, ci);
            let m = mean[g];
            var[g] = var[g] + block.iter().fold(F::zero(), |acc, &v| acc + (v - m) * (v - m));
        }
    }
    var.iter_mut().for_each(|v| *v = *v / count);
    GroupStats { mean, var }
}

fn dims4(x: &ArrayD<impl Copy>) -> (usize, usize, usize) {
    let sh = x.shape();
    assert_eq!(sh.len(), 4, "normalizers expect NCHW volumes");
    (sh[0], sh[1], sh[2] * sh[3])
}

/// Normalizes with batch statistics (`per_instance = false`) or instance
/// statistics, then applies the per-channel affine map. Returns the output
/// and the group statistics.
fn normalize_op<'t, F: Scalar>(
    x: Var<'t, F>,
    gamma: Var<'t, F>,
    beta: Var<'t, F>,
    eps: F,
    per_instance: bool,
) -> (Var<'t, F>, Vec<F>, Vec<F>) {
    let xv = x.value();
    let (b, c, s) = dims4(&xv);
    let xs = xv.as_standard_layout().into_owned();
    let xs = xs.as_slice().expect("contiguous").to_vec();
    let stats = group_stats(&xs, b, c, s, per_instance);
    let gv = gamma.value();
    let bv = beta.value();
    assert_eq!(gv.shape(), &[c]);
    assert_eq!(bv.shape(), &[c]);
    let group_of = move |bi: usize, ci: usize| if per_instance { bi * c + ci } else { ci };
    let inv_std: Vec<F> = stats.var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![F::zero(); xs.len()];
    let mut y = vec![F::zero(); xs.len()];
    for bi in 0..b {
        for ci in 0..c {
            let g = group_of(bi, ci);
            let (m, is) = (stats.mean[g], inv_std[g]);
            let (ga, be) = (gv[ci], bv[ci]);
            let off = (bi * c + ci) * s;
            for k in off..off + s {
                xhat[k] = (xs[k] - m) * is;
                y[k] = ga * xhat[k] + be;
            }
        }
    }
    let shape = xv.shape().to_vec();
    let out = ArrayD::from_shape_vec(IxDyn(&shape), y).expect("norm shape");
    let count = F::lit((if per_instance { s } else { b * s }) as f64);
    let groups = inv_std.len();
    let var = x.tape().apply(out, &[x, gamma, beta], move |grad, needs| {
        let gs = grad.as_standard_layout();
        let gs = gs.as_slice().expect("contiguous");
        let mut sum_dy = vec![F::zero(); groups];
        let mut sum_dy_xhat = vec![F::zero(); groups];
        let mut dgamma = vec![F::zero(); c];
        let mut dbeta = vec![F::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let g = group_of(bi, ci);
                let off = (bi * c + ci) * s;
                let mut sd = F::zero();
                let mut sdx = F::zero();
                for k in off..off + s {
                    sd = sd + gs[k];
                    sdx = sdx + gs[k] * xhat[k];
                }
                sum_dy[g] = sum_dy[g] + sd;
                sum_dy_xhat[g] = sum_dy_xhat[g] + sdx;
                dbeta[ci] = dbeta[ci] + sd;
                dgamma[ci] = dgamma[ci] + sdx;
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![F::zero(); gs.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let g = group_of(bi, ci);
                    let coef = gv[ci] * inv_std[g] / count;
                    let off = (bi * c + ci) * s;
                    for k in off..off + s {
                        dx[k] = coef * (count * gs[k] - sum_dy[g] - xhat[k] * sum_dy_xhat[g]);
                    }
                }
            }
            ArrayD::from_shape_vec(IxDyn(&shape), dx).expect("dx shape")
        });
        vec![
            dx,
            needs[1].then(|| Array1::from(dgamma).into_dyn()),
            needs[2].then(|| Array1::from(dbeta).into_dyn()),
        ]
    });
    (var, stats.mean, stats.var)
}

/// Per-channel affine map `γ (x − μ)/√(σ² + ε) + β` with fixed μ, σ².
fn fixed_stats_op<'t, F: Scalar>(
    x: Var<'t, F>,
    gamma: Var<'t, F>,
    beta: Var<'t, F>,
    mean: &Tensor<F>,
    var: &Tensor<F>,
    eps: F,
) -> Var<'t, F> {
    let xv = x.value();
    let (b, c, s) = dims4(&xv);
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let mean: Vec<F> = mean.iter().copied().collect();
    let (gv, bv) = (gamma.value(), beta.value());
    let xs = xv.as_standard_layout().into_owned();
    let xs = xs.as_slice().expect("contiguous").to_vec();
    let mut y = vec![F::zero(); xs.len()];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * s;
            for k in off..off + s {
                y[k] = gv[ci] * (xs[k] - mean[ci]) * inv_std[ci] + bv[ci];
            }
        }
    }
    let shape = xv.shape().to_vec();
    let out = ArrayD::from_shape_vec(IxDyn(&shape), y).expect("norm shape");
    x.tape().apply(out, &[x, gamma, beta], move |grad, needs| {
        let gs = grad.as_standard_layout();
        let gs = gs.as_slice().expect("contiguous");
        let mut dx = vec![F::zero(); gs.len()];
        let mut dgamma = vec![F::zero(); c];
        let mut dbeta = vec![F::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                for k in off..off + s {
                    dx[k] = gs[k] * gv[ci] * inv_std[ci];
                    dgamma[ci] = dgamma[ci] + gs[k] * (xs[k] - mean[ci]) * inv_std[ci];
                    dbeta[ci] = dbeta[ci] + gs[k];
                }
            }
        }
        vec![
            needs[0].then(|| ArrayD::from_shape_vec(IxDyn(&shape), dx).expect("dx shape")),
            needs[1].then(|| Array1::from(dgamma).into_dyn()),
            needs[2].then(|| Array1::from(dbeta).into_dyn()),
        ]
    })
}

fn affine_params<F: Scalar, R: Rng + ?Sized>(prefix: &str, channels: usize, rng: &mut R) -> (Param<F>, Param<F>) {
    (
        Param::new(format!("{prefix}.scale"), Init::DCGAN_SCALE.tensor(&[channels], rng)),
        Param::new(format!("{prefix}.shift"), Init::Constant(0.0).tensor(&[channels], rng)),
    )
}

/// Batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm<F> {
    pub scale: Param<F>,
    pub shift: Param<F>,
    pub running_mean: Param<F>,
    pub running_var: Param<F>,
    pub momentum: f64,
    pub eps: f64,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new<R: Rng + ?Sized>(prefix: &str, channels: usize, rng: &mut R) -> Self {
        let (scale, shift) = affine_params(prefix, channels, rng);
        Self {
            scale,
            shift,
            running_mean: Param::new(format!("{prefix}.running_mean"), ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Param::new(format!("{prefix}.running_var"), ArrayD::ones(IxDyn(&[channels]))),
            momentum: BN_MOMENTUM,
            eps: NORM_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.value.len()
    }

    /// Training mode: batch statistics over (batch, H, W), running statistics
    /// updated. Eval mode: running statistics.
    pub fn forward<'t>(&mut self, ctx: &mut Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let sh = x.shape();
        check_channels(&sh, self.channels())?;
        let gamma = ctx.bind(&self.scale);
        let beta = ctx.bind(&self.shift);
        let eps = F::lit(self.eps);
        if !ctx.training() {
            return Ok(fixed_stats_op(
                x,
                gamma,
                beta,
                &self.running_mean.value,
                &self.running_var.value,
                eps,
            ));
        }
        if sh[0] < 2 {
            return Err(Error::Shape(
                "batch normalization in training mode needs a batch of at least 2".into(),
            ));
        }
        let (y, mean, var) = normalize_op(x, gamma, beta, eps, false);
        let n = (sh[0] * sh[2] * sh[3]) as f64;
        let unbias = F::lit(n / (n - 1.0).max(1.0));
        let m = F::lit(self.momentum);
        let keep = F::one() - m;
        for (i, (&mu, &v)) in mean.iter().zip(&var).enumerate() {
            let rm = &mut self.running_mean.value[[i]];
            *rm = keep * *rm + m * mu;
            let rv = &mut self.running_var.value[[i]];
            *rv = keep * *rv + m * v * unbias;
        }
        Ok(y)
    }
}

/// Instance normalization with a per-channel affine map and no running
/// statistics.
#[derive(Clone, Debug)]
pub struct InstanceNorm<F> {
    pub scale: Param<F>,
    pub shift: Param<F>,
    pub eps: f64,
}

impl<F: Scalar> InstanceNorm<F> {
    pub fn new<R: Rng + ?Sized>(prefix: &str, channels: usize, rng: &mut R) -> Self {
        let (scale, shift) = affine_params(prefix, channels, rng);
        Self {
            scale,
            shift,
            eps: NORM_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.value.len()
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let sh = x.shape();
        check_channels(&sh, self.channels())?;
        if sh[2] * sh[3] < 2 {
            return Err(Error::Shape(format!(
                "instance normalization needs at least 2 spatial positions, got {}x{}",
                sh[2], sh[3]
            )));
        }
        let gamma = ctx.bind(&self.scale);
        let beta = ctx.bind(&self.shift);
        Ok(normalize_op(x, gamma, beta, F::lit(self.eps), true).0)
    }
}

/// Instance normalization on the leading channels, batch normalization on
/// the rest, channel order preserved.
#[derive(Clone, Debug)]
pub struct Ibn<F> {
    pub instance: InstanceNorm<F>,
    pub batch: BatchNorm<F>,
}

impl<F: Scalar> Ibn<F> {
    pub fn new<R: Rng + ?Sized>(prefix: &str, channels: usize, fraction: f64, rng: &mut R) -> Result<Self> {
        let split = NormPolicy::IBN.with_fraction(fraction).instance_channels(channels)?;
        Ok(Self {
            instance: InstanceNorm::new(&format!("{prefix}.in"), split, rng),
            batch: BatchNorm::new(&format!("{prefix}.bn"), channels - split, rng),
        })
    }

    /// Index of the first batch-normalized channel.
    pub fn split(&self) -> usize {
        self.instance.channels()
    }

    pub fn forward<'t>(&mut self, ctx: &mut Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let sh = x.shape();
        let split = self.split();
        check_channels(&sh, split + self.batch.channels())?;
        let head = self.instance.forward(ctx, x.slice_channels(0, split))?;
        let tail = self.batch.forward(ctx, x.slice_channels(split, sh[1]))?;
        Ok(Var::concat_channels(&[head, tail]))
    }
}

fn check_channels(shape: &[usize], channels: usize) -> Result<()> {
    if shape.len() != 4 || shape[1] != channels {
        return Err(Error::Shape(format!(
            "normalizer for {channels} channels got input of shape {shape:?}"
        )));
    }
    Ok(())
}

/// A layer's normalizer, built from its [`NormPolicy`].
#[derive(Clone, Debug)]
pub enum NormLayer<F> {
    None,
    Batch(BatchNorm<F>),
    Instance(InstanceNorm<F>),
    Ibn(Ibn<F>),
}

impl<F: Scalar> NormLayer<F> {
    pub fn build<R: Rng + ?Sized>(prefix: &str, policy: NormPolicy, channels: usize, rng: &mut R) -> Result<Self> {
        Ok(match policy.kind {
            NormKind::None => NormLayer::None,
            NormKind::BatchNorm => NormLayer::Batch(BatchNorm::new(&format!("{prefix}.bn"), channels, rng)),
            NormKind::InstanceNorm => NormLayer::Instance(InstanceNorm::new(&format!("{prefix}.in"), channels, rng)),
            NormKind::Ibn => NormLayer::Ibn(Ibn::new(&format!("{prefix}.ibn"), channels, policy.ibn_instance_fraction, rng)?),
        })
    }

    pub fn kind(&self) -> NormKind {
        match self {
            NormLayer::None => NormKind::None,
            NormLayer::Batch(_) => NormKind::BatchNorm,
            NormLayer::Instance(_) => NormKind::InstanceNorm,
            NormLayer::Ibn(_) => NormKind::Ibn,
        }
    }

    pub fn forward<'t>(&mut self, ctx: &mut Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        match self {
            NormLayer::None => Ok(x),
            NormLayer::Batch(bn) => bn.forward(ctx, x),
            NormLayer::Instance(inn) => inn.forward(ctx, x),
            NormLayer::Ibn(ibn) => ibn.forward(ctx, x),
        }
    }
}

impl<F: Scalar> Module<F> for NormLayer<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>)) {
        match self {
            NormLayer::None => {}
            NormLayer::Batch(bn) => {
                f(&bn.scale);
                f(&bn.shift);
            }
            NormLayer::Instance(inn) => {
                f(&inn.scale);
                f(&inn.shift);
            }
            NormLayer::Ibn(ibn) => {
                f(&ibn.instance.scale);
                f(&ibn.instance.shift);
                f(&ibn.batch.scale);
                f(&ibn.batch.shift);
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        match self {
            NormLayer::None => {}
            NormLayer::Batch(bn) => {
                f(&mut bn.scale);
                f(&mut bn.shift);
            }
            NormLayer::Instance(inn) => {
                f(&mut inn.scale);
                f(&mut inn.shift);
            }
            NormLayer::Ibn(ibn) => {
                f(&mut ibn.instance.scale);
                f(&mut ibn.instance.shift);
                f(&mut ibn.batch.scale);
                f(&mut ibn.batch.shift);
            }
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Param<F>)) {
        match self {
            NormLayer::Batch(bn) | NormLayer::Ibn(Ibn { batch: bn, .. }) => {
                f(&bn.running_mean);
                f(&bn.running_var);
            }
            _ => {}
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        match self {
            NormLayer::Batch(bn) | NormLayer::Ibn(Ibn { batch: bn, .. }) => {
                f(&mut bn.running_mean);
                f(&mut bn.running_var);
            }
            _ => {}
        }
    }
}

/// Per-channel mean and biased variance of an NCHW volume over (batch, H, W).
pub fn channel_moments<F: Scalar>(x: &ArrayD<F>) -> (Vec<F>, Vec<F>) {
    let (b, c, s) = dims4(x);
    let xs = x.as_standard_layout();
    let st = group_stats(xs.as_slice().expect("contiguous"), b, c, s, false);
    (st.mean, st.var)
}

/// Convenience: sample `i` of a batch as its own batch of one.
pub fn sample<F: Scalar>(x: &ArrayD<F>, i: usize) -> ArrayD<F> {
    x.index_axis(Axis(0), i).insert_axis(Axis(0)).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::random_tensor;
    use crate::nn::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn unit_affine<F: Scalar>(scale: &mut Param<F>, shift: &mut Param<F>) {
        scale.value.fill(F::one());
        shift.value.fill(F::zero());
    }

    #[test]
    fn ibn_split_rules() {
        assert_eq!(NormPolicy::IBN.instance_channels(64).unwrap(), 32);
        assert!(NormPolicy::IBN.instance_channels(1).is_err());
        assert!(NormPolicy::IBN.with_fraction(0.3).instance_channels(64).is_err());
        assert_eq!(NormPolicy::IBN.with_fraction(0.25).instance_channels(64).unwrap(), 16);
        assert!(Ibn::<f64>::new("x", 1, 0.5, &mut rng()).is_err());
    }

    #[test]
    fn batch_norm_constant_input_is_zero() {
        let mut bn = BatchNorm::<f64>::new("bn", 3, &mut rng());
        unit_affine(&mut bn.scale, &mut bn.shift);
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, Mode::Train, false);
        let x = tape.constant(ArrayD::from_elem(IxDyn(&[2, 3, 4, 4]), 7.5));
        let y = bn.forward(&mut ctx, x).unwrap();
        assert!(y.value().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn batch_norm_rejects_single_sample_in_training() {
        let mut bn = BatchNorm::<f64>::new("bn", 3, &mut rng());
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, Mode::Train, false);
        let x = tape.constant(random_tensor(&[1, 3, 4, 4], 1));
        assert!(bn.forward(&mut ctx, x).is_err());
        let mut ctx = Ctx::new(&tape, Mode::Eval, false);
        assert!(bn.forward(&mut ctx, x).is_ok());
    }

    #[test]
    fn batch_norm_updates_running_stats() {
        let mut bn = BatchNorm::<f64>::new("bn", 2, &mut rng());
        let x = random_tensor(&[4, 2, 3, 3], 2);
        let (mean, var) = channel_moments(&x);
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, Mode::Train, false);
        bn.forward(&mut ctx, tape.constant(x)).unwrap();
        let n = 36.0;
        for c in 0..2 {
            assert!((bn.running_mean.value[[c]] - 0.1 * mean[c]).abs() < 1e-12);
            assert!((bn.running_var.value[[c]] - (0.9 + 0.1 * var[c] * n / (n - 1.0))).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_norm_rejects_single_pixel() {
        let inn = InstanceNorm::<f64>::new("in", 2, &mut rng());
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, Mode::Train, false);
        let x = tape.constant(random_tensor(&[2, 2, 1, 1], 1));
        assert!(inn.forward(&mut ctx, x).is_err());
    }

    #[test]
    fn norm_layer_kinds() {
        for (policy, kind) in [
            (NormPolicy::NONE, NormKind::None),
            (NormPolicy::BN, NormKind::BatchNorm),
            (NormPolicy::IN, NormKind::InstanceNorm),
            (NormPolicy::IBN, NormKind::Ibn),
        ] {
            assert_eq!(NormLayer::<f32>::build("n", policy, 8, &mut rng()).unwrap().kind(), kind);
        }
        assert_eq!("IBN".parse::<NormKind>().unwrap(), NormKind::Ibn);
        assert!("group".parse::<NormKind>().is_err());
    }
}
