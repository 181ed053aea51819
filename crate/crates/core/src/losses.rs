//! Adversarial and regression objectives.
//!
//! The discriminator minimizes, per scale, the mean over patches of
//! `−[ln σ(real) + ln(1 − σ(fake))]`; the generator minimizes the
//! non-saturating `−ln σ(fake)` plus `λ · mean|Δab|`. Per-scale terms are
//! summed. Everything is computed on logits through `softplus`, using
//! `−ln σ(x) = softplus(−x)` and `−ln(1 − σ(x)) = softplus(x)`.

use crate::autodiff::{Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::perceptual::FeatureExtractor;
use crate::scalar::Scalar;

pub const DEFAULT_LAMBDA: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// λ, weight of the L1 regression term.
    pub lambda_l1: f64,
    pub n_scales: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_l1: DEFAULT_LAMBDA,
            n_scales: crate::discriminator::DEFAULT_SCALES,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l1 >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda_l1)));
        }
        if self.n_scales == 0 {
            return Err(Error::Config("at least one discriminator scale is required".into()));
        }
        Ok(())
    }
}

/// Loss values of one scale.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScaleLoss {
    pub d_loss: f64,
    pub g_adv: f64,
}

/// Values of one training step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    /// Discriminator objective as minimized.
    pub d_loss: f64,
    /// Non-saturating adversarial term of the generator.
    pub g_adv: f64,
    /// Mean absolute chrominance error, before λ.
    pub g_l1: f64,
    /// `g_adv + λ·g_l1` (plus the perceptual term when enabled).
    pub g_total: f64,
    /// Perceptual term added to the generator objective, 0 when disabled.
    pub g_perc: f64,
    pub per_scale: Vec<ScaleLoss>,
}

/// Discriminator loss summed over scales, with per-scale values.
pub fn discriminator_loss<'t, F: Scalar>(
    real_logits: &[Var<'t, F>],
    fake_logits: &[Var<'t, F>],
) -> Result<(Var<'t, F>, Vec<f64>)> {
    if real_logits.len() != fake_logits.len() || real_logits.is_empty() {
        return shape_err(format!(
            "discriminator loss needs equal non-empty scale lists, got {} real and {} fake",
            real_logits.len(),
            fake_logits.len()
        ));
    }
    let mut total: Option<Var<'t, F>> = None;
    let mut per_scale = Vec::with_capacity(real_logits.len());
    for (&real, &fake) in real_logits.iter().zip(fake_logits) {
        let term = real.neg().softplus().mean().add(fake.softplus().mean());
        per_scale.push(term.item().as_f64());
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    Ok((total.expect("non-empty"), per_scale))
}

/// Non-saturating adversarial term summed over scales, with per-scale values.
pub fn generator_adversarial_loss<'t, F: Scalar>(fake_logits: &[Var<'t, F>]) -> Result<(Var<'t, F>, Vec<f64>)> {
    let Some((&first, rest)) = fake_logits.split_first() else {
        return shape_err("generator loss needs at least one scale");
    };
    let term = |v: Var<'t, F>| v.neg().softplus().mean();
    let first = term(first);
    let mut per_scale = vec![first.item().as_f64()];
    let mut total = first;
    for &logits in rest {
        let t = term(logits);
        per_scale.push(t.item().as_f64());
        total = total.add(t);
    }
    Ok((total, per_scale))
}

/// Generator objective pieces: `(total, adversarial, l1)`.
pub struct GeneratorLoss<'t, F: Scalar> {
    pub total: Var<'t, F>,
    pub adversarial: Var<'t, F>,
    pub l1: Var<'t, F>,
    pub per_scale: Vec<f64>,
}

pub fn generator_loss<'t, F: Scalar>(
    fake_logits: &[Var<'t, F>],
    fake_ab: Var<'t, F>,
    real_ab: Var<'t, F>,
    cfg: &LossConfig,
) -> Result<GeneratorLoss<'t, F>> {
    cfg.validate()?;
    if fake_ab.shape() != real_ab.shape() {
        return shape_err(format!(
            "generated chrominance {:?} and target {:?} differ",
            fake_ab.shape(),
            real_ab.shape()
        ));
    }
    let (adversarial, per_scale) = generator_adversarial_loss(fake_logits)?;
    let l1 = fake_ab.mean_abs_diff(real_ab);
    let total = adversarial.add(l1.scale(F::lit(cfg.lambda_l1)));
    Ok(GeneratorLoss {
        total,
        adversarial,
        l1,
        per_scale,
    })
}

/// Reduction applied per feature tap of the perceptual distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PerceptualNorm {
    /// `(1/Nᵢ) Σ|Δ|`.
    #[default]
    L1,
    /// `(1/Nᵢ) (Σ|Δ|)²`.
    SquaredL1,
}

/// `(1/L) Σᵢ (1/Nᵢ) ‖Fᵢ(x) − Fᵢ(y)‖` over any number of taps `L`.
pub fn perceptual_distance<'t, F: Scalar>(
    real: &[Var<'t, F>],
    fake: &[Var<'t, F>],
    norm: PerceptualNorm,
) -> Result<Var<'t, F>> {
    if real.len() != fake.len() || real.is_empty() {
        return shape_err(format!("feature tap counts differ: {} vs {}", real.len(), fake.len()));
    }
    let mut total: Option<Var<'t, F>> = None;
    for (&r, &f) in real.iter().zip(fake) {
        if r.shape() != f.shape() {
            return shape_err(format!("feature shapes differ: {:?} vs {:?}", r.shape(), f.shape()));
        }
        let n = F::lit(r.value().len() as f64);
        let term = match norm {
            PerceptualNorm::L1 => r.mean_abs_diff(f),
            PerceptualNorm::SquaredL1 => r.mean_abs_diff(f).scale(n).square().scale(F::one() / n),
        };
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    Ok(total.expect("non-empty").scale(F::one() / F::lit(real.len() as f64)))
}

/// Number of feature taps the perceptual loss requires.
pub const PERCEPTUAL_TAPS: usize = 5;

/// Perceptual distance between two sRGB batches through a five-tap
/// extractor. `real_rgb` is treated as a fixed target.
pub fn perceptual_loss_var<'t, F: Scalar>(
    extractor: &dyn FeatureExtractor<F>,
    real_rgb: Var<'t, F>,
    fake_rgb: Var<'t, F>,
    norm: PerceptualNorm,
) -> Result<Var<'t, F>> {
    if extractor.n_taps() != PERCEPTUAL_TAPS {
        return shape_err(format!(
            "perceptual loss needs {PERCEPTUAL_TAPS} feature taps, extractor has {}",
            extractor.n_taps()
        ));
    }
    if real_rgb.shape() != fake_rgb.shape() {
        return shape_err(format!("images differ: {:?} vs {:?}", real_rgb.shape(), fake_rgb.shape()));
    }
    let real: Vec<_> = extractor.features(real_rgb.detach())?.iter().map(|v| v.detach()).collect();
    let fake = extractor.features(fake_rgb)?;
    perceptual_distance(&real, &fake, norm)
}

/// Value of [`perceptual_loss_var`] for two `[B, 3, H, W]` batches in [0, 1].
pub fn perceptual_loss<F: Scalar>(
    extractor: &dyn FeatureExtractor<F>,
    real_rgb: &Tensor<F>,
    fake_rgb: &Tensor<F>,
    norm: PerceptualNorm,
) -> Result<f64> {
    let tape = crate::autodiff::Tape::new();
    let loss = perceptual_loss_var(extractor, tape.constant(real_rgb.clone()), tape.constant(fake_rgb.clone()), norm)?;
    Ok(loss.item().as_f64())
}

/// Value-only variants for inspection and metrics.
pub mod values {
    use super::*;
    use crate::autodiff::Tape;

    fn constants<'t, F: Scalar>(tape: &'t Tape<F>, xs: &[Tensor<F>]) -> Vec<Var<'t, F>> {
        xs.iter().map(|x| tape.constant(x.clone())).collect()
    }

    pub fn discriminator_loss<F: Scalar>(real: &[Tensor<F>], fake: &[Tensor<F>]) -> Result<f64> {
        let tape = Tape::new();
        let (loss, _) = super::discriminator_loss(&constants(&tape, real), &constants(&tape, fake))?;
        Ok(loss.item().as_f64())
    }

    /// `(g_total, g_adv, g_l1)`.
    pub fn generator_loss<F: Scalar>(
        fake_logits: &[Tensor<F>],
        fake_ab: &Tensor<F>,
        real_ab: &Tensor<F>,
        cfg: &LossConfig,
    ) -> Result<(f64, f64, f64)> {
        let tape = Tape::new();
        let g = super::generator_loss(
            &constants(&tape, fake_logits),
            tape.constant(fake_ab.clone()),
            tape.constant(real_ab.clone()),
            cfg,
        )?;
        Ok((g.total.item().as_f64(), g.adversarial.item().as_f64(), g.l1.item().as_f64()))
    }

    pub fn perceptual_distance<F: Scalar>(real: &[Tensor<F>], fake: &[Tensor<F>], norm: PerceptualNorm) -> Result<f64> {
        let tape = Tape::new();
        Ok(super::perceptual_distance(&constants(&tape, real), &constants(&tape, fake), norm)?
            .item()
            .as_f64())
    }
}
