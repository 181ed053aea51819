use rand::Rng;

use super::{Ctx, Init, Module, Param, SpectralState};
use crate::autodiff::Var;
use crate::scalar::Scalar;

/// Power iterations run on the initial weight so σ̂ starts close to σ.
pub const SN_WARMUP_ITERATIONS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// Strided cross-correlation (downsampling).
    Forward,
    /// Transposed convolution (upsampling).
    Transposed,
}

/// Geometry and options of one convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
    pub spectral: bool,
}

/// Convolution layer, optionally spectrally normalized. Weights are
/// `[out, in, k, k]` for both kinds.
#[derive(Clone, Debug)]
pub struct Conv2d<F> {
    pub spec: ConvSpec,
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    pub spectral: Option<SpectralState<F>>,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new<R: Rng + ?Sized>(prefix: &str, spec: ConvSpec, rng: &mut R) -> Self {
        let shape = [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel];
        let weight = Param::new(format!("{prefix}.weight"), Init::DCGAN.tensor(&shape, rng));
        let bias = spec
            .bias
            .then(|| Param::new(format!("{prefix}.bias"), Init::Constant(0.0).tensor(&[spec.out_channels], rng)));
        let spectral = spec.spectral.then(|| {
            let mut sn = SpectralState::new(format!("{prefix}.sn_u"), spec.out_channels, rng);
            sn.power_iterate(&weight.value, SN_WARMUP_ITERATIONS);
            sn
        });
        Self {
            spec,
            weight,
            bias,
            spectral,
        }
    }

    /// Current σ̂ of the raw weight, without advancing the iteration.
    pub fn effective_sigma(&self) -> Option<F> {
        self.spectral.as_ref().map(|sn| sn.sigma(&self.weight.value))
    }

    pub fn forward<'t>(&mut self, ctx: &mut Ctx<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        let mut w = ctx.bind(&self.weight);
        if let Some(sn) = &mut self.spectral {
            if ctx.training() {
                sn.power_iterate(&self.weight.value, sn.n_power_iterations);
            }
            let (_, v) = sn.sigma_and_v(&self.weight.value);
            w = w.spectral_normalized(sn.u(), v);
        }
        let y = match self.spec.kind {
            ConvKind::Forward => x.conv2d(w, self.spec.stride, self.spec.pad),
            ConvKind::Transposed => x.conv_transpose2d(w, self.spec.stride, self.spec.pad),
        };
        match &self.bias {
            Some(b) => {
                let b = ctx.bind(b);
                y.add_channel_bias(b)
            }
            None => y,
        }
    }
}

impl<F: Scalar> Module<F> for Conv2d<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Param<F>)) {
        if let Some(sn) = &self.spectral {
            f(&sn.u);
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        if let Some(sn) = &mut self.spectral {
            f(&mut sn.u);
        }
    }
}
