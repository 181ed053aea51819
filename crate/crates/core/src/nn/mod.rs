//! Layer toolkit: parameters, the forward context, convolutions, the
//! batch/instance/IBN normalizers and spectral normalization.

mod conv;
mod init;
pub mod norm;
pub mod spectral;

use std::collections::HashMap;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::scalar::Scalar;

pub use conv::{Conv2d, ConvKind, ConvSpec, SN_WARMUP_ITERATIONS};
pub use init::{gaussian, Init};
pub use norm::{BatchNorm, Ibn, InstanceNorm, NormKind, NormLayer, NormPolicy, NORM_EPS};
pub use spectral::{spectral_normalize, SpectralState};

/// A named tensor owned by a layer: a learnable weight or a persistent
/// buffer (running statistics, power-iteration vectors).
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(name: impl Into<String>, value: Tensor<F>) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

/// Visitor access to everything a model persists.
pub trait Module<F: Scalar> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>));
    fn visit_buffers(&self, f: &mut dyn FnMut(&Param<F>));
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>));

    /// Number of learnable scalars.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-pass state threaded through `forward` calls.
///
/// Every parameter a layer reads is registered through [`Ctx::bind`], which
/// records the leaf so gradients can be collected by name afterwards. A
/// parameter bound several times (e.g. a discriminator applied to real and
/// fake inputs) accumulates the gradients of all its leaves.
pub struct Ctx<'t, F: Scalar> {
    pub tape: &'t Tape<F>,
    pub mode: Mode,
    trainable: bool,
    bindings: Vec<(String, Var<'t, F>)>,
}

impl<'t, F: Scalar> Ctx<'t, F> {
    /// `trainable = false` binds parameters as constants (no gradient).
    pub fn new(tape: &'t Tape<F>, mode: Mode, trainable: bool) -> Self {
        Self {
            tape,
            mode,
            trainable,
            bindings: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn bind(&mut self, p: &Param<F>) -> Var<'t, F> {
        let var = self.tape.leaf(p.value.clone(), self.trainable);
        if self.trainable {
            self.bindings.push((p.name.clone(), var));
        }
        var
    }

    pub fn bindings(&self) -> &[(String, Var<'t, F>)] {
        &self.bindings
    }

    /// Gradients of every bound parameter, summed per name.
    pub fn collect_grads(&self, grads: &Gradients<F>) -> GradMap<F> {
        let mut map: HashMap<String, Tensor<F>> = HashMap::new();
        for (name, var) in &self.bindings {
            let Some(g) = grads.get(*var) else { continue };
            match map.get_mut(name) {
                Some(acc) => *acc += g,
                None => {
                    map.insert(name.clone(), g.clone());
                }
            }
        }
        GradMap(map)
    }
}

/// Parameter gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct GradMap<F>(pub HashMap<String, Tensor<F>>);

impl<F: Scalar> GradMap<F> {
    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.0.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Largest absolute gradient entry.
    pub fn max_abs(&self) -> F {
        self.0
            .values()
            .flat_map(|t| t.iter())
            .fold(F::zero(), |m, &v| m.max(v.abs()))
    }
}
