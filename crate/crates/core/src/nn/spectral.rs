//! Spectral normalization: `W / σ(W)` with σ estimated by power iteration
//! on the weight flattened to `(out_channels, everything else)`.

use ndarray::{Array1, ArrayD, ArrayView2, IxDyn, Zip};
use rand::Rng;

use super::{gaussian, Param};
use crate::autodiff::Var;
use crate::scalar::Scalar;

/// Lower bound applied to σ̂ and to vector norms.
pub const SN_EPS: f64 = 1e-12;

/// Persistent left singular vector estimate `u` of one weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState<F> {
    /// Unit vector of length = output dimension, stored as a buffer.
    pub u: Param<F>,
    /// Power iterations per training-mode forward pass.
    pub n_power_iterations: usize,
}

fn as_matrix<F: Scalar>(w: &ArrayD<F>) -> ArrayView2<'_, F> {
    let rows = w.shape()[0];
    let cols = w.len() / rows.max(1);
    w.view()
        .into_shape_with_order((rows, cols))
        .expect("weights are stored in standard layout")
}

fn normalized<F: Scalar>(v: Array1<F>) -> Option<Array1<F>> {
    let norm = v.dot(&v).sqrt();
    (norm > F::lit(SN_EPS)).then(|| v / norm)
}

impl<F: Scalar> SpectralState<F> {
    /// Random unit `u` for a weight whose leading axis has `rows` entries.
    pub fn new<R: Rng + ?Sized>(name: impl Into<String>, rows: usize, rng: &mut R) -> Self {
        let raw: ArrayD<F> = gaussian(&[rows], 0.0, 1.0, rng);
        let raw = raw.into_dimensionality().expect("1-D");
        let u = normalized(raw).unwrap_or_else(|| {
            let mut e = Array1::zeros(rows);
            e[0] = F::one();
            e
        });
        Self {
            u: Param::new(name, u.into_dyn()),
            n_power_iterations: 1,
        }
    }

    pub fn from_vector(name: impl Into<String>, u: Array1<F>) -> Self {
        Self {
            u: Param::new(name, u.into_dyn()),
            n_power_iterations: 1,
        }
    }

    pub fn u(&self) -> Array1<F> {
        self.u.value.clone().into_dimensionality().expect("1-D u")
    }

    /// Runs `n` power-iteration steps against `w`, updating `u` in place.
    /// A step whose image vanishes (e.g. all-zero weights) leaves `u` as is.
    pub fn power_iterate(&mut self, w: &ArrayD<F>, n: usize) {
        let m = as_matrix(w);
        let mut u = self.u();
        for _ in 0..n {
            let Some(v) = normalized(m.t().dot(&u)) else { break };
            let Some(next) = normalized(m.dot(&v)) else { break };
            u = next;
        }
        self.u.value = u.into_dyn();
    }

    /// `(σ̂, v)` with `v = Wᵀu / ‖Wᵀu‖` and `σ̂ = uᵀ W v = ‖Wᵀu‖`.
    pub fn sigma_and_v(&self, w: &ArrayD<F>) -> (F, Array1<F>) {
        let m = as_matrix(w);
        let u = self.u();
        let t = m.t().dot(&u);
        let norm = t.dot(&t).sqrt();
        let v = if norm > F::lit(SN_EPS) {
            &t / norm
        } else {
            Array1::zeros(t.len())
        };
        (m.dot(&v).dot(&u), v)
    }

    /// Current σ̂ estimate without touching the state.
    pub fn sigma(&self, w: &ArrayD<F>) -> F {
        self.sigma_and_v(w).0
    }
}

/// One spectral-normalization update: advances `state` by its configured
/// number of power iterations and returns `(W / σ̂, σ̂)`.
pub fn spectral_normalize<F: Scalar>(w: &ArrayD<F>, state: &mut SpectralState<F>) -> (ArrayD<F>, F) {
    state.power_iterate(w, state.n_power_iterations);
    let (sigma, _) = state.sigma_and_v(w);
    let clamped = sigma.max(F::lit(SN_EPS));
    (w.mapv(|x| x / clamped), sigma)
}

impl<'t, F: Scalar> Var<'t, F> {
    /// `W / (uᵀ W v)` with `u`, `v` held constant.
    pub fn spectral_normalized(self, u: Array1<F>, v: Array1<F>) -> Var<'t, F> {
        let w = self.value();
        let shape = w.shape().to_vec();
        let m = as_matrix(&w);
        assert_eq!(u.len(), m.nrows(), "spectral: u length mismatch");
        assert_eq!(v.len(), m.ncols(), "spectral: v length mismatch");
        let sigma = m.dot(&v).dot(&u);
        let eps = F::lit(SN_EPS);
        let clamped = sigma.max(eps);
        let y = w.mapv(|x| x / clamped);
        self.tape().apply(y, &[self], move |g, _| {
            let mut dw = g.mapv(|x| x / clamped);
            if sigma > eps {
                // ∂σ/∂W = u vᵀ
                let mut inner = F::zero();
                Zip::from(g).and(&*w).for_each(|&gv, &wv| inner = inner + gv * wv);
                let coef = inner / (sigma * sigma);
                let rows = u.len();
                let cols = v.len();
                let mut dm = dw
                    .into_shape_with_order(IxDyn(&[rows, cols]))
                    .expect("matrix view");
                for (mut row, &ui) in dm.outer_iter_mut().zip(u.iter()) {
                    row.scaled_add(-(coef * ui), &v);
                }
                dw = dm.into_shape_with_order(IxDyn(&shape)).expect("weight shape");
            }
            vec![Some(dw)]
        })
    }
}
