use std::rc::Rc;

use ndarray::{concatenate, s, Array2, ArrayD, Axis, Ix2, IxDyn, Zip};

use super::{Tensor, Var};
use crate::scalar::Scalar;

fn need(needs: &[bool], i: usize) -> bool {
    needs.get(i).copied().unwrap_or(false)
}

impl<'t, F: Scalar> Var<'t, F> {
    /// Elementwise `f(x)` with derivative `df(x)`.
    fn unary(self, f: impl Fn(F) -> F, df: impl Fn(F) -> F + 'static) -> Var<'t, F> {
        let x = self.value();
        let y = x.mapv(f);
        self.tape.apply(y, &[self], move |g, _| {
            let mut dx = g.clone();
            Zip::from(&mut dx).and(&*x).for_each(|d, &xv| *d = *d * df(xv));
            vec![Some(dx)]
        })
    }

    pub fn add(self, other: Var<'t, F>) -> Var<'t, F> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let y = &*a + &*b;
        self.tape
            .apply(y, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'t, F>) -> Var<'t, F> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        let y = &*a - &*b;
        self.tape
            .apply(y, &[self, other], |g, _| vec![Some(g.clone()), Some(g.mapv(|v| -v))])
    }

    pub fn mul(self, other: Var<'t, F>) -> Var<'t, F> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let y = &*a * &*b;
        self.tape.apply(y, &[self, other], move |g, needs| {
            vec![
                need(needs, 0).then(|| g * &*b),
                need(needs, 1).then(|| g * &*a),
            ]
        })
    }

    /// Product with a constant tensor of the same shape (dropout masks).
    pub fn mul_const(self, mask: Tensor<F>) -> Var<'t, F> {
        let x = self.value();
        assert_eq!(x.shape(), mask.shape(), "mul_const: shape mismatch");
        let y = &*x * &mask;
        self.tape.apply(y, &[self], move |g, _| vec![Some(g * &mask)])
    }

    pub fn scale(self, c: F) -> Var<'t, F> {
        let y = self.value().mapv(|v| v * c);
        self.tape.apply(y, &[self], move |g, _| vec![Some(g.mapv(|v| v * c))])
    }

    pub fn add_scalar(self, c: F) -> Var<'t, F> {
        let y = self.value().mapv(|v| v + c);
        self.tape.apply(y, &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn neg(self) -> Var<'t, F> {
        self.scale(-F::one())
    }

    pub fn relu(self) -> Var<'t, F> {
        self.unary(
            |x| if x > F::zero() { x } else { F::zero() },
            |x| if x > F::zero() { F::one() } else { F::zero() },
        )
    }

    pub fn leaky_relu(self, slope: F) -> Var<'t, F> {
        self.unary(
            move |x| if x > F::zero() { x } else { x * slope },
            move |x| if x > F::zero() { F::one() } else { slope },
        )
    }

    pub fn tanh(self) -> Var<'t, F> {
        self.unary(
            |x| x.tanh(),
            |x| {
                let t = x.tanh();
                F::one() - t * t
            },
        )
    }

    pub fn sigmoid(self) -> Var<'t, F> {
        self.unary(sigmoid, |x| {
            let s = sigmoid(x);
            s * (F::one() - s)
        })
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t, F> {
        self.unary(softplus, sigmoid)
    }

    pub fn abs(self) -> Var<'t, F> {
        self.unary(|x| x.abs(), |x| x.signum_or_zero())
    }

    pub fn square(self) -> Var<'t, F> {
        self.unary(|x| x * x, |x| x + x)
    }

    /// Sum of all elements, as a 0-d tensor.
    pub fn sum(self) -> Var<'t, F> {
        let x = self.value();
        let shape = x.raw_dim();
        let y = ArrayD::from_elem(IxDyn(&[]), x.sum());
        self.tape.apply(y, &[self], move |g, _| {
            vec![Some(ArrayD::from_elem(shape.clone(), g[IxDyn(&[])]))]
        })
    }

    pub fn mean(self) -> Var<'t, F> {
        let n = self.value().len();
        self.sum().scale(F::one() / F::lit(n as f64))
    }

    /// Mean absolute difference, as a 0-d tensor.
    pub fn mean_abs_diff(self, other: Var<'t, F>) -> Var<'t, F> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mean_abs_diff: shape mismatch");
        let n = F::lit(a.len() as f64);
        let mut total = F::zero();
        Zip::from(&*a).and(&*b).for_each(|&x, &y| total = total + (x - y).abs());
        let y = ArrayD::from_elem(IxDyn(&[]), total / n);
        self.tape.apply(y, &[self, other], move |g, needs| {
            let scale = g[IxDyn(&[])] / n;
            let mut da = ArrayD::zeros(a.raw_dim());
            Zip::from(&mut da)
                .and(&*a)
                .and(&*b)
                .for_each(|d, &x, &y| *d = (x - y).signum_or_zero() * scale);
            let db = need(needs, 1).then(|| da.mapv(|v| -v));
            vec![need(needs, 0).then_some(da), db]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, F> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.tape.apply(y, &[self], move |g, _| {
            vec![Some(
                g.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&old))
                    .expect("reshape back"),
            )]
        })
    }

    /// Concatenation along the channel axis of NCHW volumes.
    pub fn concat_channels(parts: &[Var<'t, F>]) -> Var<'t, F> {
        assert!(!parts.is_empty(), "concat_channels: no inputs");
        let values: Vec<Rc<Tensor<F>>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let y = concatenate(Axis(1), &views).expect("concat_channels: incompatible shapes");
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[1]).collect();
        parts[0].tape.apply(y, parts, move |g, needs| {
            let mut start = 0;
            widths
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let piece = need(needs, i)
                        .then(|| g.slice_axis(Axis(1), (start..start + w).into()).to_owned());
                    start += w;
                    piece
                })
                .collect()
        })
    }

    /// Channels `start..end` of an NCHW volume.
    pub fn slice_channels(self, start: usize, end: usize) -> Var<'t, F> {
        let x = self.value();
        assert!(start < end && end <= x.shape()[1], "slice_channels: bad range");
        let y = x.slice_axis(Axis(1), (start..end).into()).to_owned();
        let full = x.raw_dim();
        self.tape.apply(y, &[self], move |g, _| {
            let mut dx = ArrayD::zeros(full.clone());
            dx.slice_axis_mut(Axis(1), (start..end).into()).assign(g);
            vec![Some(dx)]
        })
    }

    /// Adds a per-channel bias `[C]` to an NCHW volume.
    pub fn add_channel_bias(self, bias: Var<'t, F>) -> Var<'t, F> {
        let (x, b) = (self.value(), bias.value());
        let c = x.shape()[1];
        assert_eq!(b.shape(), &[c], "add_channel_bias: bias must be [C]");
        let mut y = (*x).clone();
        for (ch, &bv) in b.iter().enumerate() {
            y.index_axis_mut(Axis(1), ch).mapv_inplace(|v| v + bv);
        }
        self.tape.apply(y, &[self, bias], move |g, needs| {
            let db = need(needs, 1).then(|| {
                let per_channel: Vec<F> = (0..c).map(|ch| g.index_axis(Axis(1), ch).sum()).collect();
                ArrayD::from_shape_vec(IxDyn(&[c]), per_channel).expect("bias grad")
            });
            vec![need(needs, 0).then(|| g.clone()), db]
        })
    }

    /// Symmetric zero padding of the two spatial axes.
    pub fn pad_spatial(self, pad: usize) -> Var<'t, F> {
        if pad == 0 {
            return self;
        }
        let x = self.value();
        let sh = x.shape();
        let (h, w) = (sh[2], sh[3]);
        let mut y = ArrayD::zeros(IxDyn(&[sh[0], sh[1], h + 2 * pad, w + 2 * pad]));
        y.slice_mut(s![.., .., pad..pad + h, pad..pad + w]).assign(&*x);
        self.tape.apply(y, &[self], move |g, _| {
            vec![Some(g.slice(s![.., .., pad..pad + h, pad..pad + w]).to_owned().into_dyn())]
        })
    }

    /// Non-overlapping `factor`×`factor` mean pooling.
    pub fn avg_pool(self, factor: usize) -> Var<'t, F> {
        if factor == 1 {
            return self;
        }
        let x = self.value();
        let sh = x.shape().to_vec();
        let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        assert!(h % factor == 0 && w % factor == 0, "avg_pool: indivisible size");
        let (oh, ow) = (h / factor, w / factor);
        let norm = F::one() / F::lit((factor * factor) as f64);
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("contiguous");
        let mut out = vec![F::zero(); b * c * oh * ow];
        for plane in 0..b * c {
            let src = &xs[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for i in 0..h {
                for j in 0..w {
                    dst[(i / factor) * ow + j / factor] = dst[(i / factor) * ow + j / factor] + src[i * w + j];
                }
            }
            dst.iter_mut().for_each(|v| *v = *v * norm);
        }
        let y = ArrayD::from_shape_vec(IxDyn(&[b, c, oh, ow]), out).expect("pool shape");
        self.tape.apply(y, &[self], move |g, _| {
            let gs = g.as_standard_layout();
            let gs = gs.as_slice().expect("contiguous");
            let mut dx = vec![F::zero(); b * c * h * w];
            for plane in 0..b * c {
                for i in 0..h {
                    for j in 0..w {
                        dx[plane * h * w + i * w + j] =
                            gs[plane * oh * ow + (i / factor) * ow + j / factor] * norm;
                    }
                }
            }
            vec![Some(ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), dx).expect("pool grad"))]
        })
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(self) -> Var<'t, F> {
        let x = self.value();
        let sh = x.shape().to_vec();
        let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xs = x.as_standard_layout().into_owned();
        let xs = xs.as_slice().expect("contiguous");
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xs[idx] > xs[best] {
                            best = idx;
                        }
                    }
                    out.push(xs[best]);
                    argmax.push(best);
                }
            }
        }
        let y = ArrayD::from_shape_vec(IxDyn(&[b, c, oh, ow]), out).expect("pool shape");
        self.tape.apply(y, &[self], move |g, _| {
            let gs = g.as_standard_layout();
            let gs = gs.as_slice().expect("contiguous");
            let mut dx = vec![F::zero(); b * c * h * w];
            for (&src, &gv) in argmax.iter().zip(gs) {
                dx[src] = dx[src] + gv;
            }
            vec![Some(ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), dx).expect("pool grad"))]
        })
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(self, other: Var<'t, F>) -> Var<'t, F> {
        let a = self.value();
        let b = other.value();
        let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul: lhs must be 2-D");
        let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul: rhs must be 2-D");
        let y: Array2<F> = a2.dot(&b2);
        self.tape.apply(y.into_dyn(), &[self, other], move |g, needs| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("2-D grad");
            let a2 = a.view().into_dimensionality::<Ix2>().expect("2-D");
            let b2 = b.view().into_dimensionality::<Ix2>().expect("2-D");
            vec![
                need(needs, 0).then(|| g2.dot(&b2.t()).into_dyn()),
                need(needs, 1).then(|| a2.t().dot(&g2).into_dyn()),
            ]
        })
    }
}

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softplus<F: Scalar>(x: F) -> F {
    // max(x, 0) + ln(1 + e^-|x|)
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

trait SignumOrZero {
    fn signum_or_zero(self) -> Self;
}

impl<F: Scalar> SignumOrZero for F {
    fn signum_or_zero(self) -> Self {
        if self > F::zero() {
            F::one()
        } else if self < F::zero() {
            -F::one()
        } else {
            F::zero()
        }
    }
}
