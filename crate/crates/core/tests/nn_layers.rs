use approx::assert_abs_diff_eq;
use colourgan::autodiff::{Tape, Tensor};
use colourgan::gradcheck::{check_module_gradients, random_tensor, weighted_sum};
use colourgan::nn::{
    spectral_normalize, Conv2d, ConvKind, ConvSpec, Ctx, InstanceNorm, Mode, Module, NormKind, NormLayer, NormPolicy,
    SpectralState, NORM_EPS,
};
use colourgan_oracle::{linalg, stats};
use ndarray::{s, Array1, ArrayD, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn shape4(x: &ArrayD<f64>) -> [usize; 4] {
    let s = x.shape();
    [s[0], s[1], s[2], s[3]]
}

fn norm_layer(kind: NormKind, channels: usize) -> NormLayer<f64> {
    NormLayer::build("n", NormPolicy::new(kind), channels, &mut rng(1)).unwrap()
}

/// Sets every scale to 1 and every shift to 0.
fn unit_affine(layer: &mut NormLayer<f64>) {
    layer.visit_params_mut(&mut |p| {
        let v = if p.name.ends_with(".scale") { 1.0 } else { 0.0 };
        p.value.fill(v);
    });
}

fn randomize_params(layer: &mut impl Module<f64>, seed: u64) {
    let mut k = seed;
    layer.visit_params_mut(&mut |p| {
        k += 1;
        let noise = random_tensor(p.value.shape(), k);
        p.value = &p.value + &noise.mapv(|v| 0.5 * v);
    });
}

fn forward(layer: &mut NormLayer<f64>, x: &ArrayD<f64>, mode: Mode) -> Tensor<f64> {
    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, mode, false);
    let y = layer.forward(&mut ctx, tape.constant(x.clone())).unwrap();
    y.value().as_ref().clone()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn batch_norm_matches_statistics_oracle() {
    let x = random_tensor(&[2, 3, 4, 4], 11);
    let mut bn = norm_layer(NormKind::BatchNorm, 3);
    unit_affine(&mut bn);
    let y = forward(&mut bn, &x, Mode::Train);
    let want = stats::batch_norm(x.as_slice().unwrap(), shape4(&x), NORM_EPS);
    assert!(max_abs_diff(y.as_slice().unwrap(), &want) < 1e-6);
}

#[test]
fn batch_norm_output_is_standardized() {
    let x = random_tensor(&[4, 3, 5, 5], 12).mapv(|v| 4.0 * v + 1.0);
    let mut bn = norm_layer(NormKind::BatchNorm, 3);
    unit_affine(&mut bn);
    let y = forward(&mut bn, &x, Mode::Train);
    for (mean, var) in stats::channel_moments(y.as_slice().unwrap(), shape4(&y)) {
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5, "{mean} {var}");
    }
}

#[test]
fn batch_norm_inference_ignores_batch_composition() {
    let mut bn = norm_layer(NormKind::BatchNorm, 3);
    randomize_params(&mut bn, 5);
    for seed in 0..3 {
        forward(&mut bn, &random_tensor(&[3, 3, 4, 4], 100 + seed), Mode::Train);
    }
    let a = random_tensor(&[1, 3, 4, 4], 7);
    let batch = ndarray::concatenate(
        ndarray::Axis(0),
        &[a.view(), random_tensor(&[2, 3, 4, 4], 8).view()],
    )
    .unwrap();
    let alone = forward(&mut bn, &a, Mode::Eval);
    let together = forward(&mut bn, &batch, Mode::Eval);
    assert_eq!(alone.slice(s![0, .., .., ..]), together.slice(s![0, .., .., ..]));
}

#[test]
fn instance_norm_of_one_sample_equals_batch_norm() {
    let x = random_tensor(&[1, 4, 3, 5], 21);
    let mut inn = norm_layer(NormKind::InstanceNorm, 4);
    unit_affine(&mut inn);
    // Batch norm refuses single samples in training mode, so the reference
    // is the statistics oracle over that sample's spatial axes.
    let y = forward(&mut inn, &x, Mode::Train);
    let want = stats::batch_norm(x.as_slice().unwrap(), shape4(&x), NORM_EPS);
    assert!(max_abs_diff(y.as_slice().unwrap(), &want) < 1e-9);
}

#[test]
fn instance_norm_differs_from_batch_norm_on_dissimilar_samples() {
    let mut x = random_tensor(&[2, 3, 4, 4], 22);
    x.slice_mut(s![1, .., .., ..]).mapv_inplace(|v| 3.0 * v + 2.0);
    let mut inn = norm_layer(NormKind::InstanceNorm, 3);
    let mut bn = norm_layer(NormKind::BatchNorm, 3);
    unit_affine(&mut inn);
    unit_affine(&mut bn);
    let yi = forward(&mut inn, &x, Mode::Train);
    let yb = forward(&mut bn, &x, Mode::Train);
    assert!(max_abs_diff(yi.as_slice().unwrap(), yb.as_slice().unwrap()) > 0.1);
    let want = stats::instance_norm(x.as_slice().unwrap(), shape4(&x), NORM_EPS);
    assert!(max_abs_diff(yi.as_slice().unwrap(), &want) < 1e-9);
    for b in 0..2 {
        for c in 0..3 {
            assert!(yi.slice(s![b, c, .., ..]).mean().unwrap().abs() < 1e-9);
        }
    }
}

#[test]
fn instance_norm_rejects_one_pixel() {
    let mut inn = norm_layer(NormKind::InstanceNorm, 2);
    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, Mode::Train, false);
    assert!(inn.forward(&mut ctx, tape.constant(ArrayD::zeros(IxDyn(&[2, 2, 1, 1])))).is_err());
}

#[test]
fn ibn_splits_channels() {
    let layer = norm_layer(NormKind::Ibn, 64);
    let NormLayer::Ibn(ibn) = &layer else { panic!("not ibn") };
    assert_eq!(ibn.split(), 32);
    assert_eq!(ibn.batch.channels(), 32);
    assert!(NormLayer::<f64>::build("n", NormPolicy::IBN, 1, &mut rng(0)).is_err());
    assert!(NormLayer::<f64>::build("n", NormPolicy::IBN.with_fraction(0.3), 8, &mut rng(0)).is_err());
}

#[test]
fn ibn_head_equals_instance_norm() {
    let mut layer = norm_layer(NormKind::Ibn, 8);
    randomize_params(&mut layer, 3);
    let x = random_tensor(&[3, 8, 4, 4], 31);
    let y = forward(&mut layer, &x, Mode::Train);
    let NormLayer::Ibn(ibn) = &layer else { panic!("not ibn") };
    let inn: InstanceNorm<f64> = ibn.instance.clone();
    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, Mode::Train, false);
    let head = x.slice(s![.., 0..4, .., ..]).to_owned().into_dyn();
    let want = inn.forward(&mut ctx, tape.constant(head)).unwrap().value();
    assert_eq!(y.slice(s![.., 0..4, .., ..]), want.slice(s![.., .., .., ..]));
}

fn check_norm_gradients(kind: NormKind) -> f64 {
    let mut layer = norm_layer(kind, 4);
    randomize_params(&mut layer, 9);
    let x = random_tensor(&[2, 4, 5, 5], 41);
    let report = check_module_gradients(&layer, &[x], Mode::Train, FD_STEP, |m, ctx, xs| {
        let y = m.forward(ctx, xs[0])?;
        Ok(weighted_sum(ctx.tape, y, 3))
    })
    .unwrap();
    report.max_rel_error
}

#[test]
fn normalizer_gradients_match_finite_differences() {
    for kind in [NormKind::BatchNorm, NormKind::InstanceNorm, NormKind::Ibn] {
        let err = check_norm_gradients(kind);
        assert!(err < FD_TOL, "{kind}: {err:e}");
    }
}

fn sn_conv(kind: ConvKind, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Conv2d<f64> {
    let spec = ConvSpec {
        kind,
        in_channels,
        out_channels,
        kernel,
        stride,
        pad,
        bias: true,
        spectral: true,
    };
    let mut conv = Conv2d::new("c", spec, &mut rng(4));
    randomize_params(&mut conv, 17);
    conv
}

/// Spectral gradients treat `u` as fixed, so the check runs in eval mode
/// where the forward pass does not advance the power iteration.
fn check_conv_gradients(conv: &Conv2d<f64>, input: &[usize]) -> f64 {
    let x = random_tensor(input, 51);
    check_module_gradients(conv, &[x], Mode::Eval, FD_STEP, |m, ctx, xs| {
        let y = m.forward(ctx, xs[0]);
        Ok(weighted_sum(ctx.tape, y, 5))
    })
    .unwrap()
    .max_rel_error
}

#[test]
fn spectral_linear_map_gradients() {
    // A 1×1 convolution on 1×1 inputs is a plain linear map.
    let linear = sn_conv(ConvKind::Forward, 6, 4, 1, 1, 0);
    let err = check_conv_gradients(&linear, &[3, 6, 1, 1]);
    assert!(err < FD_TOL, "{err:e}");
}

#[test]
fn spectral_conv_gradients() {
    let conv = sn_conv(ConvKind::Forward, 4, 3, 4, 2, 1);
    assert!(check_conv_gradients(&conv, &[2, 4, 5, 5]) < FD_TOL);
    let up = sn_conv(ConvKind::Transposed, 4, 3, 4, 2, 1);
    assert!(check_conv_gradients(&up, &[2, 4, 3, 3]) < FD_TOL);
}

fn matrix(rows: usize, cols: usize, data: &[f64]) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(&[rows, cols]), data.to_vec()).unwrap()
}

fn oracle_sigma(w: &ArrayD<f64>) -> f64 {
    let rows = w.shape()[0];
    linalg::largest_singular_value(w.as_slice().unwrap(), rows, w.len() / rows)
}

#[test]
fn diagonal_weight_is_rescaled_by_its_top_value() {
    let w = matrix(2, 2, &[3.0, 0.0, 0.0, 1.0]);
    let mut st = SpectralState::from_vector("u", Array1::from(vec![1.0, 0.0]));
    let (wn, sigma) = spectral_normalize(&w, &mut st);
    assert_abs_diff_eq!(sigma, 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(wn.as_slice().unwrap(), [1.0, 0.0, 0.0, 1.0 / 3.0].as_slice(), epsilon = 1e-12);

    let id = matrix(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let mut st = SpectralState::new("u", 3, &mut rng(2));
    let (out, sigma) = spectral_normalize(&id, &mut st);
    assert_abs_diff_eq!(sigma, 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(out.as_slice().unwrap(), id.as_slice().unwrap(), epsilon = 1e-12);
}

#[test]
fn power_iteration_matches_svd_oracle() {
    let w = random_tensor(&[8, 8], 61);
    let mut st = SpectralState::new("u", 8, &mut rng(3));
    st.power_iterate(&w, 49);
    let (wn, sigma_hat) = spectral_normalize(&w, &mut st);
    let sigma = oracle_sigma(&w);
    assert!((sigma_hat - sigma).abs() / sigma < 1e-4, "{sigma_hat} vs {sigma}");
    let after = oracle_sigma(&wn);
    assert!((0.999..=1.001).contains(&after), "{after}");

    // A converged u estimates the normalized weight's norm near 1.
    let mut probe = st.clone();
    probe.power_iterate(&wn, 1);
    assert!((0.95..=1.05).contains(&probe.sigma(&wn)));
}

#[test]
fn conv_weights_are_flattened_per_output_channel() {
    let conv = sn_conv(ConvKind::Forward, 3, 5, 4, 2, 1);
    let w = &conv.weight.value;
    let mut st = conv.spectral.clone().unwrap();
    st.power_iterate(w, 200);
    let want = linalg::largest_singular_value(w.as_slice().unwrap(), 5, 3 * 16);
    assert!((st.sigma(w) - want).abs() / want < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn instance_norm_ignores_per_channel_offsets(seed in 0u64..1000, shift in -5.0f64..5.0) {
        let mut inn = norm_layer(NormKind::InstanceNorm, 3);
        randomize_params(&mut inn, seed);
        let x = random_tensor(&[2, 3, 4, 4], seed);
        let mut moved = x.clone();
        let mut r = rng(seed);
        for b in 0..2 {
            for c in 0..3 {
                let k = shift * r.random_range(-1.0..1.0);
                moved.slice_mut(s![b, c, .., ..]).mapv_inplace(|v| v + k);
            }
        }
        let a = forward(&mut inn, &x, Mode::Train);
        let b = forward(&mut inn, &moved, Mode::Train);
        prop_assert!(max_abs_diff(a.as_slice().unwrap(), b.as_slice().unwrap()) < 1e-6);
    }

    #[test]
    fn u_stays_unit_length(seed in 0u64..1000, rows in 1usize..10, cols in 1usize..10, steps in 1usize..5) {
        let w = random_tensor(&[rows, cols], seed);
        let mut st = SpectralState::new("u", rows, &mut rng(seed));
        for _ in 0..steps {
            spectral_normalize(&w, &mut st);
            let u = st.u();
            prop_assert!((u.dot(&u) - 1.0).abs() < 1e-12);
        }
    }
}
