//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p colourgan-cli --test acceptance -- 3 5`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use colourgan::autodiff::{Tape, Tensor, Var};
use colourgan::checkpoint::TensorFile;
use colourgan::colorspace::{lab_to_srgb, srgb_pixel_to_lab, srgb_to_lab, LabImage, SrgbImage};
use colourgan::data::{load_batch, prefetch, scan_dataset, write_synthetic_dataset, Record};
use colourgan::discriminator::{self, DiscriminatorConfig, MultiScaleDiscriminator, PatchDiscriminator};
use colourgan::generator::{Generator, GeneratorConfig};
use colourgan::gradcheck::{check_module_gradients, random_tensor, weighted_sum};
use colourgan::losses::{self, values, LossConfig, PerceptualNorm};
use colourgan::metrics::{ab_histogram, histogram_intersection, l1_ab, psnr, AbChannel, Histogram};
use colourgan::nn::{
    spectral_normalize, Conv2d, ConvKind, ConvSpec, Ctx, Mode, Module, NormKind, NormLayer, NormPolicy, Param,
    SpectralState,
};
use colourgan::perceptual::{FeatureExtractor, SeededConvStack};
use colourgan::training::{
    describe_generator, read_curve, EpochSummary, SigmaMonitor, TrainConfig, Trainer, CURVE_HEADER,
};
use colourgan_cli::commands::cmd_compare;
use colourgan_cli::Overrides;
use colourgan_oracle::{conv as oconv, gan, linalg, metrics as ometrics};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// 1 ─ colour round trip

fn colour_round_trip() -> Outcome {
    const LEVELS: usize = 48;
    let level = |i: usize| ((i * 255 + (LEVELS - 1) / 2) / (LEVELS - 1)) as u8;
    let mut data = Vec::with_capacity(LEVELS.pow(3) * 3);
    for r in 0..LEVELS {
        for g in 0..LEVELS {
            for b in 0..LEVELS {
                data.extend([level(r), level(g), level(b)]);
            }
        }
    }
    let n = data.len() / 3;
    let img = ok(SrgbImage::from_raw((LEVELS * LEVELS) as u32, LEVELS as u32, 3, data))?;
    let back = lab_to_srgb(&srgb_to_lab::<f64>(&img));
    let worst = img
        .as_raw()
        .iter()
        .zip(back.as_raw())
        .map(|(&a, &b)| (a as i32 - b as i32).abs())
        .max()
        .unwrap_or(0);
    ensure!(n >= 100_000, "only {n} samples");
    ensure!(worst <= 1, "round-trip error {worst}");
    let mut grey_worst = 0.0f64;
    for v in 0..=255u8 {
        let lab = srgb_pixel_to_lab([v, v, v]);
        grey_worst = grey_worst.max(lab[1].abs()).max(lab[2].abs());
    }
    ensure!(grey_worst < 0.02, "grey chroma {grey_worst}");
    Ok(format!("{n} samples, max error {worst}; grey |a|,|b| <= {grey_worst:.2e}"))
}

// 2 ─ gradient suite

const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-4;

fn randomize(module: &mut impl Module<f64>, seed: u64) {
    let mut k = seed;
    module.visit_params_mut(&mut |p| {
        k += 1;
        p.value = &p.value + &random_tensor(p.value.shape(), k).mapv(|v| 0.5 * v);
    });
}

fn norm_gradient_error(kind: NormKind) -> Result<f64, String> {
    let mut layer = ok(NormLayer::build("n", NormPolicy::new(kind), 4, &mut rng(1)))?;
    randomize(&mut layer, 9);
    let x = random_tensor(&[2, 4, 5, 5], 41);
    let report = ok(check_module_gradients(&layer, &[x], Mode::Train, FD_STEP, |m, ctx, xs| {
        let y = m.forward(ctx, xs[0])?;
        Ok(weighted_sum(ctx.tape, y, 3))
    }))?;
    Ok(report.max_rel_error)
}

fn conv_spec(kind: ConvKind, i: usize, o: usize, k: usize, stride: usize, pad: usize, bias: bool) -> ConvSpec {
    ConvSpec {
        kind,
        in_channels: i,
        out_channels: o,
        kernel: k,
        stride,
        pad,
        bias,
        spectral: true,
    }
}

/// Spectral layers are checked in eval mode, where `u` stays fixed.
fn sn_gradient_error(spec: ConvSpec, input: &[usize]) -> Result<f64, String> {
    let mut conv = Conv2d::new("c", spec, &mut rng(4));
    randomize(&mut conv, 17);
    let x = random_tensor(input, 51);
    let report = ok(check_module_gradients(&conv, &[x], Mode::Eval, FD_STEP, |m, ctx, xs| {
        let y = m.forward(ctx, xs[0]);
        Ok(weighted_sum(ctx.tape, y, 5))
    }))?;
    Ok(report.max_rel_error)
}

/// Two-layer generator and a one-layer critic under the full generator
/// objective.
#[derive(Clone)]
struct Toy {
    down: Conv2d<f64>,
    norm: NormLayer<f64>,
    up: Conv2d<f64>,
    critic: Conv2d<f64>,
}

impl Toy {
    fn new() -> Self {
        let mut r = rng(12);
        let mut toy = Self {
            down: Conv2d::new("g.down", conv_spec(ConvKind::Forward, 1, 3, 4, 2, 1, false), &mut r),
            norm: NormLayer::build("g.norm", NormPolicy::BN, 3, &mut r).expect("norm"),
            up: Conv2d::new("g.up", conv_spec(ConvKind::Transposed, 3, 2, 4, 2, 1, true), &mut r),
            critic: Conv2d::new("d", conv_spec(ConvKind::Forward, 3, 1, 4, 2, 1, true), &mut r),
        };
        for c in [&mut toy.down, &mut toy.up, &mut toy.critic] {
            c.spectral.as_mut().expect("spectral").n_power_iterations = 0;
        }
        let mut seed = 30;
        toy.visit_params_mut(&mut |p| {
            p.value = random_tensor(p.value.shape(), seed).mapv(|v| 0.5 * v + 0.1);
            seed += 1;
        });
        toy
    }

    fn objective<'t>(
        &mut self,
        ctx: &mut Ctx<'t, f64>,
        l: Var<'t, f64>,
        real_ab: Var<'t, f64>,
    ) -> colourgan::Result<Var<'t, f64>> {
        let h = self.down.forward(ctx, l);
        let h = self.norm.forward(ctx, h)?.leaky_relu(0.2);
        let fake_ab = self.up.forward(ctx, h).tanh();
        let logits = self.critic.forward(ctx, Var::concat_channels(&[l, fake_ab]));
        let cfg = LossConfig {
            lambda_l1: 100.0,
            n_scales: 1,
        };
        Ok(losses::generator_loss(&[logits], fake_ab, real_ab, &cfg)?.total)
    }
}

impl Module<f64> for Toy {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<f64>)) {
        self.down.visit_params(f);
        self.norm.visit_params(f);
        self.up.visit_params(f);
        self.critic.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.down.visit_params_mut(f);
        self.norm.visit_params_mut(f);
        self.up.visit_params_mut(f);
        self.critic.visit_params_mut(f);
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&Param<f64>)) {
        self.down.visit_buffers(f);
        self.norm.visit_buffers(f);
        self.up.visit_buffers(f);
        self.critic.visit_buffers(f);
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.down.visit_buffers_mut(f);
        self.norm.visit_buffers_mut(f);
        self.up.visit_buffers_mut(f);
        self.critic.visit_buffers_mut(f);
    }
}

fn gradient_suite() -> Outcome {
    let mut results = Vec::new();
    for kind in [NormKind::BatchNorm, NormKind::InstanceNorm, NormKind::Ibn] {
        results.push((kind.to_string(), norm_gradient_error(kind)?));
    }
    results.push((
        "SN linear".into(),
        sn_gradient_error(conv_spec(ConvKind::Forward, 6, 4, 1, 1, 0, true), &[3, 6, 1, 1])?,
    ));
    results.push((
        "SN conv".into(),
        sn_gradient_error(conv_spec(ConvKind::Forward, 4, 3, 4, 2, 1, true), &[2, 4, 5, 5])?,
    ));
    results.push((
        "SN conv-T".into(),
        sn_gradient_error(conv_spec(ConvKind::Transposed, 4, 3, 4, 2, 1, true), &[2, 4, 3, 3])?,
    ));
    let toy = Toy::new();
    let inputs = [random_tensor(&[2, 1, 4, 4], 1), random_tensor(&[2, 2, 4, 4], 2)];
    let report = ok(check_module_gradients(&toy, &inputs, Mode::Train, 1e-5, |m, ctx, xs| {
        m.objective(ctx, xs[0], xs[1])
    }))?;
    results.push(("generator objective".into(), report.max_rel_error));
    for (name, err) in &results {
        ensure!(*err < FD_TOL, "{name}: relative error {err:e}");
    }
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(format!("{} checks, worst relative error {worst:.1e}", results.len()))
}

// 3 ─ spectral normalization

/// `σ₂/σ₁` from the eigenvalues of `W Wᵀ`.
fn gap_ratio(w: &[f64], rows: usize, cols: usize) -> f64 {
    let mut gram = vec![0.0; rows * rows];
    for a in 0..rows {
        for b in 0..rows {
            gram[a * rows + b] = (0..cols).map(|k| w[a * cols + k] * w[b * cols + k]).sum();
        }
    }
    let mut ev = linalg::symmetric_eigenvalues(&gram, rows);
    ev.sort_by(|x, y| y.total_cmp(x));
    (ev[1].max(0.0) / ev[0]).sqrt()
}

fn spectral_normalization() -> Outcome {
    const ITERATIONS: usize = 50;
    let mut r = rng(2024);
    let (mut worst_sigma, mut worst_norm) = (0.0f64, 0.0f64);
    let mut misses = Vec::new();
    for i in 0..100 {
        let rows = r.random_range(2..=24);
        let cols = r.random_range(2..=48);
        let w = random_tensor(&[rows, cols], 1000 + i);
        let flat = w.as_slice().expect("contiguous");
        let mut st = SpectralState::new("u", rows, &mut r);
        let start = st.clone();
        st.n_power_iterations = ITERATIONS;
        let (normalized, sigma_hat) = spectral_normalize(&w, &mut st);
        let sigma = linalg::largest_singular_value(flat, rows, cols);
        let rel = (sigma_hat - sigma).abs() / sigma;
        let after = linalg::largest_singular_value(normalized.as_slice().expect("contiguous"), rows, cols);
        worst_sigma = worst_sigma.max(rel);
        worst_norm = worst_norm.max((after - 1.0).abs());
        if rel >= 1e-3 || !(0.999..=1.001).contains(&after) {
            // Same start, ten times the budget: separates slow convergence
            // from a wrong estimate.
            let mut long = start;
            long.power_iterate(&w, 10 * ITERATIONS);
            let long_rel = (long.sigma(&w) - sigma).abs() / sigma;
            misses.push(format!(
                "#{i} {rows}x{cols} σ₂/σ₁={:.4} err {rel:.1e} (after {} its: {long_rel:.1e})",
                gap_ratio(flat, rows, cols),
                10 * ITERATIONS
            ));
        }
    }
    let summary = format!(
        "{}/100 within 1e-3 after {ITERATIONS} iterations; max |σ̂−σ|/σ {worst_sigma:.1e}, max |σ(W/σ̂)−1| {worst_norm:.1e}",
        100 - misses.len()
    );
    ensure!(misses.is_empty(), "{summary}; misses: {}", misses.join("; "));
    Ok(summary)
}

// 4 ─ architecture

const STRUCTURE: &str = "e64:e128:e256:e512:e512:e512:e512-d512:d512:d512:d256:d128:d64";

/// Side lengths of the input region with nonzero gradient for one interior
/// logit. Eval-mode batch norm keeps every layer spatially local.
fn gradient_support() -> Result<(usize, usize), String> {
    let cfg = DiscriminatorConfig {
        norms: discriminator::uniform_schedule(4, NormPolicy::BN),
        n_scales: 1,
        ..DiscriminatorConfig::default()
    };
    let mut d = ok(PatchDiscriminator::<f64>::new("d", &cfg, &mut rng(2)))?;
    let side = 128;
    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, Mode::Eval, false);
    let x = tape.variable(random_tensor(&[1, 3, side, side], 1));
    let y = ok(d.forward(&mut ctx, x))?;
    let mut pick = ArrayD::zeros(IxDyn(&y.shape()));
    pick[[0, 0, 6, 7]] = 1.0;
    let g = tape.backward(y.mul(tape.constant(pick)).sum()).get_or_zeros(x);
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..side {
        for c in 0..side {
            if (0..3).any(|ch| g[[0, ch, r, c]] != 0.0) {
                (r0, r1, c0, c1) = (r0.min(r), r1.max(r), c0.min(c), c1.max(c));
            }
        }
    }
    ensure!(r0 != usize::MAX, "no gradient reached the input");
    Ok((r1 + 1 - r0, c1 + 1 - c0))
}

fn architecture() -> Outcome {
    let mut g = ok(Generator::<f32>::new(&GeneratorConfig::default(), &mut rng(0)))?;
    ensure!(g.structure() == STRUCTURE, "structure {}", g.structure());
    let dec = g.decoder_info();
    ensure!(dec[1].in_channels == 1024, "skip concat gives {} channels", dec[1].in_channels);
    let head = g.output_info();
    ensure!(head.out_channels == 2, "head has {} channels", head.out_channels);
    ensure!(describe_generator(&g).ends_with("tanh"), "head activation: {}", describe_generator(&g));
    let x = random_tensor(&[1, 1, 256, 256], 3).mapv(|v| v as f32);
    let y = ok(g.infer(&x, Mode::Eval, 0))?;
    ensure!(y.shape() == [1, 2, 256, 256], "output shape {:?}", y.shape());
    ensure!(y.iter().all(|v| v.abs() < 1.0), "output outside (-1, 1)");

    let (h, w) = gradient_support()?;
    ensure!((46..=70).contains(&h) && (46..=70).contains(&w), "gradient support {h}x{w}");

    let cfg = DiscriminatorConfig::default();
    let mut d = ok(MultiScaleDiscriminator::<f32>::new(&cfg, &mut rng(5)))?;
    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, Mode::Eval, false);
    let l = tape.constant(ArrayD::zeros(IxDyn(&[1, 1, 256, 256])));
    let ab = tape.constant(ArrayD::zeros(IxDyn(&[1, 2, 256, 256])));
    let inputs: Vec<usize> = ok(d.scale_inputs(l, ab))?.iter().map(|v| v.shape()[2]).collect();
    ensure!(inputs == [256, 128, 64], "scale inputs {inputs:?}");
    let maps: Vec<usize> = ok(d.forward(&mut ctx, l, ab))?.iter().map(|v| v.shape()[2]).collect();
    ensure!(maps[0] == 30, "logit maps {maps:?}");
    Ok(format!(
        "{STRUCTURE}; gradient support {h}x{w}; scale inputs {inputs:?}; logit maps {maps:?}"
    ))
}

// 5 ─ loss point values

fn loss_point_values() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    for n in [1usize, 3] {
        let logits: Vec<Tensor<f64>> = (0..n).map(|_| ArrayD::zeros(IxDyn(&[2, 1, 6, 6]))).collect();
        let d = ok(values::discriminator_loss(&logits, &logits))?;
        ensure!((d - 2.0 * n as f64 * ln2).abs() < 1e-6, "N={n}: d_loss {d}");
        let ab = ArrayD::zeros(IxDyn(&[2, 2, 4, 4]));
        let (_, adv, _) = ok(values::generator_loss(&logits, &ab, &ab, &LossConfig::default()))?;
        ensure!((adv - n as f64 * ln2).abs() < 1e-6, "N={n}: g_adv {adv}");
    }
    let logits = vec![ArrayD::zeros(IxDyn(&[1, 1, 6, 6]))];
    let fake = ArrayD::from_elem(IxDyn(&[1, 2, 4, 4]), 0.1);
    let real = ArrayD::zeros(IxDyn(&[1, 2, 4, 4]));
    for lambda in [0.0, 100.0] {
        let cfg = LossConfig {
            lambda_l1: lambda,
            n_scales: 1,
        };
        let (total, _, _) = ok(values::generator_loss(&logits, &fake, &real, &cfg))?;
        let want = ln2 + lambda * 0.1;
        ensure!((total - want).abs() < 1e-6, "λ={lambda}: total {total}, expected {want}");
    }
    Ok("2N·ln2 and N·ln2 for N ∈ {1, 3}; λ ∈ {0, 100} totals exact".into())
}

// 6 ─ training liveness and overfit probe

const PROBE_STEPS: u64 = 500;

fn synthetic(classes: usize, per_class: usize, size: u32, seed: u64) -> Result<(tempfile::TempDir, Vec<Record>), String> {
    let dir = ok(tempfile::tempdir())?;
    ok(write_synthetic_dataset(dir.path(), classes, per_class, size, seed))?;
    let rows = ok(scan_dataset(dir.path()))?.records;
    Ok((dir, rows))
}

fn overfit_probe() -> Outcome {
    let (_data, rows) = synthetic(2, 4, 64, 11)?;
    let cfg = TrainConfig::for_image_size(64);
    let mut t = ok(Trainer::<f32>::new(cfg, "overfit probe"))?;
    let mut monitor = SigmaMonitor::default();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let run = ok(tempfile::tempdir())?;
    let curve_path = run.path().join("curve.csv");
    let mut curve = format!("{CURVE_HEADER}\n");
    while t.step < PROBE_STEPS {
        let jobs = ok(t.epoch_jobs(&rows))?;
        let n = jobs.len() as f64;
        let (mut adv, mut l1, mut d) = (0.0, 0.0, 0.0);
        for batch in prefetch::<f32>(jobs, 64, 1) {
            let report = ok(t.train_step(&ok(batch)?))?;
            ensure!(report.detach_leak == 0.0, "step {}: detach leak {}", t.step, report.detach_leak);
            let r = report.losses;
            ensure!(
                [r.g_adv, r.g_l1, r.d_loss, r.g_total].iter().all(|v| v.is_finite()),
                "step {}: non-finite loss",
                t.step
            );
            for (name, s) in monitor.normalized_sigmas(&t.discriminator) {
                ensure!((0.9..=1.1).contains(&s), "step {}: {name} σ {s}", t.step);
                lo = lo.min(s);
                hi = hi.max(s);
            }
            adv += r.g_adv;
            l1 += r.g_l1;
            d += r.d_loss;
        }
        t.epoch += 1;
        let row = EpochSummary {
            epoch: t.epoch,
            g_adv: adv / n,
            g_l1: l1 / n,
            d_loss: d / n,
        };
        curve.push_str(&row.csv_row());
        curve.push('\n');
    }
    ok(fs::write(&curve_path, &curve))?;
    let rows = ok(read_curve(&curve_path))?;
    ensure!(rows.len() == t.epoch, "curve has {} rows for {} epochs", rows.len(), t.epoch);
    ensure!(
        rows.iter().enumerate().all(|(i, r)| r.epoch == i + 1),
        "curve epochs are not consecutive"
    );
    let (first, last) = (rows[0].g_l1, rows[rows.len() - 1].g_l1);
    ensure!(last < 0.2 * first, "g_l1 {first:.4} → {last:.4} (ratio {:.3})", last / first);
    Ok(format!(
        "{} steps: g_l1 {first:.4} → {last:.4} (ratio {:.3}); σ in [{lo:.4}, {hi:.4}]; detach leak 0",
        t.step,
        last / first
    ))
}

// 7 ─ determinism

fn determinism() -> Outcome {
    let (_data, rows) = synthetic(2, 4, 64, 12)?;
    let mut cfg = TrainConfig::for_image_size(64);
    cfg.epochs = 2;
    let batch = ok(load_batch::<f32>(&rows[..4], 64, None))?;
    let run = |dir: &Path| -> Result<(Vec<u8>, Tensor<f32>, Trainer<f32>), String> {
        let mut t = ok(Trainer::<f32>::new(cfg.clone(), "determinism"))?;
        ok(t.fit(&rows, dir))?;
        let out = ok(t.generator.infer(&batch.l_norm, Mode::Eval, 0))?;
        Ok((ok(fs::read(dir.join("curve.csv")))?, out, t))
    };
    let (a, b) = (ok(tempfile::tempdir())?, ok(tempfile::tempdir())?);
    let (curve_a, out_a, trainer) = run(a.path())?;
    let (curve_b, out_b, _) = run(b.path())?;
    ensure!(curve_a == curve_b, "curve logs differ");
    ensure!(out_a == out_b, "eval outputs differ");

    let saved = ok(fs::read(a.path().join("final.ckpt")))?;
    ensure!(saved == ok(fs::read(b.path().join("final.ckpt")))?, "checkpoints differ");
    let file = ok(TensorFile::<f32>::load(&a.path().join("final.ckpt")))?;
    let mut back = ok(Trainer::<f32>::from_checkpoint(cfg.clone(), &file))?;
    ensure!(ok(back.to_checkpoint().to_bytes())? == saved, "reloaded checkpoint re-serializes differently");
    ensure!(ok(trainer.to_checkpoint().to_bytes())? == saved, "in-memory state differs from file");
    let out_back = ok(back.generator.infer(&batch.l_norm, Mode::Eval, 0))?;
    ensure!(out_back == out_a, "reloaded eval output differs");
    Ok(format!("{} curve bytes and {} checkpoint bytes identical", curve_a.len(), saved.len()))
}

// 8 ─ metrics oracle equivalence

fn random_set(seed: u64) -> Vec<LabImage<f64>> {
    let mut r = rng(seed);
    (0..4)
        .map(|_| {
            let mut plane = |lo: f64, hi: f64| ndarray::Array2::from_shape_fn((12, 10), |_| r.random_range(lo..hi));
            let (l, a, b) = (plane(0.0, 100.0), plane(-110.0, 110.0), plane(-110.0, 110.0));
            LabImage::new(l, a, b).expect("equal planes")
        })
        .collect()
}

fn channel(set: &[LabImage<f64>], c: AbChannel) -> Vec<f64> {
    set.iter()
        .flat_map(|im| match c {
            AbChannel::A => im.a.iter().copied().collect::<Vec<_>>(),
            AbChannel::B => im.b.iter().copied().collect(),
        })
        .collect()
}

fn oracle_taps(stack: &SeededConvStack<f64>, x: &Tensor<f64>) -> Vec<Vec<f64>> {
    let mut h: Vec<f64> = x.iter().copied().collect();
    let mut shape: [usize; 4] = x.shape().try_into().expect("4-D");
    let mut taps = Vec::new();
    for i in 0..stack.n_taps() {
        if i > 0 {
            (h, shape) = oconv::max_pool2(&h, shape);
        }
        let (w, b) = stack.layer(i);
        let ws: [usize; 4] = w.shape().try_into().expect("4-D");
        let flat = |t: &Tensor<f64>| t.iter().copied().collect::<Vec<_>>();
        let (y, ys) = oconv::conv2d(&h, shape, &flat(w), ws, Some(&flat(b)), 1, 1);
        h = oconv::relu(&y);
        shape = ys;
        taps.push(h.clone());
    }
    taps
}

fn metrics_oracles() -> Outcome {
    let (pred, truth) = (random_set(1), random_set(2));
    let mut worst = 0.0f64;
    let mut track = |name: &str, got: f64, want: f64| -> Result<(), String> {
        let err = (got - want).abs();
        ensure!(err < 1e-6, "{name}: {got} vs oracle {want}");
        worst = worst.max(err);
        Ok(())
    };
    let ab = |s: &[LabImage<f64>]| [channel(s, AbChannel::A), channel(s, AbChannel::B)].concat();
    track("l1_ab", ok(l1_ab(&pred, &truth))?, ometrics::mean_abs_diff(&ab(&pred), &ab(&truth)))?;

    let p_rgb: Vec<SrgbImage> = pred.iter().map(lab_to_srgb).collect();
    let t_rgb: Vec<SrgbImage> = truth.iter().map(lab_to_srgb).collect();
    let raw = |s: &[SrgbImage]| s.iter().flat_map(|i| i.as_raw().to_vec()).collect::<Vec<u8>>();
    track("psnr", ok(psnr(&p_rgb, &t_rgb))?, ometrics::psnr(&raw(&p_rgb), &raw(&t_rgb)))?;

    for c in [AbChannel::A, AbChannel::B] {
        let (hp, ht) = (ok(ab_histogram(&pred, c))?, ok(ab_histogram(&truth, c))?);
        let op = ometrics::histogram(&channel(&pred, c), -110.0, 110.0, 220);
        let ot = ometrics::histogram(&channel(&truth, c), -110.0, 110.0, 220);
        ensure!(hp.counts() == op.as_slice(), "{c:?} histogram counts differ");
        track("intersection", ok(histogram_intersection(&hp, &ht))?, ometrics::intersection(&op, &ot))?;
        track("self-intersection", ok(histogram_intersection(&hp, &hp))?, 1.0)?;
    }
    let p = Histogram::from_counts(0.0, 3.0, vec![2, 2, 0]);
    let q = Histogram::from_counts(0.0, 3.0, vec![0, 0, 5]);
    track("disjoint intersection", ok(histogram_intersection(&p, &q))?, 0.0)?;

    let stack = SeededConvStack::<f64>::new(17);
    let (real, fake) = (
        random_tensor(&[4, 3, 16, 16], 5).mapv(|v| 0.5 + 0.5 * v),
        random_tensor(&[4, 3, 16, 16], 6).mapv(|v| 0.5 + 0.5 * v),
    );
    let (rt, ft) = (oracle_taps(&stack, &real), oracle_taps(&stack, &fake));
    let want = rt.iter().zip(&ft).map(|(r, f)| ometrics::mean_abs_diff(r, f)).sum::<f64>() / rt.len() as f64;
    track(
        "perceptual_loss",
        ok(losses::perceptual_loss(&stack, &real, &fake, PerceptualNorm::L1))?,
        want,
    )?;
    let logits: Vec<Tensor<f64>> = (0..3).map(|s| random_tensor(&[2, 1, 6, 6], s).mapv(|v| 4.0 * v)).collect();
    let flat: Vec<Vec<f64>> = logits.iter().map(|t| t.iter().copied().collect()).collect();
    track(
        "discriminator_loss",
        ok(values::discriminator_loss(&logits, &logits))?,
        gan::discriminator_loss(&flat, &flat),
    )?;
    Ok(format!("all metrics within {worst:.1e} of the straight-loop oracles"))
}

// 9 ─ ablation harness

const LABELS: [&str; 6] = ["IN", "BN+SN", "IN+SN", "BN+SN+MD", "IBN+SN+MD", "BN"];

fn ablation_configs() -> Result<Vec<PathBuf>, String> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/ablation");
    let mut configs: Vec<PathBuf> = ok(fs::read_dir(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    configs.sort();
    Ok(configs)
}

fn ablation_harness() -> Outcome {
    // 4 classes of 55 images, 5 per class held out: 200 training images.
    let (data, _) = synthetic(4, 55, 64, 13)?;
    let out = ok(tempfile::tempdir())?;
    let configs = ablation_configs()?;
    ensure!(configs.len() == 6, "found {} ablation configs", configs.len());
    let overrides = Overrides {
        data_root: Some(data.path().to_path_buf()),
        ..Overrides::default()
    };
    let outcome = ok(cmd_compare(&configs, &overrides, out.path()))?;
    ensure!(
        outcome.failures.is_empty(),
        "failed runs: {:?}",
        outcome.failures.iter().map(|(p, e)| format!("{}: {e}", p.display())).collect::<Vec<_>>()
    );
    let labels: BTreeSet<&str> = outcome.rows.iter().map(|(l, _)| l.as_str()).collect();
    ensure!(labels == LABELS.into_iter().collect(), "row labels {labels:?}");
    let table = ok(fs::read_to_string(outcome.dir.join("compare.csv")))?;
    ensure!(table.lines().count() == 7, "compare.csv has {} lines", table.lines().count());
    let svg = ok(fs::read_to_string(outcome.dir.join("curves.svg")))?;
    ensure!(LABELS.iter().all(|l| svg.contains(l)), "curves.svg lacks a variant label");
    for (_, r) in &outcome.rows {
        ensure!(r.l1_ab.is_finite() && r.l_perc.is_finite(), "non-finite metrics");
    }
    let train_images = ok(fs::read_to_string(
        fs::read_dir(outcome.dir.join("runs"))
            .map_err(|e| e.to_string())?
            .filter_map(|e| e.ok())
            .next()
            .ok_or("no run directories")?
            .path()
            .join("manifest.txt"),
    ))?
    .lines()
    .filter(|l| l.starts_with("train\t"))
    .count();
    ensure!(train_images == 200, "{train_images} training images");
    let summary: Vec<String> = outcome
        .rows
        .iter()
        .map(|(l, r)| format!("{l} L1 {:.2}", r.l1_ab))
        .collect();
    Ok(format!("6 rows, 200 images × 5 epochs: {}", summary.join(", ")))
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

const fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "colour round trip", budget: minutes(1), run: colour_round_trip },
        Criterion { id: 2, name: "gradient suite", budget: minutes(5), run: gradient_suite },
        Criterion { id: 3, name: "spectral normalization", budget: minutes(1), run: spectral_normalization },
        Criterion { id: 4, name: "architecture conformance", budget: minutes(2), run: architecture },
        Criterion { id: 5, name: "loss point values", budget: Duration::from_secs(10), run: loss_point_values },
        Criterion { id: 6, name: "training liveness and overfit probe", budget: minutes(15), run: overfit_probe },
        Criterion { id: 7, name: "determinism", budget: minutes(10), run: determinism },
        Criterion { id: 8, name: "metrics oracle equivalence", budget: minutes(1), run: metrics_oracles },
        Criterion { id: 9, name: "ablation harness", budget: minutes(60), run: ablation_harness },
    ];
    let wanted: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let result = (c.run)();
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > c.budget => Err(format!("{detail}; exceeded {:?} budget", c.budget)),
            other => other,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(e) => ("FAIL", e),
        };
        if result.is_err() {
            failed += 1;
        }
        println!("{tag} [{}] {} ({:.1}s): {detail}", c.id, c.name, elapsed.as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
