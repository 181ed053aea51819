//! Alternating GAN training, checkpointing, colourisation and evaluation.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array4, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::checkpoint::TensorFile;
use crate::colorspace::{denormalize, lab_to_srgb, normalize, srgb_to_lab, LabImage, NetworkTensors, SrgbImage};
use crate::data::{prefetch, resize, resize_square, BatchJob, Record};
use crate::data::{load_image, Batch};
use crate::discriminator::{DiscriminatorConfig, MultiScaleDiscriminator};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::losses::{discriminator_loss, generator_loss, perceptual_loss_var, LossConfig, LossReport, PerceptualNorm, ScaleLoss};
use crate::metrics::{ab_histogram, histogram_intersection, l1_ab, psnr, AbChannel, EvalReport};
use crate::nn::{Ctx, GradMap, Mode, Module};
use crate::perceptual::{lab_norm_to_srgb, FeatureExtractor};
use crate::scalar::Scalar;

pub const CURVE_HEADER: &str = "epoch,g_adv,g_l1,d_loss";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_interval: usize,
    pub image_size: usize,
    /// Random horizontal flips.
    pub augment: bool,
    pub workers: usize,
    /// Weight of the perceptual term in the generator objective (0 = off).
    pub perceptual_weight: f64,
    pub perceptual_norm: PerceptualNorm,
}

impl TrainConfig {
    /// Defaults for square images of side `image_size`.
    pub fn for_image_size(image_size: usize) -> Self {
        Self {
            generator: GeneratorConfig::for_image_size(image_size),
            discriminator: DiscriminatorConfig::default(),
            loss: LossConfig::default(),
            optimizer: AdamConfig::default(),
            epochs: 20,
            batch_size: 4,
            seed: 0,
            checkpoint_interval: 5,
            image_size,
            augment: false,
            workers: 1,
            perceptual_weight: 0.0,
            perceptual_norm: PerceptualNorm::L1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let opt = &self.optimizer;
        if !(opt.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", opt.learning_rate)));
        }
        for (name, b) in [("beta1", opt.beta1), ("beta2", opt.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batch statistics".into()));
        }
        if self.generator.input_size != self.image_size {
            return Err(Error::Config(format!(
                "generator input size {} differs from image_size {}",
                self.generator.input_size, self.image_size
            )));
        }
        if self.loss.n_scales != self.discriminator.n_scales {
            return Err(Error::Config("loss and discriminator disagree on the scale count".into()));
        }
        if !(self.perceptual_weight >= 0.0) {
            return Err(Error::Config("perceptual_weight must be non-negative".into()));
        }
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.loss.validate()
    }
}

/// Adam with bias correction, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub cfg: AdamConfig,
    pub t: u64,
    m: HashMap<String, Tensor<F>>,
    v: HashMap<String, Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Updates every parameter of `module` that has a gradient in `grads`.
    pub fn step(&mut self, module: &mut dyn Module<F>, grads: &GradMap<F>) {
        self.t += 1;
        let c = self.cfg;
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
        let step = F::lit(c.learning_rate / (1.0 - c.beta1.powi(self.t as i32)));
        let inv_bc2 = F::lit(1.0 / (1.0 - c.beta2.powi(self.t as i32)));
        let eps = F::lit(c.eps);
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        module.visit_params_mut(&mut |p| {
            let Some(g) = grads.get(&p.name) else { return };
            let m = m_all
                .entry(p.name.clone())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            let v = v_all
                .entry(p.name.clone())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            let (w, m, v) = (
                p.value.as_slice_mut().expect("contiguous parameter"),
                m.as_slice_mut().expect("contiguous moment"),
                v.as_slice_mut().expect("contiguous moment"),
            );
            let g = g.as_standard_layout();
            let g = g.as_slice().expect("contiguous gradient");
            for i in 0..w.len() {
                let gi = g[i];
                let mi = b1 * m[i] + one_b1 * gi;
                let vi = b2 * v[i] + one_b2 * gi * gi;
                m[i] = mi;
                v[i] = vi;
                w[i] -= step * mi / ((vi * inv_bc2).sqrt() + eps);
            }
        });
    }

    fn save(&self, prefix: &str, file: &mut TensorFile<F>) {
        file.push(format!("{prefix}.t"), ArrayD::from_elem(IxDyn(&[]), F::lit(self.t as f64)));
        let mut names: Vec<&String> = self.m.keys().collect();
        names.sort();
        for name in names {
            file.push(format!("{prefix}.m.{name}"), self.m[name].clone());
            file.push(format!("{prefix}.v.{name}"), self.v[name].clone());
        }
    }

    fn load(&mut self, prefix: &str, file: &TensorFile<F>) -> Result<()> {
        let t = file
            .get(&format!("{prefix}.t"))
            .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}.t")))?;
        self.t = t.iter().next().map_or(0, |v| v.as_f64() as u64);
        self.m.clear();
        self.v.clear();
        let m_prefix = format!("{prefix}.m.");
        for (name, m) in &file.tensors {
            let Some(param) = name.strip_prefix(&m_prefix) else { continue };
            let v = file
                .get(&format!("{prefix}.v.{param}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing second moment of {param}")))?;
            self.m.insert(param.to_string(), m.clone());
            self.v.insert(param.to_string(), v.clone());
        }
        Ok(())
    }
}

/// Values of one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub losses: LossReport,
    /// Largest generator-parameter gradient produced by the discriminator
    /// loss; zero when the generated sample is properly detached.
    pub detach_leak: f64,
}

/// Per-epoch means appended to the curve log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub g_adv: f64,
    pub g_l1: f64,
    pub d_loss: f64,
}

impl EpochSummary {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.g_adv, self.g_l1, self.d_loss)
    }
}

/// Parses a curve log written by [`Trainer::fit`].
pub fn read_curve(path: &Path) -> Result<Vec<EpochSummary>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err(Error::Data(format!("{}: missing curve header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Data(format!("bad curve row '{l}'")))
            };
            if f.len() != 4 {
                return Err(Error::Data(format!("bad curve row '{l}'")));
            }
            Ok(EpochSummary {
                epoch: num(0)? as usize,
                g_adv: num(1)?,
                g_l1: num(2)?,
                d_loss: num(3)?,
            })
        })
        .collect()
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Models, optimizers and progress counters of one run.
pub struct Trainer<F: Scalar> {
    pub cfg: TrainConfig,
    /// Text persisted in checkpoints (the resolved run configuration).
    pub config_text: String,
    pub generator: Generator<F>,
    pub discriminator: MultiScaleDiscriminator<F>,
    pub opt_g: Adam<F>,
    pub opt_d: Adam<F>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimization steps.
    pub step: u64,
    extractor: Option<Box<dyn FeatureExtractor<F>>>,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(cfg: TrainConfig, config_text: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let generator = Generator::new(&cfg.generator, &mut rng)?;
        let discriminator = MultiScaleDiscriminator::new(&cfg.discriminator, &mut rng)?;
        Ok(Self {
            opt_g: Adam::new(cfg.optimizer),
            opt_d: Adam::new(cfg.optimizer),
            cfg,
            config_text: config_text.into(),
            generator,
            discriminator,
            epoch: 0,
            step: 0,
            extractor: None,
        })
    }

    /// Enables the perceptual term, required when `perceptual_weight > 0`.
    pub fn set_extractor(&mut self, extractor: Box<dyn FeatureExtractor<F>>) {
        self.extractor = Some(extractor);
    }

    /// One discriminator update on real and detached generated samples,
    /// followed by one generator update.
    pub fn train_step(&mut self, batch: &Batch<F>) -> Result<StepReport> {
        let (epoch, step) = (self.epoch + 1, self.step as usize + 1);
        let non_finite = |what| Error::NonFinite { what, epoch, step };
        let tape = Tape::new();
        let mut g_ctx = Ctx::new(&tape, Mode::Train, true);
        let l = tape.constant(batch.l_norm.clone());
        let real_ab = tape.constant(batch.ab_norm.clone());
        let fake_ab = self
            .generator
            .forward(&mut g_ctx, l, mix_seed(self.cfg.seed, self.step))?;

        let mut d_ctx = Ctx::new(&tape, Mode::Train, true);
        let real_logits = self.discriminator.forward(&mut d_ctx, l, real_ab)?;
        let fake_logits = self.discriminator.forward(&mut d_ctx, l, fake_ab.detach())?;
        let (d_loss, d_per_scale) = discriminator_loss(&real_logits, &fake_logits)?;
        let d_value = d_loss.item().as_f64();
        if !d_value.is_finite() {
            return Err(non_finite("discriminator loss"));
        }
        let d_grads = tape.backward(d_loss);
        let detach_leak = g_ctx.collect_grads(&d_grads).max_abs().as_f64();
        self.opt_d.step(&mut self.discriminator, &d_ctx.collect_grads(&d_grads));
        drop(d_grads);

        let mut frozen = Ctx::new(&tape, Mode::Train, false);
        let fake_logits = self.discriminator.forward(&mut frozen, l, fake_ab)?;
        let g = generator_loss(&fake_logits, fake_ab, real_ab, &self.cfg.loss)?;
        let mut total = g.total;
        let mut g_perc = 0.0;
        if self.cfg.perceptual_weight > 0.0 {
            let extractor = self
                .extractor
                .as_deref()
                .ok_or_else(|| Error::Config("perceptual_weight > 0 needs a feature extractor".into()))?;
            let real_rgb = lab_norm_to_srgb(l, real_ab)?;
            let fake_rgb = lab_norm_to_srgb(l, fake_ab)?;
            let perc = perceptual_loss_var(extractor, real_rgb, fake_rgb, self.cfg.perceptual_norm)?;
            g_perc = perc.item().as_f64();
            total = total.add(perc.scale(F::lit(self.cfg.perceptual_weight)));
        }
        let g_value = total.item().as_f64();
        if !g_value.is_finite() {
            return Err(non_finite("generator loss"));
        }
        let g_grads = tape.backward(total);
        self.opt_g.step(&mut self.generator, &g_ctx.collect_grads(&g_grads));
        self.step += 1;

        let per_scale = d_per_scale
            .iter()
            .zip(&g.per_scale)
            .map(|(&d_loss, &g_adv)| ScaleLoss { d_loss, g_adv })
            .collect();
        Ok(StepReport {
            losses: LossReport {
                d_loss: d_value,
                g_adv: g.adversarial.item().as_f64(),
                g_l1: g.l1.item().as_f64(),
                g_total: g_value,
                g_perc,
                per_scale,
            },
            detach_leak,
        })
    }

    /// Batches of the next epoch: a seeded shuffle cut into full batches.
    pub fn epoch_jobs(&self, train: &[Record]) -> Result<Vec<BatchJob>> {
        let m = self.cfg.batch_size;
        if train.len() < m {
            return Err(Error::Data(format!(
                "training split has {} images, fewer than batch_size {m}",
                train.len()
            )));
        }
        let epoch = self.epoch as u64 + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, epoch << 32)));
        Ok(order
            .chunks_exact(m)
            .enumerate()
            .map(|(i, chunk)| BatchJob {
                rows: chunk.iter().map(|&k| train[k].clone()).collect(),
                flip_seed: self
                    .cfg
                    .augment
                    .then(|| mix_seed(self.cfg.seed, (epoch << 32) | (i as u64 + 1))),
            })
            .collect())
    }

    /// One pass over `train`, returning the mean losses.
    pub fn train_epoch(&mut self, train: &[Record]) -> Result<EpochSummary> {
        let jobs = self.epoch_jobs(train)?;
        let n = jobs.len() as f64;
        let (mut adv, mut l1, mut d) = (0.0, 0.0, 0.0);
        for batch in prefetch::<F>(jobs, self.cfg.image_size as u32, self.cfg.workers) {
            let r = self.train_step(&batch?)?.losses;
            adv += r.g_adv;
            l1 += r.g_l1;
            d += r.d_loss;
        }
        self.epoch += 1;
        Ok(EpochSummary {
            epoch: self.epoch,
            g_adv: adv / n,
            g_l1: l1 / n,
            d_loss: d / n,
        })
    }

    /// Trains until `cfg.epochs`, appending to `run_dir/curve.csv` and
    /// writing `checkpoint_XXXX.ckpt` at the interval and `final.ckpt` at the
    /// end. A non-finite loss aborts without overwriting earlier checkpoints.
    pub fn fit(&mut self, train: &[Record], run_dir: &Path) -> Result<Vec<EpochSummary>> {
        fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let curve = run_dir.join("curve.csv");
        if !curve.exists() {
            fs::write(&curve, format!("{CURVE_HEADER}\n")).map_err(|e| Error::io(&curve, e))?;
        }
        let mut out = Vec::new();
        while self.epoch < self.cfg.epochs {
            let summary = self.train_epoch(train)?;
            log::info!(
                "epoch {}: g_adv {:.4} g_l1 {:.4} d_loss {:.4}",
                summary.epoch,
                summary.g_adv,
                summary.g_l1,
                summary.d_loss
            );
            let mut f = fs::OpenOptions::new()
                .append(true)
                .open(&curve)
                .map_err(|e| Error::io(&curve, e))?;
            writeln!(f, "{}", summary.csv_row()).map_err(|e| Error::io(&curve, e))?;
            out.push(summary);
            let interval = self.cfg.checkpoint_interval;
            if interval > 0 && self.epoch % interval == 0 && self.epoch < self.cfg.epochs {
                self.save(&run_dir.join(format!("checkpoint_{:04}.ckpt", self.epoch)))?;
            }
        }
        self.save(&run_dir.join("final.ckpt"))?;
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> TensorFile<F> {
        let mut file = TensorFile::new(self.config_text.clone());
        file.epoch = self.epoch as u64;
        file.seed = self.cfg.seed;
        file.step = self.step;
        let mut push = |p: &crate::nn::Param<F>| file.push(p.name.clone(), p.value.clone());
        self.generator.visit_params(&mut push);
        self.generator.visit_buffers(&mut push);
        self.discriminator.visit_params(&mut push);
        self.discriminator.visit_buffers(&mut push);
        self.opt_g.save("opt.gen", &mut file);
        self.opt_d.save("opt.disc", &mut file);
        file
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    /// Rebuilds a trainer for `cfg` and restores the checkpointed state.
    pub fn from_checkpoint(cfg: TrainConfig, file: &TensorFile<F>) -> Result<Self> {
        let mut t = Self::new(cfg, file.config_text.clone())?;
        restore(&mut t.generator, file)?;
        restore(&mut t.discriminator, file)?;
        t.opt_g.load("opt.gen", file)?;
        t.opt_d.load("opt.disc", file)?;
        t.epoch = file.epoch as usize;
        t.step = file.step;
        Ok(t)
    }

    /// `σ̂` of every spectrally normalized discriminator weight.
    pub fn discriminator_sigmas(&self) -> Vec<(String, f64)> {
        self.discriminator
            .convs()
            .filter_map(|c| c.effective_sigma().map(|s| (c.weight.name.clone(), s.as_f64())))
            .collect()
    }
}

/// Overwrites every parameter and buffer of `module` from `file`.
pub fn restore<F: Scalar>(module: &mut dyn Module<F>, file: &TensorFile<F>) -> Result<()> {
    let mut err = None;
    let mut load = |p: &mut crate::nn::Param<F>| {
        if err.is_some() {
            return;
        }
        match file.get(&p.name) {
            Some(t) if t.shape() == p.value.shape() => p.value = t.clone(),
            Some(t) => {
                err = Some(Error::Checkpoint(format!(
                    "{} has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )))
            }
            None => err = Some(Error::Checkpoint(format!("missing tensor {}", p.name))),
        }
    };
    module.visit_params_mut(&mut load);
    module.visit_buffers_mut(&mut load);
    err.map_or(Ok(()), Err)
}

/// Tracks the true largest singular value of each spectrally normalized
/// discriminator weight with its own warm-started power iteration, to
/// compare against the layer's running estimate.
#[derive(Clone, Debug, Default)]
pub struct SigmaMonitor {
    vectors: HashMap<String, ndarray::Array1<f64>>,
}

impl SigmaMonitor {
    /// Iterations on first sight of a weight and on later checks.
    pub const COLD: usize = 200;
    pub const WARM: usize = 10;

    /// `σ(W) / σ̂` per weight: the spectral norm of the normalized weight
    /// actually used in the forward pass.
    pub fn normalized_sigmas<F: Scalar>(&mut self, d: &MultiScaleDiscriminator<F>) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for conv in d.convs() {
            let Some(sigma_hat) = conv.effective_sigma() else { continue };
            let w = &conv.weight.value;
            let rows = w.shape()[0];
            let m = w
                .mapv(|v| v.as_f64())
                .into_shape_with_order((rows, w.len() / rows))
                .expect("standard layout");
            let (mut u, iters) = match self.vectors.get(&conv.weight.name) {
                Some(u) => (u.clone(), Self::WARM),
                None => (ndarray::Array1::from_elem(rows, 1.0 / (rows as f64).sqrt()), Self::COLD),
            };
            let mut sigma = 0.0;
            for _ in 0..iters {
                let v = m.t().dot(&u);
                let nv = v.dot(&v).sqrt().max(1e-300);
                let mu = m.dot(&(v / nv));
                sigma = mu.dot(&mu).sqrt();
                u = mu / sigma.max(1e-300);
            }
            self.vectors.insert(conv.weight.name.clone(), u);
            out.push((conv.weight.name.clone(), sigma / sigma_hat.as_f64().max(1e-12)));
        }
        out
    }
}

/// Bilinear resize of a plane with half-pixel centres.
pub fn resize_plane<F: Scalar>(src: &Array2<F>, height: usize, width: usize) -> Array2<F> {
    let (sh, sw) = src.dim();
    if (sh, sw) == (height, width) {
        return src.clone();
    }
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let x = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let x0 = x.floor() as usize;
        (x0, (x0 + 1).min(n_in - 1), x - x0 as f64)
    };
    Array2::from_shape_fn((height, width), |(y, x)| {
        let (y0, y1, fy) = coord(y, height, sh);
        let (x0, x1, fx) = coord(x, width, sw);
        let v = |yy: usize, xx: usize| src[[yy, xx]].as_f64();
        let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
        let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
        F::lit(top * (1.0 - fy) + bottom * fy)
    })
}

/// Predicted Lab images for a batch of equally sized sRGB inputs: the
/// network sees each image resized to its input size, and the predicted
/// chrominance is resized back and paired with the input's own lightness.
pub fn colorize_lab_batch<F: Scalar>(generator: &mut Generator<F>, images: &[SrgbImage]) -> Result<Vec<LabImage<F>>> {
    let size = generator.config().input_size;
    let mut l_norm = Array4::<F>::zeros((images.len(), 1, size, size));
    for (i, img) in images.iter().enumerate() {
        let small = normalize(&srgb_to_lab::<F>(&resize_square(img, size as u32)));
        l_norm.slice_mut(s![i, 0, .., ..]).assign(&small.l_norm);
    }
    let ab = generator.infer(&l_norm.into_dyn(), Mode::Eval, 0)?;
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let lab = srgb_to_lab::<F>(img);
            let ab_i = ab.index_axis(Axis(0), i).to_owned().into_dimensionality().expect("[2, S, S]");
            let tensors = NetworkTensors {
                l_norm: Array2::zeros((size, size)),
                ab_norm: ab_i,
            };
            let pred = denormalize(&tensors)?;
            let (h, w) = (lab.height(), lab.width());
            lab.with_ab(resize_plane(&pred.a, h, w), resize_plane(&pred.b, h, w))
        })
        .collect()
}

/// Colourises one image, keeping its lightness exactly.
pub fn colorize_lab<F: Scalar>(generator: &mut Generator<F>, image: &SrgbImage) -> Result<LabImage<F>> {
    Ok(colorize_lab_batch(generator, std::slice::from_ref(image))?.remove(0))
}

/// Colourises one image file; the result has the input's resolution.
pub fn colorize<F: Scalar>(generator: &mut Generator<F>, path: &Path) -> Result<SrgbImage> {
    let img = load_image(path)?;
    let size = generator.config().input_size as u32;
    if img.width() != size || img.height() != size {
        log::warn!(
            "{} is {}x{}; the network runs at {size}x{size} and the colours are resized back",
            path.display(),
            img.width(),
            img.height()
        );
    }
    Ok(lab_to_srgb(&colorize_lab(generator, &img)?))
}

/// Metrics of predicted against reference Lab images of the same size.
pub fn evaluate_predictions<F: Scalar>(
    pred: &[LabImage<F>],
    truth: &[LabImage<F>],
    extractor: &dyn FeatureExtractor<F>,
) -> Result<EvalReport> {
    let l1 = l1_ab(pred, truth)?;
    let pred_rgb: Vec<SrgbImage> = pred.iter().map(lab_to_srgb).collect();
    let truth_rgb: Vec<SrgbImage> = truth.iter().map(lab_to_srgb).collect();
    let psnr_db = psnr(&pred_rgb, &truth_rgb)?;
    let mut l_perc = 0.0;
    for (p, t) in pred_rgb.iter().zip(&truth_rgb) {
        l_perc += crate::losses::perceptual_loss(extractor, &rgb_tensor(t), &rgb_tensor(p), PerceptualNorm::L1)?;
    }
    l_perc /= pred.len().max(1) as f64;
    let hist_a = ab_histogram(pred, AbChannel::A)?;
    let hist_b = ab_histogram(pred, AbChannel::B)?;
    let intersection_a = histogram_intersection(&hist_a, &ab_histogram(truth, AbChannel::A)?)?;
    let intersection_b = histogram_intersection(&hist_b, &ab_histogram(truth, AbChannel::B)?)?;
    Ok(EvalReport {
        l1_ab: l1,
        psnr_db,
        l_perc,
        hist_a,
        hist_b,
        intersection_a,
        intersection_b,
    })
}

/// `[1, 3, H, W]` tensor in [0, 1].
pub fn rgb_tensor<F: Scalar>(img: &SrgbImage) -> Tensor<F> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    ArrayD::from_shape_fn(IxDyn(&[1, 3, h, w]), |i| F::lit(raw[(i[2] * w + i[3]) * 3 + i[1]] as f64 / 255.0))
}

/// Colourises `rows` (resized to the network size) and scores them against
/// the originals.
pub fn evaluate<F: Scalar>(
    generator: &mut Generator<F>,
    rows: &[Record],
    extractor: &dyn FeatureExtractor<F>,
    batch_size: usize,
) -> Result<(EvalReport, Vec<LabImage<F>>)> {
    if rows.is_empty() {
        return Err(Error::Data("no test images to evaluate".into()));
    }
    let size = generator.config().input_size as u32;
    let mut pred = Vec::with_capacity(rows.len());
    let mut truth = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(batch_size.max(1)) {
        let images = chunk
            .iter()
            .map(|r| load_image(&r.path).map(|img| resize(&img, size, size)))
            .collect::<Result<Vec<_>>>()?;
        pred.extend(colorize_lab_batch(generator, &images)?);
        truth.extend(images.iter().map(srgb_to_lab::<F>));
    }
    Ok((evaluate_predictions(&pred, &truth, extractor)?, pred))
}

/// Unique run directory `<out>/<stamp>-<digest8>`, suffixed `-N` if taken.
pub fn unique_run_dir(out: &Path, stamp: &str, digest_hex: &str) -> PathBuf {
    let base = format!("{stamp}-{}", &digest_hex[..8.min(digest_hex.len())]);
    let mut dir = out.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = out.join(format!("{base}-{n}"));
        n += 1;
    }
    dir
}

/// Human-readable summary of a generator's block structure.
pub fn describe_generator<F: Scalar>(g: &Generator<F>) -> String {
    let mut out = String::new();
    let cfg = g.config();
    for (i, b) in g.encoder_info().iter().enumerate() {
        writeln!(out, "enc{i}: conv4x4/2 {}->{} {}", b.in_channels, b.out_channels, b.norm).unwrap();
    }
    for (j, b) in g.decoder_info().iter().enumerate() {
        writeln!(
            out,
            "dec{j}: deconv4x4/2 {}->{} {} + skip enc{}",
            b.in_channels,
            b.out_channels,
            b.norm,
            cfg.skip_partner(j)
        )
        .unwrap();
    }
    let o = g.output_info();
    write!(out, "out: deconv4x4/2 {}->{} tanh", o.in_channels, o.out_channels).unwrap();
    out
}
