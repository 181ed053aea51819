use std::fs;
use std::path::Path;

use colourgan::checkpoint::TensorFile;
use colourgan::colorspace::{srgb_to_lab, SrgbImage};
use colourgan::data::{load_batch, scan_dataset, write_synthetic_dataset, Record};
use colourgan::nn::{Mode, Module};
use colourgan::training::{colorize, read_curve, TrainConfig, Trainer, CURVE_HEADER};
use colourgan::Error;
use image::{GrayImage, Luma};
use ndarray::ArrayD;
use tempfile::TempDir;

const SIZE: usize = 32;

fn config(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::for_image_size(SIZE);
    cfg.discriminator.n_scales = 1;
    cfg.loss.n_scales = 1;
    cfg.batch_size = 2;
    cfg.epochs = epochs;
    cfg.checkpoint_interval = 1;
    cfg.seed = 3;
    cfg
}

fn images(n: usize) -> (TempDir, Vec<Record>) {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), 2, n / 2, 40, 1).unwrap();
    let rows = scan_dataset(dir.path()).unwrap().records;
    (dir, rows)
}

fn trainer(epochs: usize) -> Trainer<f32> {
    Trainer::new(config(epochs), "test").unwrap()
}

fn eval_output(t: &mut Trainer<f32>, rows: &[Record]) -> ArrayD<f32> {
    let batch = load_batch::<f32>(&rows[..2], SIZE as u32, None).unwrap();
    t.generator.infer(&batch.l_norm, Mode::Eval, 0).unwrap()
}

#[test]
fn one_epoch_logs_one_finite_row() {
    let (_data, rows) = images(8);
    let run = tempfile::tempdir().unwrap();
    let mut t = trainer(1);
    let summaries = t.fit(&rows, run.path()).unwrap();
    assert_eq!(summaries.len(), 1);
    assert_eq!(t.step, 4);
    let text = fs::read_to_string(run.path().join("curve.csv")).unwrap();
    assert_eq!(text.lines().next(), Some(CURVE_HEADER));
    let curve = read_curve(&run.path().join("curve.csv")).unwrap();
    assert_eq!(curve, summaries);
    let r = &curve[0];
    assert!(r.g_adv.is_finite() && r.g_l1.is_finite() && r.d_loss.is_finite());
    assert!(run.path().join("final.ckpt").exists());
}

#[test]
fn steps_keep_the_detach_contract() {
    let (_data, rows) = images(4);
    let mut t = trainer(1);
    let batch = load_batch::<f32>(&rows[..2], SIZE as u32, None).unwrap();
    for _ in 0..3 {
        assert_eq!(t.train_step(&batch).unwrap().detach_leak, 0.0);
    }
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let (_data, rows) = images(8);
    let straight = tempfile::tempdir().unwrap();
    let mut full = trainer(2);
    full.fit(&rows, straight.path()).unwrap();

    let resumed = tempfile::tempdir().unwrap();
    let mut first = trainer(1);
    first.fit(&rows, resumed.path()).unwrap();
    let before = eval_output(&mut first, &rows);

    let file = TensorFile::load(&resumed.path().join("final.ckpt")).unwrap();
    assert_eq!(file.epoch, 1);
    let mut second = Trainer::<f32>::from_checkpoint(config(2), &file).unwrap();
    assert_eq!(eval_output(&mut second, &rows), before);
    second.fit(&rows, resumed.path()).unwrap();

    let a = read_curve(&straight.path().join("curve.csv")).unwrap();
    let b = read_curve(&resumed.path().join("curve.csv")).unwrap();
    assert_eq!(b.iter().map(|r| r.epoch).collect::<Vec<_>>(), [1, 2]);
    assert_eq!(a, b);
    assert_eq!(eval_output(&mut full, &rows), eval_output(&mut second, &rows));
}

#[test]
fn same_seed_gives_identical_curves() {
    let (_data, rows) = images(8);
    let curve = || {
        let run = tempfile::tempdir().unwrap();
        trainer(1).fit(&rows, run.path()).unwrap();
        fs::read_to_string(run.path().join("curve.csv")).unwrap()
    };
    assert_eq!(curve(), curve());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (_data, rows) = images(4);
    let mut t = trainer(1);
    let batch = load_batch::<f32>(&rows[..2], SIZE as u32, None).unwrap();
    t.train_step(&batch).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    t.save(&path).unwrap();
    let file = TensorFile::load(&path).unwrap();
    assert_eq!(file.tensors, t.to_checkpoint().tensors);
    let mut back = Trainer::<f32>::from_checkpoint(config(1), &file).unwrap();
    assert_eq!(back.step, 1);
    assert_eq!(eval_output(&mut back, &rows), eval_output(&mut t, &rows));
    assert_eq!(back.to_checkpoint().to_bytes().unwrap(), file.to_bytes().unwrap());
}

#[test]
fn non_finite_loss_aborts_and_keeps_checkpoints() {
    let (_data, rows) = images(4);
    let run = tempfile::tempdir().unwrap();
    let mut t = trainer(1);
    t.fit(&rows, run.path()).unwrap();
    let saved = fs::read(run.path().join("final.ckpt")).unwrap();

    t.cfg.epochs = 2;
    t.generator.visit_params_mut(&mut |p| {
        if p.name.starts_with("gen.out") {
            p.value.fill(f32::NAN);
        }
    });
    let err = t.fit(&rows, run.path()).unwrap_err();
    assert!(matches!(err, Error::NonFinite { epoch: 2, .. }), "{err}");
    assert_eq!(fs::read(run.path().join("final.ckpt")).unwrap(), saved);
    assert_eq!(read_curve(&run.path().join("curve.csv")).unwrap().len(), 1);
}

fn grey_file(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("grey.png");
    GrayImage::from_fn(48, 40, |x, y| Luma([(20 + x * 3 + y * 2) as u8])).save(&path).unwrap();
    path
}

fn lightness(img: &SrgbImage) -> Vec<f64> {
    srgb_to_lab::<f64>(img).l.iter().copied().collect()
}

#[test]
fn colorize_keeps_lightness_of_neutral_predictions() {
    // With a zero output head every prediction is neutral and in gamut,
    // so the recombined image carries the input lightness unchanged.
    let dir = tempfile::tempdir().unwrap();
    let path = grey_file(dir.path());
    let mut g = trainer(1).generator;
    g.visit_params_mut(&mut |p| {
        if p.name.starts_with("gen.out") {
            p.value.fill(0.0);
        }
    });
    let out = colorize(&mut g, &path).unwrap();
    assert_eq!((out.width(), out.height()), (48, 40));
    let input = SrgbImage::from_raw(48, 40, 3, image::open(&path).unwrap().to_rgb8().into_raw()).unwrap();
    for (a, b) in lightness(&out).iter().zip(lightness(&input)) {
        assert!((a - b).abs() <= 0.5, "{a} vs {b}");
    }
}

#[test]
fn untrained_colorize_is_deterministic_and_writes_png() {
    let dir = tempfile::tempdir().unwrap();
    let path = grey_file(dir.path());
    let mut g = trainer(1).generator;
    let a = colorize(&mut g, &path).unwrap();
    let b = colorize(&mut g, &path).unwrap();
    assert_eq!(a, b);
    let out = dir.path().join("out.png");
    a.as_image().save(&out).unwrap();
    let back = image::open(&out).unwrap().to_rgb8();
    assert_eq!(back.as_raw(), a.as_raw());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = config(1);
    cfg.optimizer.learning_rate = 0.0;
    assert!(Trainer::<f32>::new(cfg, "").is_err());
    let mut cfg = config(1);
    cfg.epochs = 0;
    assert!(Trainer::<f32>::new(cfg, "").is_err());
    let mut cfg = config(1);
    cfg.loss.n_scales = 2;
    assert!(Trainer::<f32>::new(cfg, "").is_err());
}
