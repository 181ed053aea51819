//! Implementations of the `colourgan` subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use colourgan::checkpoint::{config_digest, hex, TensorFile};
use colourgan::colorspace::{lab_to_srgb, srgb_to_lab, LabImage};
use colourgan::data::{load_image, make_split, scan_dataset, DatasetIndex, Record};
use colourgan::generator::Generator;
use colourgan::metrics::{ab_histogram, format_db, AbChannel, EvalReport, Histogram};
use colourgan::perceptual::{FeatureExtractor, SeededConvStack, Vgg19};
use colourgan::training::{self, read_curve, unique_run_dir, EpochSummary, Trainer};

use crate::config::{Overrides, RunConfig};
use crate::error::CliError;
use crate::report;

/// Seed of the random extractor used when no pretrained weights are given.
pub const PERCEPTUAL_SEED: u64 = 0x5eed;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "config.toml";
/// Colourised test images saved per evaluation.
const SAMPLE_IMAGES: usize = 8;

type Extractor = Box<dyn FeatureExtractor<f32>>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Run(colourgan::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn stamp() -> String {
    chrono::Local::now().format("%Y%m%dT%H%M%S").to_string()
}

/// Reads the config file (or the defaults) and applies the overrides.
pub fn resolve_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(overrides);
    Ok(cfg)
}

pub fn extractor(cfg: &RunConfig) -> Result<Extractor, CliError> {
    Ok(match &cfg.vgg_weights {
        Some(path) => Box::new(Vgg19::from_file(path)?),
        None => Box::new(SeededConvStack::new(PERCEPTUAL_SEED)),
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub config: RunConfig,
    pub summaries: Vec<EpochSummary>,
    pub checkpoint: PathBuf,
}

/// Trains from a config, or resumes from a checkpoint inside its run
/// directory when `resume` is given.
pub fn cmd_train(
    config: Option<&Path>,
    overrides: &Overrides,
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome, CliError> {
    if let Some(ckpt) = resume {
        return resume_training(ckpt, overrides);
    }
    let mut cfg = resolve_config(config, overrides)?;
    let root = cfg.resolve_data_root()?;
    let train_cfg = cfg.to_train_config()?;
    let text = cfg.to_toml();
    let run_dir = unique_run_dir(out, &stamp(), &hex(&config_digest(&text)));
    fs::create_dir_all(&run_dir).map_err(|e| io_err(&run_dir, e))?;
    fs::write(run_dir.join(CONFIG_FILE), &text).map_err(|e| io_err(&run_dir, e))?;
    log::info!("run directory {}", run_dir.display());
    log::info!("resolved configuration:\n{text}");

    let index = make_split(&scan_dataset(&root)?, cfg.test_per_class, cfg.seed)?;
    if index.skipped > 0 {
        log::warn!("{} unreadable files skipped", index.skipped);
    }
    index.save_manifest(&run_dir.join(MANIFEST_FILE))?;

    let mut trainer = Trainer::<f32>::new(train_cfg, text)?;
    if cfg.perceptual_weight > 0.0 {
        trainer.set_extractor(extractor(&cfg)?);
    }
    let summaries = trainer.fit(&index.train(), &run_dir)?;
    Ok(TrainOutcome {
        checkpoint: run_dir.join("final.ckpt"),
        run_dir,
        config: cfg,
        summaries,
    })
}

fn load_checkpoint(path: &Path) -> Result<(TensorFile<f32>, RunConfig), CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    let file = TensorFile::<f32>::load(path)?;
    let cfg = RunConfig::from_toml(&file.config_text)?;
    Ok((file, cfg))
}

fn resume_training(ckpt: &Path, overrides: &Overrides) -> Result<TrainOutcome, CliError> {
    let (file, mut cfg) = load_checkpoint(ckpt)?;
    // Only the epoch budget may change on resume; everything else is fixed
    // by the checkpoint.
    if let Some(epochs) = overrides.epochs {
        cfg.epochs = epochs;
    }
    let run_dir = ckpt
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let index = DatasetIndex::load_manifest(&run_dir.join(MANIFEST_FILE))?;
    let mut trainer = Trainer::<f32>::from_checkpoint(cfg.to_train_config()?, &file)?;
    trainer.config_text = cfg.to_toml();
    if cfg.perceptual_weight > 0.0 {
        trainer.set_extractor(extractor(&cfg)?);
    }
    log::info!("resuming {} after epoch {}", run_dir.display(), trainer.epoch);
    let summaries = trainer.fit(&index.train(), &run_dir)?;
    Ok(TrainOutcome {
        checkpoint: run_dir.join("final.ckpt"),
        run_dir,
        config: cfg,
        summaries,
    })
}

/// Generator of a checkpoint, with its run configuration.
pub fn load_generator(path: &Path) -> Result<(Generator<f32>, RunConfig), CliError> {
    let (file, cfg) = load_checkpoint(path)?;
    let train_cfg = cfg.to_train_config()?;
    let g = Trainer::<f32>::from_checkpoint(train_cfg, &file)?.generator;
    Ok((g, cfg))
}

/// Colourises each input file into `out/<stem>_colour.png`.
pub fn cmd_colorize(checkpoint: &Path, inputs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>, CliError> {
    if inputs.is_empty() {
        return Err(CliError::Usage("no input images given".into()));
    }
    let (mut g, _) = load_generator(checkpoint)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut written = Vec::new();
    for input in inputs {
        let img = training::colorize(&mut g, input)?;
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let path = out.join(format!("{stem}_colour.png"));
        img.as_image().save(&path).map_err(|source| colourgan::Error::Image {
            path: path.clone(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}

/// Test split of a run: its manifest when present, otherwise a fresh
/// scan split with the run's seed.
fn test_rows(run_dir: Option<&Path>, cfg: &mut RunConfig) -> Result<Vec<Record>, CliError> {
    if let Some(manifest) = run_dir.map(|d| d.join(MANIFEST_FILE)).filter(|m| m.is_file()) {
        return Ok(DatasetIndex::load_manifest(&manifest)?.test());
    }
    let root = cfg.resolve_data_root()?;
    Ok(make_split(&scan_dataset(&root)?, cfg.test_per_class, cfg.seed)?.test())
}

/// Writes the table row, histogram files, the histogram plot and a few
/// colourised samples of one evaluation.
pub fn write_evaluation(
    dir: &Path,
    label: &str,
    report: &EvalReport,
    reference: (&Histogram, &Histogram),
    samples: &[LabImage<f32>],
) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    report::write_eval_csv(&dir.join("eval.csv"), &[(label.to_string(), report.clone())])?;
    report::write_histogram(&dir.join("hist_a.csv"), &report.hist_a)?;
    report::write_histogram(&dir.join("hist_b.csv"), &report.hist_b)?;
    report::write_histogram(&dir.join("reference_hist_a.csv"), reference.0)?;
    report::write_histogram(&dir.join("reference_hist_b.csv"), reference.1)?;
    report::plot_histograms(
        &dir.join("histograms.svg"),
        &[
            (label, &report.hist_a, &report.hist_b),
            ("reference", reference.0, reference.1),
        ],
    )?;
    let sample_dir = dir.join("samples");
    fs::create_dir_all(&sample_dir).map_err(|e| io_err(&sample_dir, e))?;
    for (i, lab) in samples.iter().take(SAMPLE_IMAGES).enumerate() {
        let path = sample_dir.join(format!("sample_{i:02}.png"));
        lab_to_srgb(lab)
            .as_image()
            .save(&path)
            .map_err(|source| colourgan::Error::Image { path, source })?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub label: String,
    pub report: EvalReport,
    pub dir: PathBuf,
}

fn evaluate_generator(
    g: &mut Generator<f32>,
    cfg: &RunConfig,
    rows: &[Record],
    dir: &Path,
) -> Result<EvalReport, CliError> {
    let ex = extractor(cfg)?;
    let (report, preds) = training::evaluate(g, rows, ex.as_ref(), cfg.batch_size)?;
    let size = cfg.image_size as u32;
    let truth: Vec<LabImage<f32>> = rows
        .iter()
        .map(|r| load_image(&r.path).map(|img| srgb_to_lab(&colourgan::data::resize_square(&img, size))))
        .collect::<Result<_, _>>()?;
    let reference = (ab_histogram(&truth, AbChannel::A)?, ab_histogram(&truth, AbChannel::B)?);
    write_evaluation(dir, &cfg.label, &report, (&reference.0, &reference.1), &preds)?;
    log::info!(
        "{}: l1_ab {:.4} psnr {} dB l_perc {:.4} intersection a {:.4} b {:.4}",
        cfg.label,
        report.l1_ab,
        format_db(report.psnr_db),
        report.l_perc,
        report.intersection_a,
        report.intersection_b
    );
    Ok(report)
}

/// Scores a checkpoint on its run's test split. Results go to `out`, or
/// to an `eval` directory beside the checkpoint.
pub fn cmd_evaluate(checkpoint: &Path, out: Option<&Path>, data_root: Option<&Path>) -> Result<EvalOutcome, CliError> {
    let (mut g, mut cfg) = load_generator(checkpoint)?;
    if let Some(root) = data_root {
        cfg.data_root = Some(root.to_path_buf());
    }
    let run_dir = checkpoint.parent();
    let rows = if data_root.is_some() {
        test_rows(None, &mut cfg)?
    } else {
        test_rows(run_dir, &mut cfg)?
    };
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir.unwrap_or(Path::new(".")).join("eval"));
    let report = evaluate_generator(&mut g, &cfg, &rows, &dir)?;
    Ok(EvalOutcome {
        label: cfg.label,
        report,
        dir,
    })
}

/// Collects image files from a list of files and directories (one level).
fn image_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| io_err(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file())
                .collect();
            entries.sort();
            files.extend(entries);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(CliError::Usage(format!("{} does not exist", p.display())));
        }
    }
    Ok(files)
}

/// Chrominance histograms of a set of images, e.g. a real-data prior.
pub fn cmd_histogram(inputs: &[PathBuf], out: &Path) -> Result<(Histogram, Histogram), CliError> {
    let files = image_files(inputs)?;
    if files.is_empty() {
        return Err(CliError::Usage("no input images given".into()));
    }
    let mut ha = Histogram::ab();
    let mut hb = Histogram::ab();
    for f in &files {
        let lab = srgb_to_lab::<f32>(&load_image(f)?);
        let one = std::slice::from_ref(&lab);
        ha.merge(&ab_histogram(one, AbChannel::A)?)?;
        hb.merge(&ab_histogram(one, AbChannel::B)?)?;
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    report::write_histogram(&out.join("hist_a.csv"), &ha)?;
    report::write_histogram(&out.join("hist_b.csv"), &hb)?;
    report::plot_histograms(&out.join("histograms.svg"), &[("images", &ha, &hb)])?;
    Ok((ha, hb))
}

#[derive(Debug)]
pub struct CompareOutcome {
    pub dir: PathBuf,
    /// Successful runs, sorted by perceptual distance.
    pub rows: Vec<(String, EvalReport)>,
    /// Config path and error of each failed run.
    pub failures: Vec<(PathBuf, CliError)>,
}

impl CompareOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            3
        }
    }
}

/// Trains and evaluates every config in turn, then writes a combined
/// table sorted by `l_perc` and an overlay of the learning curves. A
/// failing run is recorded and the rest continue.
pub fn cmd_compare(configs: &[PathBuf], overrides: &Overrides, out: &Path) -> Result<CompareOutcome, CliError> {
    if configs.len() < 2 {
        return Err(CliError::Usage("compare needs at least two configs".into()));
    }
    let mut joined = String::new();
    for c in configs {
        joined.push_str(&fs::read_to_string(c).unwrap_or_default());
    }
    let dir = unique_run_dir(out, &stamp(), &hex(&config_digest(&joined)));
    let runs_dir = dir.join("runs");
    fs::create_dir_all(&runs_dir).map_err(|e| io_err(&runs_dir, e))?;

    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut failures = Vec::new();
    for path in configs {
        log::info!("compare: {}", path.display());
        let result = (|| -> Result<(String, EvalReport, Vec<EpochSummary>), CliError> {
            let run = cmd_train(Some(path), overrides, &runs_dir, None)?;
            let (mut g, mut cfg) = load_generator(&run.checkpoint)?;
            let rows = test_rows(Some(&run.run_dir), &mut cfg)?;
            let report = evaluate_generator(&mut g, &cfg, &rows, &run.run_dir.join("eval"))?;
            let curve = read_curve(&run.run_dir.join("curve.csv"))?;
            Ok((cfg.label, report, curve))
        })();
        match result {
            Ok((label, report, curve)) => {
                curves.push((label.clone(), curve));
                rows.push((label, report));
            }
            Err(e) => {
                log::error!("{} failed: {e}", path.display());
                failures.push((path.clone(), e));
            }
        }
    }
    rows.sort_by(|a, b| a.1.l_perc.total_cmp(&b.1.l_perc));
    report::write_eval_csv(&dir.join("compare.csv"), &rows)?;
    if !curves.is_empty() {
        report::plot_curves(&dir.join("curves.svg"), &curves)?;
    }
    if !failures.is_empty() {
        let text: String = failures
            .iter()
            .map(|(p, e)| format!("{}\t{e}\n", p.display()))
            .collect();
        fs::write(dir.join("failures.txt"), text).map_err(|e| io_err(&dir, e))?;
    }
    Ok(CompareOutcome { dir, rows, failures })
}
