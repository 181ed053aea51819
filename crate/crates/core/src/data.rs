//! Dataset scanning, deterministic train/test splits and batch assembly.
//!
//! A dataset is a directory of class subdirectories holding PNG or JPEG
//! files. Indices can be cached as a text manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use ndarray::{s, Array4};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::colorspace::{normalize, srgb_to_lab, SrgbImage};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MANIFEST_HEADER: &str = "# colourgan-manifest v1";
const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Unassigned,
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Unassigned => "-",
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "-" => Some(Split::Unassigned),
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub path: PathBuf,
    pub class: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    /// Ordered by class, then file name.
    pub records: Vec<Record>,
    /// Seed of the split, if one was made.
    pub seed: Option<u64>,
    /// Files that failed to decode during the scan.
    pub skipped: usize,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn classes(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.records {
            if out.last() != Some(&r.class.as_str()) {
                out.push(&r.class);
            }
        }
        out
    }

    pub fn subset(&self, split: Split) -> Vec<Record> {
        self.records.iter().filter(|r| r.split == split).cloned().collect()
    }

    pub fn train(&self) -> Vec<Record> {
        self.subset(Split::Train)
    }

    pub fn test(&self) -> Vec<Record> {
        self.subset(Split::Test)
    }

    pub fn to_manifest(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{MANIFEST_HEADER}").unwrap();
        writeln!(out, "root\t{}", self.root.display()).unwrap();
        let seed = self.seed.map_or("-".to_string(), |s| s.to_string());
        writeln!(out, "seed\t{seed}").unwrap();
        writeln!(out, "skipped\t{}", self.skipped).unwrap();
        for r in &self.records {
            let rel = r.path.strip_prefix(&self.root).unwrap_or(&r.path);
            writeln!(out, "{}\t{}\t{}", r.split.as_str(), r.class, rel.display()).unwrap();
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let bad = |line: usize, what: &str| Error::Data(format!("manifest line {}: {what}", line + 1));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, MANIFEST_HEADER)) => {}
            _ => return Err(Error::Data(format!("manifest must start with '{MANIFEST_HEADER}'"))),
        }
        let mut field = |key: &str| -> Result<String> {
            let (i, line) = lines.next().ok_or_else(|| Error::Data("manifest truncated".into()))?;
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix('\t'))
                .map(str::to_string)
                .ok_or_else(|| bad(i, &format!("expected '{key}'")))
        };
        let root = PathBuf::from(field("root")?);
        let seed = match field("seed")?.as_str() {
            "-" => None,
            s => Some(s.parse().map_err(|_| Error::Data(format!("bad manifest seed '{s}'")))?),
        };
        let skipped = field("skipped")?
            .parse()
            .map_err(|_| Error::Data("bad manifest skip count".into()))?;
        let mut records = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let (Some(split), Some(class), Some(rel)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad(i, "expected split, class and path"));
            };
            records.push(Record {
                path: root.join(rel),
                class: class.to_string(),
                split: Split::parse(split).ok_or_else(|| bad(i, &format!("unknown split '{split}'")))?,
            });
        }
        Ok(Self {
            root,
            records,
            seed,
            skipped,
        })
    }

    pub fn save_manifest(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_manifest()).map_err(|e| Error::io(path, e))
    }

    pub fn load_manifest(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_manifest(&text)
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?;
    out.sort();
    Ok(out)
}

fn has_image_extension(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Indexes `root/<class>/<image>` in lexicographic order. Every file is
/// decoded once; undecodable files are logged, skipped and counted.
pub fn scan_dataset(root: &Path) -> Result<DatasetIndex> {
    let mut records = Vec::new();
    let mut skipped = 0;
    for class_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let class = class_dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Data(format!("class directory name is not UTF-8: {}", class_dir.display())))?
            .to_string();
        for path in sorted_entries(&class_dir)? {
            if !path.is_file() || !has_image_extension(&path) {
                continue;
            }
            match image::open(&path) {
                Ok(_) => records.push(Record {
                    path,
                    class: class.clone(),
                    split: Split::Unassigned,
                }),
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    skipped += 1;
                }
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Data(format!("no readable images under {}", root.display())));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        records,
        seed: None,
        skipped,
    })
}

/// Holds out `per_class_test` images of every class, sampled with a
/// generator seeded by `seed` and the class position.
pub fn make_split(idx: &DatasetIndex, per_class_test: usize, seed: u64) -> Result<DatasetIndex> {
    let mut out = idx.clone();
    out.seed = Some(seed);
    let mut start = 0;
    let mut class_no = 0u64;
    while start < out.records.len() {
        let class = out.records[start].class.clone();
        let end = start + out.records[start..].iter().take_while(|r| r.class == class).count();
        let n = end - start;
        if n <= per_class_test {
            return Err(Error::Data(format!(
                "class '{class}' has {n} images, needs more than {per_class_test} for the test split"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class_no);
        let held: Vec<usize> = sample(&mut rng, n, per_class_test).into_vec();
        for (i, r) in out.records[start..end].iter_mut().enumerate() {
            r.split = if held.contains(&i) { Split::Test } else { Split::Train };
        }
        start = end;
        class_no += 1;
    }
    Ok(out)
}

/// Network inputs for `M` images: `l_norm [M, 1, S, S]`, `ab_norm [M, 2, S, S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<F> {
    pub l_norm: Tensor<F>,
    pub ab_norm: Tensor<F>,
    pub paths: Vec<PathBuf>,
}

impl<F: Scalar> Batch<F> {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

/// Decodes an image file to 8-bit sRGB.
pub fn load_image(path: &Path) -> Result<SrgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.into_rgb8();
    let (w, h) = rgb.dimensions();
    SrgbImage::from_raw(w, h, 3, rgb.into_raw())
}

/// Bilinear resize to `size × size`; a no-op when already that size.
pub fn resize_square(img: &SrgbImage, size: u32) -> SrgbImage {
    resize(img, size, size)
}

pub fn resize(img: &SrgbImage, width: u32, height: u32) -> SrgbImage {
    if img.width() == width && img.height() == height {
        return img.clone();
    }
    let out = imageops::resize(img.as_image(), width, height, FilterType::Triangle);
    SrgbImage::from_raw(width, height, 3, out.into_raw()).expect("resized buffer")
}

/// Converts decoded images into a batch.
pub fn batch_from_images<F: Scalar>(images: &[SrgbImage], paths: Vec<PathBuf>) -> Result<Batch<F>> {
    let Some(first) = images.first() else {
        return Err(Error::Data("a batch needs at least one image".into()));
    };
    let (w, h) = (first.width() as usize, first.height() as usize);
    let m = images.len();
    let mut l_norm = Array4::<F>::zeros((m, 1, h, w));
    let mut ab_norm = Array4::<F>::zeros((m, 2, h, w));
    for (i, img) in images.iter().enumerate() {
        if (img.width() as usize, img.height() as usize) != (w, h) {
            return Err(Error::Shape("batch images differ in size".into()));
        }
        let t = normalize(&srgb_to_lab::<F>(img));
        l_norm.slice_mut(s![i, 0, .., ..]).assign(&t.l_norm);
        ab_norm.slice_mut(s![i, .., .., ..]).assign(&t.ab_norm);
    }
    Ok(Batch {
        l_norm: l_norm.into_dyn(),
        ab_norm: ab_norm.into_dyn(),
        paths,
    })
}

/// Decode, resize to `size × size` (bilinear), convert to Lab and
/// normalize. With `flip_seed`, each image is mirrored horizontally with
/// probability one half, drawn from that seed.
pub fn load_batch<F: Scalar>(rows: &[Record], size: u32, flip_seed: Option<u64>) -> Result<Batch<F>> {
    let mut rng = flip_seed.map(ChaCha8Rng::seed_from_u64);
    let mut images = Vec::with_capacity(rows.len());
    for r in rows {
        let mut img = resize_square(&load_image(&r.path)?, size);
        if let Some(rng) = rng.as_mut() {
            if rng.random_bool(0.5) {
                img = SrgbImage::from_raw(size, size, 3, imageops::flip_horizontal(img.as_image()).into_raw())?;
            }
        }
        images.push(img);
    }
    batch_from_images(&images, rows.iter().map(|r| r.path.clone()).collect())
}

/// One unit of loading work.
#[derive(Clone, Debug)]
pub struct BatchJob {
    pub rows: Vec<Record>,
    pub flip_seed: Option<u64>,
}

/// Loads `jobs` in order. With more than one worker, batches are decoded
/// concurrently and re-ordered before delivery, so the sequence is the
/// same for any worker count.
pub fn prefetch<F: Scalar>(jobs: Vec<BatchJob>, size: u32, workers: usize) -> Box<dyn Iterator<Item = Result<Batch<F>>>> {
    if workers <= 1 {
        return Box::new(jobs.into_iter().map(move |j| load_batch(&j.rows, size, j.flip_seed)));
    }
    let total = jobs.len();
    let jobs = Arc::new(jobs);
    let next = Arc::new(AtomicUsize::new(0));
    let (tx, rx) = mpsc::sync_channel::<(usize, Result<Batch<F>>)>(2 * workers);
    for _ in 0..workers {
        let (jobs, next, tx) = (Arc::clone(&jobs), Arc::clone(&next), tx.clone());
        thread::spawn(move || loop {
            let i = next.fetch_add(1, Ordering::SeqCst);
            let Some(job) = jobs.get(i) else { break };
            if tx.send((i, load_batch(&job.rows, size, job.flip_seed))).is_err() {
                break;
            }
        });
    }
    drop(tx);
    let mut pending = BTreeMap::new();
    let mut want = 0;
    Box::new(std::iter::from_fn(move || {
        if want == total {
            return None;
        }
        while !pending.contains_key(&want) {
            match rx.recv() {
                Ok((i, b)) => {
                    pending.insert(i, b);
                }
                Err(_) => return None,
            }
        }
        want += 1;
        pending.remove(&(want - 1))
    }))
}

/// Writes `classes × per_class` procedurally generated PNGs of side `size`
/// under `root/class_XX/`. Each class has its own palette; images combine
/// a shaded background with a few flat shapes. Useful for smoke tests and
/// demos without a real dataset.
pub fn write_synthetic_dataset(root: &Path, classes: usize, per_class: usize, size: u32, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in 0..classes {
        let dir = root.join(format!("class_{c:02}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let hue = c as f64 / classes.max(1) as f64;
        for i in 0..per_class {
            let base = hsv(hue, 0.6, 0.9);
            let accent = hsv((hue + 0.5) % 1.0, 0.8, 0.7);
            let mut img = RgbImage::from_fn(size, size, |x, y| {
                let t = (x + y) as f64 / (2 * size) as f64;
                Rgb(base.map(|v| (v * (0.5 + 0.5 * t) * 255.0) as u8))
            });
            for _ in 0..rng.random_range(1..=3) {
                let (cx, cy) = (rng.random_range(0..size) as i64, rng.random_range(0..size) as i64);
                let r = rng.random_range(size / 8..=size / 3).max(1) as i64;
                let shade = rng.random_range(0.5..1.0);
                let col = Rgb(accent.map(|v| (v * shade * 255.0) as u8));
                for y in (cy - r).max(0)..(cy + r).min(size as i64) {
                    for x in (cx - r).max(0)..(cx + r).min(size as i64) {
                        if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                            img.put_pixel(x as u32, y as u32, col);
                        }
                    }
                }
            }
            let path = dir.join(format!("img_{i:04}.png"));
            img.save(&path).map_err(|source| Error::Image { path, source })?;
        }
    }
    Ok(())
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
