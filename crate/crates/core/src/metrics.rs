//! Evaluation metrics: chrominance L1, PSNR, ab histograms and their
//! intersection.

use std::fmt;

use crate::colorspace::{LabImage, SrgbImage, AB_RANGE};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Mean absolute difference over both chrominance channels, in Lab units.
pub fn l1_ab<F: Scalar>(pred: &[LabImage<F>], truth: &[LabImage<F>]) -> Result<f64> {
    check_pairs(pred.len(), truth.len())?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if p.l.dim() != t.l.dim() {
            return shape_err(format!("image sizes differ: {:?} vs {:?}", p.l.dim(), t.l.dim()));
        }
        for (x, y) in p.a.iter().zip(&t.a).chain(p.b.iter().zip(&t.b)) {
            sum += (x.as_f64() - y.as_f64()).abs();
        }
        count += 2 * p.a.len();
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Peak signal-to-noise ratio over all channels and pixels of 8-bit sets.
/// Identical sets give `f64::INFINITY`.
pub fn psnr(pred: &[SrgbImage], truth: &[SrgbImage]) -> Result<f64> {
    check_pairs(pred.len(), truth.len())?;
    let mut sq = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if (p.width(), p.height()) != (t.width(), t.height()) {
            return shape_err(format!(
                "image sizes differ: {}x{} vs {}x{}",
                p.width(),
                p.height(),
                t.width(),
                t.height()
            ));
        }
        for (&x, &y) in p.as_raw().iter().zip(t.as_raw()) {
            let d = x as f64 - y as f64;
            sq += d * d;
        }
        count += p.as_raw().len();
    }
    if count == 0 || sq == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / (sq / count as f64)).log10())
}

/// Renders a decibel value, printing infinities as `inf`.
pub fn format_db(db: f64) -> String {
    if db.is_infinite() {
        "inf".into()
    } else {
        format!("{db:.4}")
    }
}

fn check_pairs(a: usize, b: usize) -> Result<()> {
    if a != b {
        return shape_err(format!("unpaired sets: {a} predictions vs {b} references"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbChannel {
    A,
    B,
}

impl fmt::Display for AbChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AbChannel::A => "a",
            AbChannel::B => "b",
        })
    }
}

/// Uniform-bin histogram over `[lo, hi)`. Values outside the range are
/// counted in the nearest end bin.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    lo: f64,
    hi: f64,
    counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        assert!(hi > lo && bins > 0, "histogram needs a non-empty range");
        Self {
            lo,
            hi,
            counts: vec![0; bins],
        }
    }

    /// Unit-width bins over the chrominance range [−110, 110].
    pub fn ab() -> Self {
        Self::new(-AB_RANGE, AB_RANGE, (2.0 * AB_RANGE) as usize)
    }

    pub fn from_counts(lo: f64, hi: f64, counts: Vec<u64>) -> Self {
        assert!(hi > lo && !counts.is_empty(), "histogram needs a non-empty range");
        Self { lo, hi, counts }
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    /// The `bins + 1` bin boundaries.
    pub fn bin_edges(&self) -> Vec<f64> {
        let w = self.bin_width();
        (0..=self.counts.len()).map(|i| self.lo + i as f64 * w).collect()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_of(&self, v: f64) -> usize {
        let i = ((v - self.lo) / self.bin_width()).floor();
        if i.is_nan() || i < 0.0 {
            0
        } else {
            (i as usize).min(self.counts.len() - 1)
        }
    }

    pub fn add(&mut self, v: f64) {
        let i = self.bin_of(v);
        self.counts[i] += 1;
    }

    /// Probability masses; all zero for an empty histogram.
    pub fn normalized(&self) -> Vec<f64> {
        let total = self.total();
        if total == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| c as f64 / total as f64).collect()
    }

    pub fn same_binning(&self, other: &Histogram) -> bool {
        self.lo == other.lo && self.hi == other.hi && self.counts.len() == other.counts.len()
    }

    /// Adds the counts of `other`, which must share the binning.
    pub fn merge(&mut self, other: &Histogram) -> Result<()> {
        if !self.same_binning(other) {
            return shape_err("histograms have different binning");
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Histogram of one chrominance channel over every pixel of a set.
pub fn ab_histogram<F: Scalar>(images: &[LabImage<F>], channel: AbChannel) -> Result<Histogram> {
    if images.iter().all(|im| im.a.is_empty()) {
        return Err(crate::Error::Data("cannot build a histogram of an empty image set".into()));
    }
    let mut h = Histogram::ab();
    for im in images {
        let plane = match channel {
            AbChannel::A => &im.a,
            AbChannel::B => &im.b,
        };
        for &v in plane {
            h.add(v.as_f64());
        }
    }
    Ok(h)
}

/// `Σ min(p, q)` over normalized masses; 1 for identical distributions.
pub fn histogram_intersection(h1: &Histogram, h2: &Histogram) -> Result<f64> {
    if !h1.same_binning(h2) {
        return shape_err(format!(
            "histogram binning differs: {} bins over [{}, {}) vs {} bins over [{}, {})",
            h1.bins(),
            h1.lo,
            h1.hi,
            h2.bins(),
            h2.lo,
            h2.hi
        ));
    }
    Ok(h1
        .normalized()
        .iter()
        .zip(h2.normalized())
        .map(|(&p, q)| p.min(q))
        .sum())
}

/// Quantitative evaluation of one model on one test set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean absolute ab error in Lab units.
    pub l1_ab: f64,
    /// PSNR of the recombined RGB images; infinite for a perfect match.
    pub psnr_db: f64,
    pub l_perc: f64,
    pub hist_a: Histogram,
    pub hist_b: Histogram,
    /// Intersection of the predicted histograms with the reference ones.
    pub intersection_a: f64,
    pub intersection_b: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn lab(h: usize, w: usize, a: f64, b: f64) -> LabImage<f64> {
        LabImage::uniform(h, w, [50.0, a, b])
    }

    #[test]
    fn l1_constant_offset() {
        let t = vec![lab(4, 4, 10.0, -3.0); 2];
        let p = vec![lab(4, 4, 15.0, -8.0); 2];
        assert_eq!(l1_ab(&t, &t).unwrap(), 0.0);
        assert!((l1_ab(&p, &t).unwrap() - 5.0).abs() < 1e-12);
        assert!(l1_ab(&p[..1], &t).is_err());
    }

    #[test]
    fn psnr_extremes() {
        let black = vec![SrgbImage::uniform(3, 2, [0, 0, 0])];
        let white = vec![SrgbImage::uniform(3, 2, [255, 255, 255])];
        assert_eq!(psnr(&black, &black).unwrap(), f64::INFINITY);
        assert_eq!(format_db(f64::INFINITY), "inf");
        assert!(psnr(&black, &white).unwrap().abs() < 1e-12);
    }

    #[test]
    fn histogram_masses() {
        let h = ab_histogram(&[lab(3, 3, 0.0, 0.0)], AbChannel::A).unwrap();
        let m = h.normalized();
        assert_eq!(m[h.bin_of(0.0)], 1.0);
        assert_eq!(h.bin_edges()[h.bin_of(0.0)], 0.0);
        assert_eq!(h.bins(), 220);

        let mut a = Array2::from_elem((2, 2), -10.0);
        a.row_mut(1).fill(10.0);
        let im = LabImage::new(Array2::zeros((2, 2)), a, Array2::zeros((2, 2))).unwrap();
        let m = ab_histogram(&[im], AbChannel::A).unwrap().normalized();
        assert_eq!(m.iter().filter(|&&v| v == 0.5).count(), 2);
        assert!(ab_histogram::<f64>(&[], AbChannel::B).is_err());
    }

    #[test]
    fn range_ends_are_clamped() {
        let h = Histogram::ab();
        assert_eq!(h.bin_of(110.0), 219);
        assert_eq!(h.bin_of(-500.0), 0);
        assert_eq!(h.bin_of(-110.0), 0);
    }

    #[test]
    fn intersection_values() {
        let h1 = Histogram::from_counts(0.0, 3.0, vec![2, 2, 0]);
        let h2 = Histogram::from_counts(0.0, 3.0, vec![1, 1, 2]);
        assert!((histogram_intersection(&h1, &h2).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(histogram_intersection(&h1, &h1).unwrap(), 1.0);
        let d = Histogram::from_counts(0.0, 3.0, vec![0, 0, 5]);
        assert_eq!(histogram_intersection(&h1, &d).unwrap(), 0.0);
        assert!(histogram_intersection(&h1, &Histogram::ab()).is_err());
    }
}
