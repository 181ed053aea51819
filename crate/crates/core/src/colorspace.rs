//! sRGB (8-bit, D65) ⇄ CIE Lab conversion and the network value ranges.
//!
//! Lab uses the D65 reference white of the sRGB standard. The network sees
//! `L/50 − 1` and `ab/110`, both in [-1, 1].

use std::sync::OnceLock;

use image::RgbImage;
use ndarray::{Array2, Array3, Axis};

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Bound on |a|, |b| used for normalization and histogram ranges.
pub const AB_RANGE: f64 = 110.0;
pub const L_MAX: f64 = 100.0;

/// D65 reference white (Y = 1), consistent with the rows of [`RGB_TO_XYZ`].
pub const WHITE_D65: [f64; 3] = [0.95047, 1.0, 1.08883];

pub const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

pub const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

const DELTA: f64 = 6.0 / 29.0;

/// 8-bit RGB image, three interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SrgbImage {
    inner: RgbImage,
}

impl SrgbImage {
    /// Builds an image from interleaved samples; `channels` must be 3.
    pub fn from_raw(width: u32, height: u32, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 3 {
            return shape_err(format!("sRGB image needs 3 channels, got {channels}"));
        }
        if data.len() != width as usize * height as usize * 3 {
            return shape_err(format!(
                "sRGB buffer holds {} bytes, expected {}x{}x3",
                data.len(),
                width,
                height
            ));
        }
        let inner = RgbImage::from_raw(width, height, data).expect("length checked");
        Ok(Self { inner })
    }

    pub fn uniform(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        Self {
            inner: RgbImage::from_pixel(width, height, image::Rgb(rgb)),
        }
    }

    pub fn width(&self) -> u32 {
        self.inner.width()
    }

    pub fn height(&self) -> u32 {
        self.inner.height()
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        self.inner.get_pixel(x, y).0
    }

    pub fn as_raw(&self) -> &[u8] {
        self.inner.as_raw()
    }

    pub fn as_image(&self) -> &RgbImage {
        &self.inner
    }

    pub fn into_image(self) -> RgbImage {
        self.inner
    }
}

impl From<RgbImage> for SrgbImage {
    fn from(inner: RgbImage) -> Self {
        Self { inner }
    }
}

/// Lightness and chrominance planes, each `[height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabImage<F> {
    pub l: Array2<F>,
    pub a: Array2<F>,
    pub b: Array2<F>,
}

impl<F: Scalar> LabImage<F> {
    pub fn new(l: Array2<F>, a: Array2<F>, b: Array2<F>) -> Result<Self> {
        if l.dim() != a.dim() || l.dim() != b.dim() {
            return shape_err(format!(
                "Lab planes differ in size: L {:?}, a {:?}, b {:?}",
                l.dim(),
                a.dim(),
                b.dim()
            ));
        }
        Ok(Self { l, a, b })
    }

    pub fn uniform(height: usize, width: usize, lab: [f64; 3]) -> Self {
        Self {
            l: Array2::from_elem((height, width), F::lit(lab[0])),
            a: Array2::from_elem((height, width), F::lit(lab[1])),
            b: Array2::from_elem((height, width), F::lit(lab[2])),
        }
    }

    pub fn height(&self) -> usize {
        self.l.nrows()
    }

    pub fn width(&self) -> usize {
        self.l.ncols()
    }

    /// Same lightness, chrominance replaced.
    pub fn with_ab(&self, a: Array2<F>, b: Array2<F>) -> Result<Self> {
        Self::new(self.l.clone(), a, b)
    }
}

/// Network-range view of a Lab image.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkTensors<F> {
    /// `[H, W]`, `L/50 − 1`.
    pub l_norm: Array2<F>,
    /// `[2, H, W]`, `(a, b)/110`.
    pub ab_norm: Array3<F>,
}

fn srgb_decode_table() -> &'static [f64; 256] {
    static TABLE: OnceLock<[f64; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0.0; 256];
        for (i, v) in t.iter_mut().enumerate() {
            *v = srgb_to_linear(i as f64 / 255.0);
        }
        t
    })
}

/// sRGB transfer function, encoded [0,1] → linear [0,1].
pub fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// Inverse sRGB transfer function, linear → encoded.
pub fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

/// Derivative of [`linear_to_srgb`].
pub(crate) fn linear_to_srgb_deriv(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92
    } else {
        1.055 / 2.4 * c.powf(1.0 / 2.4 - 1.0)
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

pub(crate) fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

pub(crate) fn lab_f_inv_deriv(t: f64) -> f64 {
    if t > DELTA {
        3.0 * t * t
    } else {
        3.0 * DELTA * DELTA
    }
}

fn mat3(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Linear RGB in [0,1] → Lab.
pub fn linear_rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let xyz = mat3(&RGB_TO_XYZ, rgb);
    let fx = lab_f(xyz[0] / WHITE_D65[0]);
    let fy = lab_f(xyz[1] / WHITE_D65[1]);
    let fz = lab_f(xyz[2] / WHITE_D65[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Lab → linear RGB, unclipped.
pub fn lab_to_linear_rgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        WHITE_D65[0] * lab_f_inv(fx),
        WHITE_D65[1] * lab_f_inv(fy),
        WHITE_D65[2] * lab_f_inv(fz),
    ];
    mat3(&XYZ_TO_RGB, xyz)
}

/// One 8-bit sRGB pixel → Lab.
pub fn srgb_pixel_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let t = srgb_decode_table();
    linear_rgb_to_lab([t[rgb[0] as usize], t[rgb[1] as usize], t[rgb[2] as usize]])
}

/// Lab → encoded sRGB in [0,1], clipped after conversion.
pub fn lab_to_srgb_unit(lab: [f64; 3]) -> [f64; 3] {
    lab_to_linear_rgb(lab).map(|c| linear_to_srgb(c.clamp(0.0, 1.0)))
}

/// One Lab pixel → 8-bit sRGB, out-of-gamut values clipped.
pub fn lab_pixel_to_srgb(lab: [f64; 3]) -> [u8; 3] {
    lab_to_srgb_unit(lab).map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8)
}

pub fn srgb_to_lab<F: Scalar>(img: &SrgbImage) -> LabImage<F> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut l = Array2::zeros((h, w));
    let mut a = Array2::zeros((h, w));
    let mut b = Array2::zeros((h, w));
    for (i, px) in img.as_raw().chunks_exact(3).enumerate() {
        let lab = srgb_pixel_to_lab([px[0], px[1], px[2]]);
        let (y, x) = (i / w, i % w);
        l[[y, x]] = F::lit(lab[0]);
        a[[y, x]] = F::lit(lab[1]);
        b[[y, x]] = F::lit(lab[2]);
    }
    LabImage { l, a, b }
}

pub fn lab_to_srgb<F: Scalar>(img: &LabImage<F>) -> SrgbImage {
    let (h, w) = (img.height(), img.width());
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let lab = [
                img.l[[y, x]].as_f64(),
                img.a[[y, x]].as_f64(),
                img.b[[y, x]].as_f64(),
            ];
            data.extend_from_slice(&lab_pixel_to_srgb(lab));
        }
    }
    SrgbImage::from_raw(w as u32, h as u32, 3, data).expect("sized buffer")
}

/// Lab units → network range.
pub fn normalize<F: Scalar>(img: &LabImage<F>) -> NetworkTensors<F> {
    let half = F::lit(L_MAX / 2.0);
    let ab = F::lit(AB_RANGE);
    let l_norm = img.l.mapv(|v| v / half - F::one());
    let mut ab_norm = Array3::zeros((2, img.height(), img.width()));
    ab_norm.index_axis_mut(Axis(0), 0).assign(&img.a.mapv(|v| v / ab));
    ab_norm.index_axis_mut(Axis(0), 1).assign(&img.b.mapv(|v| v / ab));
    NetworkTensors { l_norm, ab_norm }
}

/// Network range → Lab units; values are clipped to [-1, 1] first.
pub fn denormalize<F: Scalar>(t: &NetworkTensors<F>) -> Result<LabImage<F>> {
    if t.ab_norm.shape()[0] != 2 {
        return shape_err(format!("ab tensor needs 2 channels, got {}", t.ab_norm.shape()[0]));
    }
    let (h, w) = t.l_norm.dim();
    if t.ab_norm.shape()[1..] != [h, w] {
        return shape_err("ab tensor and L plane differ in size");
    }
    let clip = |v: F| v.max(-F::one()).min(F::one());
    let half = F::lit(L_MAX / 2.0);
    let ab = F::lit(AB_RANGE);
    Ok(LabImage {
        l: t.l_norm.mapv(|v| (clip(v) + F::one()) * half),
        a: t.ab_norm.index_axis(Axis(0), 0).mapv(|v| clip(v) * ab),
        b: t.ab_norm.index_axis(Axis(0), 1).mapv(|v| clip(v) * ab),
    })
}
