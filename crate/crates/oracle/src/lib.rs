//! Reference implementations written as plain loops over flat `f64`
//! buffers, independent of the `colourgan` crate. Tests compare the
//! library against these.
//!
//! Volumes are flat row-major buffers in `[n, c, h, w]` order.

pub mod colour {
    //! sRGB ↔ CIE Lab with the sRGB→XYZ matrix derived from the primaries'
    //! chromaticities and the D65 white point.

    const PRIMARIES: [(f64, f64); 3] = [(0.64, 0.33), (0.30, 0.60), (0.15, 0.06)];
    const WHITE_XY: (f64, f64) = (0.3127, 0.3290);

    fn xy_to_xyz((x, y): (f64, f64)) -> [f64; 3] {
        [x / y, 1.0, (1.0 - x - y) / y]
    }

    pub fn invert3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        let mut inv = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                // cofactor of (j, i)
                let r: Vec<usize> = (0..3).filter(|&k| k != j).collect();
                let c: Vec<usize> = (0..3).filter(|&k| k != i).collect();
                let minor = m[r[0]][c[0]] * m[r[1]][c[1]] - m[r[0]][c[1]] * m[r[1]][c[0]];
                let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                inv[i][j] = sign * minor / det;
            }
        }
        inv
    }

    pub fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
    }

    pub fn white() -> [f64; 3] {
        xy_to_xyz(WHITE_XY)
    }

    /// Linear RGB → XYZ.
    pub fn rgb_to_xyz_matrix() -> [[f64; 3]; 3] {
        let cols = PRIMARIES.map(xy_to_xyz);
        let p = [0, 1, 2].map(|i| [cols[0][i], cols[1][i], cols[2][i]]);
        let s = mat_vec(&invert3(p), white());
        [0, 1, 2].map(|i| [p[i][0] * s[0], p[i][1] * s[1], p[i][2] * s[2]])
    }

    pub fn decode(c: u8) -> f64 {
        let c = c as f64 / 255.0;
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    }

    pub fn encode(c: f64) -> f64 {
        if c <= 0.0031308 {
            12.92 * c
        } else {
            1.055 * c.powf(1.0 / 2.4) - 0.055
        }
    }

    const DELTA: f64 = 6.0 / 29.0;

    fn f(t: f64) -> f64 {
        if t > DELTA * DELTA * DELTA {
            t.cbrt()
        } else {
            t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
        }
    }

    fn f_inv(t: f64) -> f64 {
        if t > DELTA {
            t * t * t
        } else {
            3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
        }
    }

    pub fn srgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
        let xyz = mat_vec(&rgb_to_xyz_matrix(), rgb.map(decode));
        let w = white();
        let [fx, fy, fz] = [0, 1, 2].map(|i| f(xyz[i] / w[i]));
        [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
    }

    /// Lab → sRGB in [0, 1], clipped after conversion.
    pub fn lab_to_srgb_unit(lab: [f64; 3]) -> [f64; 3] {
        let fy = (lab[0] + 16.0) / 116.0;
        let fx = fy + lab[1] / 500.0;
        let fz = fy - lab[2] / 200.0;
        let w = white();
        let xyz = [f_inv(fx) * w[0], f_inv(fy) * w[1], f_inv(fz) * w[2]];
        let lin = mat_vec(&invert3(rgb_to_xyz_matrix()), xyz);
        lin.map(|c| encode(c).clamp(0.0, 1.0))
    }

    pub fn lab_to_srgb(lab: [f64; 3]) -> [u8; 3] {
        lab_to_srgb_unit(lab).map(|c| (c * 255.0).round() as u8)
    }
}

pub mod linalg {
    /// Eigenvalues of a symmetric `n×n` matrix by cyclic Jacobi rotations.
    pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
        let mut m = a.to_vec();
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| m[i * n + j] * m[i * n + j])
                .sum();
            if off < 1e-26 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = m[p * n + q];
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let mkp = m[k * n + p];
                        let mkq = m[k * n + q];
                        m[k * n + p] = c * mkp - s * mkq;
                        m[k * n + q] = s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let mpk = m[p * n + k];
                        let mqk = m[q * n + k];
                        m[p * n + k] = c * mpk - s * mqk;
                        m[q * n + k] = s * mpk + c * mqk;
                    }
                }
            }
        }
        (0..n).map(|i| m[i * n + i]).collect()
    }

    /// Largest singular value of a row-major `rows×cols` matrix.
    pub fn largest_singular_value(a: &[f64], rows: usize, cols: usize) -> f64 {
        let (n, gram): (usize, Vec<f64>) = if rows <= cols {
            let mut g = vec![0.0; rows * rows];
            for i in 0..rows {
                for j in 0..rows {
                    g[i * rows + j] = (0..cols).map(|k| a[i * cols + k] * a[j * cols + k]).sum();
                }
            }
            (rows, g)
        } else {
            let mut g = vec![0.0; cols * cols];
            for i in 0..cols {
                for j in 0..cols {
                    g[i * cols + j] = (0..rows).map(|k| a[k * cols + i] * a[k * cols + j]).sum();
                }
            }
            (cols, g)
        };
        symmetric_eigenvalues(&gram, n)
            .into_iter()
            .fold(0.0, f64::max)
            .sqrt()
    }
}

pub mod stats {
    fn normalize_groups(x: &[f64], groups: &[Vec<usize>], eps: f64) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        for g in groups {
            let n = g.len() as f64;
            let mean = g.iter().map(|&i| x[i]).sum::<f64>() / n;
            let var = g.iter().map(|&i| (x[i] - mean) * (x[i] - mean)).sum::<f64>() / n;
            for &i in g {
                y[i] = (x[i] - mean) / (var + eps).sqrt();
            }
        }
        y
    }

    fn index(shape: [usize; 4], b: usize, c: usize, p: usize) -> usize {
        (b * shape[1] + c) * shape[2] * shape[3] + p
    }

    /// Batch normalization with unit scale and zero shift, biased variance.
    pub fn batch_norm(x: &[f64], shape: [usize; 4], eps: f64) -> Vec<f64> {
        let hw = shape[2] * shape[3];
        let groups: Vec<Vec<usize>> = (0..shape[1])
            .map(|c| {
                (0..shape[0])
                    .flat_map(|b| (0..hw).map(move |p| index(shape, b, c, p)))
                    .collect()
            })
            .collect();
        normalize_groups(x, &groups, eps)
    }

    pub fn instance_norm(x: &[f64], shape: [usize; 4], eps: f64) -> Vec<f64> {
        let hw = shape[2] * shape[3];
        let groups: Vec<Vec<usize>> = (0..shape[0])
            .flat_map(|b| (0..shape[1]).map(move |c| (0..hw).map(|p| index(shape, b, c, p)).collect()))
            .collect();
        normalize_groups(x, &groups, eps)
    }

    /// Per-channel `(mean, biased variance)` over batch and space.
    pub fn channel_moments(x: &[f64], shape: [usize; 4]) -> Vec<(f64, f64)> {
        let hw = shape[2] * shape[3];
        (0..shape[1])
            .map(|c| {
                let vals: Vec<f64> = (0..shape[0])
                    .flat_map(|b| (0..hw).map(move |p| index(shape, b, c, p)))
                    .map(|i| x[i])
                    .collect();
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                (mean, vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
            })
            .collect()
    }
}

pub mod conv {
    /// Cross-correlation of `[n, c, h, w]` with `[o, c, k, k]` weights.
    pub fn conv2d(
        x: &[f64],
        xs: [usize; 4],
        w: &[f64],
        ws: [usize; 4],
        bias: Option<&[f64]>,
        stride: usize,
        pad: usize,
    ) -> (Vec<f64>, [usize; 4]) {
        let [n, c, h, wd] = xs;
        let [o, ci, k, _] = ws;
        assert_eq!(c, ci);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut y = vec![0.0; n * o * ho * wo];
        for b in 0..n {
            for oc in 0..o {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = bias.map_or(0.0, |bv| bv[oc]);
                        for ic in 0..c {
                            for di in 0..k {
                                for dj in 0..k {
                                    let yi = (i * stride + di) as isize - pad as isize;
                                    let xj = (j * stride + dj) as isize - pad as isize;
                                    if yi < 0 || xj < 0 || yi >= h as isize || xj >= wd as isize {
                                        continue;
                                    }
                                    let xv = x[((b * c + ic) * h + yi as usize) * wd + xj as usize];
                                    acc += xv * w[((oc * c + ic) * k + di) * k + dj];
                                }
                            }
                        }
                        y[((b * o + oc) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        (y, [n, o, ho, wo])
    }

    pub fn relu(x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| v.max(0.0)).collect()
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns dropped.
    pub fn max_pool2(x: &[f64], xs: [usize; 4]) -> (Vec<f64>, [usize; 4]) {
        let [n, c, h, w] = xs;
        let (ho, wo) = (h / 2, w / 2);
        let mut y = vec![f64::NEG_INFINITY; n * c * ho * wo];
        for p in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut m = f64::NEG_INFINITY;
                    for di in 0..2 {
                        for dj in 0..2 {
                            m = m.max(x[(p * h + 2 * i + di) * w + 2 * j + dj]);
                        }
                    }
                    y[(p * ho + i) * wo + j] = m;
                }
            }
        }
        (y, [n, c, ho, wo])
    }
}

pub mod metrics {
    pub fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        let mut s = 0.0;
        for i in 0..a.len() {
            s += (a[i] - b[i]).abs();
        }
        s / a.len() as f64
    }

    pub fn psnr(a: &[u8], b: &[u8]) -> f64 {
        assert_eq!(a.len(), b.len());
        let mut se = 0.0;
        for i in 0..a.len() {
            let d = a[i] as f64 - b[i] as f64;
            se += d * d;
        }
        let mse = se / a.len() as f64;
        10.0 * (255.0 * 255.0 / mse).log10()
    }

    /// Counts over `bins` equal bins of `[lo, hi)`; outliers go to the end bins.
    pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<u64> {
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0u64; bins];
        for &v in values {
            let mut i = 0;
            while i + 1 < bins && v >= lo + (i + 1) as f64 * width {
                i += 1;
            }
            counts[i] += 1;
        }
        counts
    }

    pub fn intersection(p: &[u64], q: &[u64]) -> f64 {
        let tp: u64 = p.iter().sum();
        let tq: u64 = q.iter().sum();
        let mut s = 0.0;
        for i in 0..p.len() {
            s += (p[i] as f64 / tp as f64).min(q[i] as f64 / tq as f64);
        }
        s
    }
}

pub mod gan {
    /// `ln(1 + eˣ)` evaluated stably.
    pub fn softplus(x: f64) -> f64 {
        if x > 0.0 {
            x + (-x).exp().ln_1p()
        } else {
            x.exp().ln_1p()
        }
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Σ over scales of `mean(−ln σ(r)) + mean(−ln(1 − σ(f)))`.
    pub fn discriminator_loss(real: &[Vec<f64>], fake: &[Vec<f64>]) -> f64 {
        real.iter()
            .zip(fake)
            .map(|(r, f)| {
                mean(&r.iter().map(|&x| softplus(-x)).collect::<Vec<_>>())
                    + mean(&f.iter().map(|&x| softplus(x)).collect::<Vec<_>>())
            })
            .sum()
    }

    pub fn generator_adversarial(fake: &[Vec<f64>]) -> f64 {
        fake.iter()
            .map(|f| mean(&f.iter().map(|&x| softplus(-x)).collect::<Vec<_>>()))
            .sum()
    }
}
