//! Macenko stain normalization for H&E tiles.
//!
//! RGB is mapped to optical density (Beer–Lambert), the two dominant stain
//! directions are estimated from the OD point cloud by plane projection and
//! robust extreme angles, and each pixel's stain concentrations are remapped
//! onto a reference basis.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_IO: f64 = 255.0;
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 0.15;
/// Minimum number of OD pixels above `beta` needed to estimate a basis.
pub const MIN_TISSUE_PIXELS: usize = 50;
const MAX_CONCENTRATION_PERCENTILE: f64 = 99.0;

/// Optical-density image, one `[r, g, b]` triple per pixel in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct OdImage {
    pub width: u32,
    pub height: u32,
    pub io: f64,
    pub pixels: Vec<[f64; 3]>,
}

impl OdImage {
    pub fn from_pixels(width: u32, height: u32, io: f64, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if pixels.len() != width as usize * height as usize {
            return Err(Error::shape(format!(
                "{} OD pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if pixels.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("OD values must be finite and non-negative"));
        }
        Ok(Self { width, height, io, pixels })
    }

    /// Render back to RGB with `v = io * 10^-od - 1`, clamped and rounded.
    pub fn to_rgb(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width, self.height);
        for (px, od) in out.pixels_mut().zip(&self.pixels) {
            for c in 0..3 {
                px.0[c] = od_to_channel(od[c], self.io);
            }
        }
        out
    }
}

/// Two stain directions in OD space plus their robust maximum concentrations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainBasis {
    /// Columns of the 3x2 stain matrix: `[hematoxylin, eosin]`.
    pub vectors: [[f64; 3]; 2],
    pub max_concentrations: [f64; 2],
}

impl StainBasis {
    /// Build a basis from raw stain directions. Columns are normalized to unit
    /// length; the column with the larger red-channel OD is placed first.
    pub fn new(h: [f64; 3], e: [f64; 3], max_concentrations: [f64; 2]) -> Result<Self> {
        if h.iter().chain(&e).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("stain vectors must be finite and non-negative"));
        }
        if max_concentrations.iter().any(|m| !m.is_finite() || *m <= 0.0) {
            return Err(Error::invalid("max concentrations must be positive"));
        }
        let h = unit(h).ok_or(Error::DegenerateStains)?;
        let e = unit(e).ok_or(Error::DegenerateStains)?;
        let (vectors, max_concentrations) = if h[0] >= e[0] {
            ([h, e], max_concentrations)
        } else {
            ([e, h], [max_concentrations[1], max_concentrations[0]])
        };
        Ok(Self { vectors, max_concentrations })
    }

    /// Built-in H&E reference basis.
    pub fn reference() -> Self {
        Self {
            vectors: [
                unit([0.5626, 0.7201, 0.4062]).expect("nonzero"),
                unit([0.2159, 0.8012, 0.5581]).expect("nonzero"),
            ],
            max_concentrations: [1.9705, 1.0308],
        }
    }

    /// Least-squares stain concentrations for one OD pixel, negatives clamped to 0.
    pub fn concentrations(&self, od: &[f64; 3]) -> [f64; 2] {
        let [h, e] = &self.vectors;
        let (hh, he, ee) = (dot(h, h), dot(h, e), dot(e, e));
        let (bh, be) = (dot(h, od), dot(e, od));
        let det = hh * ee - he * he;
        let ch = (ee * bh - he * be) / det;
        let ce = (hh * be - he * bh) / det;
        [ch.max(0.0), ce.max(0.0)]
    }

    /// OD produced by the given concentrations.
    pub fn compose(&self, c: [f64; 2]) -> [f64; 3] {
        let [h, e] = &self.vectors;
        [
            h[0] * c[0] + e[0] * c[1],
            h[1] * c[0] + e[1] * c[1],
            h[2] * c[0] + e[2] * c[1],
        ]
    }
}

/// Macenko estimation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacenkoParams {
    pub alpha: f64,
    pub beta: f64,
    pub io: f64,
}

impl Default for MacenkoParams {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA, beta: DEFAULT_BETA, io: DEFAULT_IO }
    }
}

fn od_to_channel(od: f64, io: f64) -> u8 {
    (io * 10f64.powf(-od) - 1.0).round().clamp(0.0, 255.0) as u8
}

/// Beer–Lambert transform, `od = -log10((v + 1) / io)` per channel, floored at 0.
pub fn rgb_to_od(image: &RgbImage, io: f64) -> Result<OdImage> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::invalid("empty image"));
    }
    if !(io > 0.0 && io.is_finite()) {
        return Err(Error::invalid(format!("reference intensity must be positive, got {io}")));
    }
    let pixels = image
        .pixels()
        .map(|p| {
            let mut od = [0.0; 3];
            for c in 0..3 {
                od[c] = (-((p.0[c] as f64 + 1.0) / io).log10()).max(0.0);
            }
            od
        })
        .collect();
    Ok(OdImage { width: image.width(), height: image.height(), io, pixels })
}

/// Estimate the stain basis of an OD image.
///
/// Pixels with any channel below `beta` are discarded as background. The two
/// principal directions of the remaining cloud span the stain plane; the
/// `alpha` and `100 - alpha` percentile angles within that plane give the
/// stain directions. The retained pixels are sorted before any reduction, so
/// the result does not depend on pixel order.
pub fn estimate_stain_basis(od: &OdImage, alpha: f64, beta: f64) -> Result<StainBasis> {
    if !(alpha > 0.0 && alpha < 50.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 50), got {alpha}")));
    }
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    let mut tissue: Vec<[f64; 3]> =
        od.pixels.iter().filter(|p| p.iter().all(|&v| v >= beta)).copied().collect();
    if tissue.len() < MIN_TISSUE_PIXELS {
        return Err(Error::InsufficientTissue {
            retained: tissue.len(),
            required: MIN_TISSUE_PIXELS,
        });
    }
    tissue.sort_by(|a, b| {
        a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])).then(a[2].total_cmp(&b[2]))
    });

    let cov = covariance(&tissue);
    let (values, vectors) = symmetric_eigen3(cov);
    let scale = values[0].abs().max(f64::MIN_POSITIVE);
    if values[0] <= 1e-12 || values[1] <= 1e-9 * scale {
        return Err(Error::DegenerateStains);
    }
    let (v1, v2) = (vectors[0], vectors[1]);

    let mut angles: Vec<f64> = tissue.iter().map(|p| dot(p, &v2).atan2(dot(p, &v1))).collect();
    angles.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&angles, alpha);
    let hi = percentile_sorted(&angles, 100.0 - alpha);

    let along = |phi: f64| -> [f64; 3] {
        let (s, c) = phi.sin_cos();
        [
            (v1[0] * c + v2[0] * s).max(0.0),
            (v1[1] * c + v2[1] * s).max(0.0),
            (v1[2] * c + v2[2] * s).max(0.0),
        ]
    };
    let a = unit(along(lo)).ok_or(Error::DegenerateStains)?;
    let b = unit(along(hi)).ok_or(Error::DegenerateStains)?;
    let vectors = if a[0] >= b[0] { [a, b] } else { [b, a] };
    let partial = StainBasis { vectors, max_concentrations: [1.0, 1.0] };
    let det = dot(&a, &a) * dot(&b, &b) - dot(&a, &b).powi(2);
    if det <= 1e-12 {
        return Err(Error::DegenerateStains);
    }

    let mut ch = Vec::with_capacity(od.pixels.len());
    let mut ce = Vec::with_capacity(od.pixels.len());
    for p in &od.pixels {
        let [h, e] = partial.concentrations(p);
        ch.push(h);
        ce.push(e);
    }
    ch.sort_by(f64::total_cmp);
    ce.sort_by(f64::total_cmp);
    let max_concentrations = [
        percentile_sorted(&ch, MAX_CONCENTRATION_PERCENTILE),
        percentile_sorted(&ce, MAX_CONCENTRATION_PERCENTILE),
    ];
    if max_concentrations.iter().any(|m| !(*m > 0.0)) {
        return Err(Error::DegenerateStains);
    }
    Ok(StainBasis { vectors, max_concentrations })
}

/// Remap an image from the `source` stain basis onto `reference`.
pub fn normalize_to_reference(
    image: &RgbImage,
    source: &StainBasis,
    reference: &StainBasis,
    io: f64,
) -> Result<RgbImage> {
    let od = rgb_to_od(image, io)?;
    let ratio = [
        reference.max_concentrations[0] / source.max_concentrations[0],
        reference.max_concentrations[1] / source.max_concentrations[1],
    ];
    let mut out = RgbImage::new(image.width(), image.height());
    for (px, p) in out.pixels_mut().zip(&od.pixels) {
        let c = source.concentrations(p);
        let mapped = reference.compose([c[0] * ratio[0], c[1] * ratio[1]]);
        for ch in 0..3 {
            px.0[ch] = od_to_channel(mapped[ch], io);
        }
    }
    Ok(out)
}

/// Estimate the basis of `image` and normalize it onto `reference`.
pub fn normalize_image(
    image: &RgbImage,
    reference: &StainBasis,
    params: &MacenkoParams,
) -> Result<RgbImage> {
    let od = rgb_to_od(image, params.io)?;
    let source = estimate_stain_basis(&od, params.alpha, params.beta)?;
    normalize_to_reference(image, &source, reference, params.io)
}

/// Linear-interpolated percentile of an ascending slice, `p` in [0, 100].
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn unit(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = dot(&v, &v).sqrt();
    (n > 1e-12).then(|| [v[0] / n, v[1] / n, v[2] / n])
}

fn covariance(points: &[[f64; 3]]) -> [[f64; 3]; 3] {
    let n = points.len() as f64;
    let mut mean = [0.0; 3];
    for p in points {
        for c in 0..3 {
            mean[c] += p[c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = [[0.0; 3]; 3];
    for p in points {
        let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for i in 0..3 {
            for j in i..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    for i in 0..3 {
        for j in i..3 {
            cov[i][j] /= n - 1.0;
            cov[j][i] = cov[i][j];
        }
    }
    cov
}

/// Eigen-decomposition of a symmetric 3x3 matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order with matching eigenvectors. Each
/// eigenvector's largest-magnitude entry is made positive (first index wins
/// magnitude ties).
pub fn symmetric_eigen3(m: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut a = m;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _sweep in 0..64 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        let diag = a[0][0].powi(2) + a[1][1].powi(2) + a[2][2].powi(2);
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            // A <- J^T A J
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let vkp = row[p];
                let vkq = row[q];
                row[p] = c * vkp - s * vkq;
                row[q] = s * vkp + c * vkq;
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let mut values = [0.0; 3];
    let mut vectors = [[0.0; 3]; 3];
    for (slot, &i) in order.iter().enumerate() {
        values[slot] = a[i][i];
        let mut col = [v[0][i], v[1][i], v[2][i]];
        let mut lead = 0;
        for k in 1..3 {
            if col[k].abs() > col[lead].abs() {
                lead = k;
            }
        }
        if col[lead] < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        vectors[slot] = col;
    }
    (values, vectors)
}
