//! Reconstruction quality metrics and approximation-error diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Image;
use crate::linearize::{approx_error, ForwardOperator, LinearOperator};

/// Value written in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

pub fn mse(x: &Image, reference: &Image) -> Result<f64> {
    x.check_shape(reference.shape())?;
    let sum: f64 = x
        .values()
        .iter()
        .zip(reference.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / x.len() as f64)
}

/// `10 log10(peak^2 / MSE)`; `+inf` for identical images.
pub fn psnr(x: &Image, reference: &Image, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "PSNR peak must be positive, got {peak}"
        )));
    }
    let m = mse(x, reference)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// PSNR clamped to [`PSNR_CAP`].
pub fn psnr_capped(x: &Image, reference: &Image, peak: f64) -> Result<f64> {
    Ok(psnr(x, reference, peak)?.min(PSNR_CAP))
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (k, t) in taps.iter_mut().enumerate() {
        let d = k as f64 - r;
        *t = (-0.5 * d * d / (SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable weighted window sums over all fully contained windows.
fn filter_valid(v: &[f64], w: usize, h: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = taps.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..n).map(|k| taps[k] * v[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|k| taps[k] * rows[(r + k) * ow + c]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), dynamic range 1,
/// over windows lying entirely inside the image.
pub fn ssim(x: &Image, reference: &Image) -> Result<f64> {
    x.check_shape(reference.shape())?;
    let (w, h) = x.shape();
    if w.min(h) < SSIM_WINDOW {
        return Err(Error::InvalidImage(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let taps = gaussian_taps();
    let a = x.values();
    let b = reference.values();
    let prod = |f: &dyn Fn(usize) -> f64| (0..a.len()).map(f).collect::<Vec<_>>();
    let (mu_a, _, _) = filter_valid(a, w, h, &taps);
    let (mu_b, _, _) = filter_valid(b, w, h, &taps);
    let (aa, _, _) = filter_valid(&prod(&|i| a[i] * a[i]), w, h, &taps);
    let (bb, _, _) = filter_valid(&prod(&|i| b[i] * b[i]), w, h, &taps);
    let (ab, _, _) = filter_valid(&prod(&|i| a[i] * b[i]), w, h, &taps);

    let c1 = (SSIM_K1 * 1.0_f64).powi(2);
    let c2 = (SSIM_K2 * 1.0_f64).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub psnr_db: f64,
    pub ssim: f64,
    /// Data fidelity of the reconstruction under the true forward model.
    pub data_fidelity: f64,
}

impl MetricReport {
    /// PSNR is capped at [`PSNR_CAP`] so the report stays finite.
    pub fn compute(
        label: impl Into<String>,
        reconstruction: &Image,
        truth: &Image,
        data_fidelity: f64,
    ) -> Result<Self> {
        Ok(MetricReport {
            label: label.into(),
            psnr_db: psnr_capped(reconstruction, truth, 1.0)?,
            ssim: ssim(reconstruction, truth)?,
            data_fidelity,
        })
    }
}

/// One sample of the approximation error at two pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorPairRow {
    pub sample: usize,
    pub pixel_i: usize,
    pub pixel_j: usize,
    pub eps_i: f64,
    pub eps_j: f64,
}

/// `(eps_i, eps_j)` for every sample and every pixel pair (flat row-major
/// indices), ordered by sample, then pair.
pub fn error_pair_samples(
    model: &dyn ForwardOperator,
    approx: &dyn LinearOperator,
    samples: &[Image],
    pairs: &[(usize, usize)],
) -> Result<Vec<ErrorPairRow>> {
    if samples.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 samples, got {}",
            samples.len()
        )));
    }
    let (w, h) = approx.output_shape();
    if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= w * h || j >= w * h) {
        return Err(Error::InvalidParameter(format!(
            "pixel pair ({i}, {j}) out of range for {w}x{h}"
        )));
    }
    let mut rows = Vec::with_capacity(samples.len() * pairs.len());
    for (s, x) in samples.iter().enumerate() {
        let eps = approx_error(model, approx, x)?;
        let v = eps.values();
        rows.extend(pairs.iter().map(|&(i, j)| ErrorPairRow {
            sample: s,
            pixel_i: i,
            pixel_j: j,
            eps_i: v[i],
            eps_j: v[j],
        }));
    }
    Ok(rows)
}

/// Pixel pairs along the middle row: each probed pixel with its right
/// neighbour, spread evenly across the row.
pub fn probe_pairs(width: usize, height: usize, count: usize) -> Vec<(usize, usize)> {
    if width < 2 || height == 0 || count == 0 {
        return Vec::new();
    }
    let row = height / 2;
    let count = count.min(width - 1);
    (0..count)
        .map(|k| {
            let c = (k * (width - 1)) / count;
            (row * width + c, row * width + c + 1)
        })
        .collect()
}

/// Sample excess kurtosis `m4 / m2^2 - 3`; zero-variance input gives 0.
pub fn excess_kurtosis(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    if m2 == 0.0 {
        return 0.0;
    }
    m4 / (m2 * m2) - 3.0
}
