//! Approximation error method: Gaussian statistics of `eps(x) = A(x) - Ã x`
//! estimated from samples, and reconstruction with the whitened data term
//!
//! ```text
//! min_u 0.5 || C^{-1} (Ã u - y + mu) ||^2 + lambda TV(u),   C C^T = Sigma + s^2 I
//! ```

use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Image;
use crate::linearize::{approx_error, ForwardOperator, LinearOperator};
use crate::models::DENSE_PIXEL_LIMIT;
use crate::pdhg::{pdhg_solve, Fidelity, PdhgConfig, PdhgState};

const MAGIC: &[u8; 4] = b"AEMS";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 8 + 8;

/// Sample mean and whitening factor of the approximation error.
#[derive(Clone, Debug, PartialEq)]
pub struct AemStats {
    pub mu: Image,
    /// Lower triangular, `chol * chol^T = Sigma + sigma_noise^2 I`.
    pub chol: DMatrix<f64>,
    pub n_samples: usize,
    pub sigma_noise: f64,
}

/// Estimates mean and covariance of `model(x) - approx(x)` over `samples`
/// and factors `Sigma + sigma_noise^2 I`.
pub fn estimate_stats(
    model: &dyn ForwardOperator,
    approx: &dyn LinearOperator,
    samples: &[Image],
    sigma_noise: f64,
) -> Result<AemStats> {
    if samples.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 samples, got {}",
            samples.len()
        )));
    }
    let shape = samples[0].shape();
    let n = shape.0 * shape.1;
    if n > DENSE_PIXEL_LIMIT {
        return Err(Error::GridTooLarge {
            pixels: n,
            limit: DENSE_PIXEL_LIMIT,
        });
    }
    for s in samples {
        s.check_shape(shape)?;
    }
    let errors = samples
        .par_iter()
        .map(|x| approx_error(model, approx, x))
        .collect::<Result<Vec<_>>>()?;
    stats_from_errors(&errors, sigma_noise)
}

/// Statistics from precomputed error samples.
pub fn stats_from_errors(errors: &[Image], sigma_noise: f64) -> Result<AemStats> {
    let count = errors.len();
    if count < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 samples, got {count}"
        )));
    }
    if !(sigma_noise > 0.0) || !sigma_noise.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "noise level must be positive, got {sigma_noise}"
        )));
    }
    let (w, h) = errors[0].shape();
    let n = w * h;
    let mut mean = DVector::<f64>::zeros(n);
    for e in errors {
        e.check_shape((w, h))?;
        mean += DVector::from_column_slice(e.values());
    }
    mean /= count as f64;

    let mut centered = DMatrix::<f64>::zeros(n, count);
    for (j, e) in errors.iter().enumerate() {
        let col = DVector::from_column_slice(e.values()) - &mean;
        centered.set_column(j, &col);
    }
    let mut cov = &centered * centered.transpose() / (count as f64 - 1.0);
    // exact symmetry regardless of summation order
    cov = (&cov + cov.transpose()) * 0.5;
    for i in 0..n {
        cov[(i, i)] += sigma_noise * sigma_noise;
    }
    let chol = Cholesky::new(cov)
        .ok_or_else(|| Error::Factorization("error covariance is not positive definite".into()))?
        .l();
    Ok(AemStats {
        mu: Image::new(w, h, mean.as_slice().to_vec())?,
        chol,
        n_samples: count,
        sigma_noise,
    })
}

impl AemStats {
    pub fn shape(&self) -> (usize, usize) {
        self.mu.shape()
    }

    /// `Sigma + sigma_noise^2 I`, rebuilt from the factor.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }

    /// `C^{-1} v`. Fails if the result overflows.
    pub fn whiten(&self, v: &Image) -> Result<Image> {
        v.check_shape(self.shape())?;
        let out = self
            .chol
            .solve_lower_triangular(&DVector::from_column_slice(v.values()))
            .expect("factor has a positive diagonal");
        let (w, h) = self.shape();
        Image::new(w, h, out.as_slice().to_vec())
    }

    /// `C^{-T} v`. Fails if the result overflows.
    pub fn whiten_adjoint(&self, v: &Image) -> Result<Image> {
        v.check_shape(self.shape())?;
        let out = self
            .chol
            .tr_solve_lower_triangular(&DVector::from_column_slice(v.values()))
            .expect("factor has a positive diagonal");
        let (w, h) = self.shape();
        Image::new(w, h, out.as_slice().to_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (w, h) = self.shape();
        let n = w * h;
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * (n + n * n));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(w as u64).to_le_bytes());
        out.extend_from_slice(&(h as u64).to_le_bytes());
        out.extend_from_slice(&(self.n_samples as u64).to_le_bytes());
        out.extend_from_slice(&self.sigma_noise.to_le_bytes());
        for v in self.mu.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        // row-major
        for i in 0..n {
            for j in 0..n {
                out.extend_from_slice(&self.chol[(i, j)].to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format("truncated stats header".into()));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Format("not an error-statistics file".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported stats version {version}"
            )));
        }
        let (w, h) = (u64_at(8), u64_at(16));
        let n_samples = u64_at(24);
        let sigma_noise = f64_at(32);
        let n = w
            .checked_mul(h)
            .filter(|&n| n > 0 && n <= DENSE_PIXEL_LIMIT as u64)
            .ok_or_else(|| Error::Format(format!("invalid stats shape {w}x{h}")))?
            as usize;
        if n_samples < 2 {
            return Err(Error::Format(format!("invalid sample count {n_samples}")));
        }
        if !(sigma_noise > 0.0) || !sigma_noise.is_finite() {
            return Err(Error::Format(format!("invalid noise level {sigma_noise}")));
        }
        let expected = HEADER_LEN + 8 * (n + n * n);
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "stats payload has {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let mu: Vec<f64> = (0..n).map(|i| f64_at(HEADER_LEN + 8 * i)).collect();
        let base = HEADER_LEN + 8 * n;
        let chol = DMatrix::from_fn(n, n, |i, j| f64_at(base + 8 * (i * n + j)));
        for i in 0..n {
            // C C^T = Sigma + sigma^2 I has no singular value below sigma, and
            // neither does C, so each diagonal entry (an eigenvalue) is at least sigma.
            if !(chol[(i, i)] >= sigma_noise * (1.0 - 1e-9)) || !chol[(i, i)].is_finite() {
                return Err(Error::Format(
                    "factor diagonal must be at least the noise level".into(),
                ));
            }
            for j in 0..n {
                let v = chol[(i, j)];
                if !v.is_finite() || (j > i && v != 0.0) {
                    return Err(Error::Format("factor is not lower triangular".into()));
                }
            }
        }
        let mu = Image::new(w as usize, h as usize, mu)
            .map_err(|e| Error::Format(format!("mean vector: {e}")))?;
        Ok(AemStats {
            mu,
            chol,
            n_samples: n_samples as usize,
            sigma_noise,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// `u -> scale * C^{-1} Ã u`.
pub struct Whitened<'a> {
    pub approx: &'a dyn LinearOperator,
    pub stats: &'a AemStats,
    pub scale: f64,
}

impl LinearOperator for Whitened<'_> {
    fn input_shape(&self) -> (usize, usize) {
        self.approx.input_shape()
    }
    fn output_shape(&self) -> (usize, usize) {
        self.approx.output_shape()
    }
    fn apply(&self, v: &Image) -> Image {
        &self
            .stats
            .whiten(&self.approx.apply(v))
            .expect("bounded whitening")
            * self.scale
    }
    fn apply_adjoint(&self, w: &Image) -> Image {
        &self
            .approx
            .apply_adjoint(&self.stats.whiten_adjoint(w).expect("bounded whitening"))
            * self.scale
    }
}

/// Reconstruction with the error-corrected, whitened squared-L2 data term.
/// Starts from `y`.
///
/// The primal-dual solver runs on the equivalent problem multiplied by
/// `sigma_noise^2`, which keeps the whitened operator norm comparable to the
/// gradient's so the shared step size is not dominated by the data term.
pub fn aem_reconstruct(
    approx: &dyn LinearOperator,
    y: &Image,
    stats: &AemStats,
    lambda: f64,
    inner: &PdhgConfig,
) -> Result<Image> {
    if inner.fidelity != Fidelity::L2 {
        return Err(Error::Unsupported(
            "the approximation error method requires a squared L2 data fidelity".into(),
        ));
    }
    y.check_shape(approx.output_shape())?;
    stats.mu.check_shape(approx.output_shape())?;
    let scale = stats.sigma_noise;
    let op = Whitened {
        approx,
        stats,
        scale,
    };
    let data = &stats.whiten(&(y - &stats.mu))? * scale;
    let cfg = PdhgConfig {
        lambda: lambda * scale * scale,
        ..inner.clone()
    };
    let zero = Image::zeros(data.width(), data.height());
    let start = PdhgState::cold(y, approx.output_shape());
    Ok(pdhg_solve(&op, &data, &zero, &cfg, Some(start))?.solution)
}
