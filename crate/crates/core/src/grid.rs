//! Images, vector fields and the discrete calculus shared by the models and solvers.
//!
//! Pixels are stored row-major. The gradient uses forward differences with a
//! replicate (Neumann) boundary and unit spacing; `div` is its exact negative
//! adjoint, so `<grad u, q> = -<u, div q>` holds to rounding.

use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major grayscale intensity grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if values.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "{} values for a {width}x{height} grid",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidImage("non-finite intensity".into()));
        }
        Ok(Image {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Image {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    /// Builds an image from `f(row, col)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut values = Vec::with_capacity(width * height);
        for i in 0..height {
            for j in 0..width {
                values.push(f(i, j));
            }
        }
        Image {
            width,
            height,
            values,
        }
    }

    /// Unit impulse at flat index `k`.
    pub fn basis(width: usize, height: usize, k: usize) -> Self {
        let mut e = Self::zeros(width, height);
        e.values[k] = 1.0;
        e
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `(width, height)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.width + col] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Image {
        assert_same_shape(self.shape(), other.shape());
        Image {
            width: self.width,
            height: self.height,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &Image) {
        assert_same_shape(self.shape(), x.shape());
        for (s, &v) in self.values.iter_mut().zip(&x.values) {
            *s += alpha * v;
        }
    }

    /// `alpha * a + beta * b`
    pub fn lin_comb(alpha: f64, a: &Image, beta: f64, b: &Image) -> Image {
        a.zip_map(b, |x, y| alpha * x + beta * y)
    }

    pub fn transpose(&self) -> Image {
        Image::from_fn(self.height, self.width, |i, j| self.get(j, i))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Image {
        self.map(|v| v.clamp(lo, hi))
    }

    pub(crate) fn check_shape(&self, expected: (usize, usize)) -> Result<()> {
        if self.shape() != expected {
            return Err(Error::shape(expected, self.shape()));
        }
        Ok(())
    }
}

#[track_caller]
fn assert_same_shape(a: (usize, usize), b: (usize, usize)) {
    assert_eq!(a, b, "image shape mismatch");
}

impl Add for &Image {
    type Output = Image;
    fn add(self, rhs: &Image) -> Image {
        self.zip_map(rhs, |a, b| a + b)
    }
}

impl Sub for &Image {
    type Output = Image;
    fn sub(self, rhs: &Image) -> Image {
        self.zip_map(rhs, |a, b| a - b)
    }
}

impl Mul<f64> for &Image {
    type Output = Image;
    fn mul(self, rhs: f64) -> Image {
        self.map(|v| v * rhs)
    }
}

impl Neg for &Image {
    type Output = Image;
    fn neg(self) -> Image {
        self.map(|v| -v)
    }
}

impl AddAssign<&Image> for Image {
    fn add_assign(&mut self, rhs: &Image) {
        self.axpy(1.0, rhs);
    }
}

impl SubAssign<&Image> for Image {
    fn sub_assign(&mut self, rhs: &Image) {
        self.axpy(-1.0, rhs);
    }
}

/// Per-pixel 2-vector grid, stored as two row-major component arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    width: usize,
    height: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl VectorField {
    pub fn new(width: usize, height: usize, dx: Vec<f64>, dy: Vec<f64>) -> Result<Self> {
        let n = width * height;
        if width == 0 || height == 0 || dx.len() != n || dy.len() != n {
            return Err(Error::InvalidImage(format!(
                "vector field components of length {}/{} for a {width}x{height} grid",
                dx.len(),
                dy.len()
            )));
        }
        if dx.iter().chain(&dy).any(|v| !v.is_finite()) {
            return Err(Error::InvalidImage("non-finite vector component".into()));
        }
        Ok(VectorField {
            width,
            height,
            dx,
            dy,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        VectorField {
            width,
            height,
            dx: vec![0.0; n],
            dy: vec![0.0; n],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn is_finite(&self) -> bool {
        self.dx.iter().chain(&self.dy).all(|v| v.is_finite())
    }

    pub fn axpy(&mut self, alpha: f64, other: &VectorField) {
        assert_same_shape(self.shape(), other.shape());
        for (a, &b) in self.dx.iter_mut().zip(&other.dx) {
            *a += alpha * b;
        }
        for (a, &b) in self.dy.iter_mut().zip(&other.dy) {
            *a += alpha * b;
        }
    }
}

/// Forward differences, zero across the last column/row.
pub fn grad(u: &Image) -> VectorField {
    let (w, h) = u.shape();
    let v = u.values();
    let mut q = VectorField::zeros(w, h);
    for i in 0..h {
        let row = i * w;
        for j in 0..w - 1 {
            q.dx[row + j] = v[row + j + 1] - v[row + j];
        }
        if i + 1 < h {
            for j in 0..w {
                q.dy[row + j] = v[row + w + j] - v[row + j];
            }
        }
    }
    q
}

/// Negative adjoint of [`grad`]. Components on the last column (dx) and last
/// row (dy) are outside the range of `grad` and are ignored.
pub fn div(q: &VectorField) -> Image {
    let (w, h) = q.shape();
    let mut out = vec![0.0; w * h];
    for i in 0..h {
        let row = i * w;
        for j in 0..w {
            let k = row + j;
            let mut d = 0.0;
            if j + 1 < w {
                d += q.dx[k];
            }
            if j > 0 {
                d -= q.dx[k - 1];
            }
            if i + 1 < h {
                d += q.dy[k];
            }
            if i > 0 {
                d -= q.dy[k - w];
            }
            out[k] = d;
        }
    }
    Image {
        width: w,
        height: h,
        values: out,
    }
}

/// Euclidean inner product. Panics on shape mismatch.
pub fn inner(a: &Image, b: &Image) -> f64 {
    assert_same_shape(a.shape(), b.shape());
    a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum()
}

pub fn inner_field(a: &VectorField, b: &VectorField) -> f64 {
    assert_same_shape(a.shape(), b.shape());
    let x: f64 = a.dx.iter().zip(&b.dx).map(|(x, y)| x * y).sum();
    let y: f64 = a.dy.iter().zip(&b.dy).map(|(x, y)| x * y).sum();
    x + y
}

pub fn norm_l2(a: &Image) -> f64 {
    a.values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn norm_l1(a: &Image) -> f64 {
    a.values.iter().map(|v| v.abs()).sum()
}

/// Pointwise `sqrt(dx^2 + dy^2)`.
pub fn field_magnitude(q: &VectorField) -> Image {
    Image {
        width: q.width,
        height: q.height,
        values: q.dx.iter().zip(&q.dy).map(|(x, y)| x.hypot(*y)).collect(),
    }
}

/// Isotropic total variation: sum of pointwise gradient magnitudes.
pub fn total_variation(u: &Image) -> f64 {
    field_magnitude(&grad(u)).sum()
}
