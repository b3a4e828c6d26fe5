//! Diffusion-type forward operators evaluated by explicit Euler time stepping.
//!
//! All three models share the step form `x <- x + dt * D(x)`:
//!
//! * linear diffusion: `D(x) = div(grad x)`, the 5-point Neumann Laplacian;
//! * Perona-Malik diffusion: `D(x) = div(g * grad x)` with the diffusivity
//!   `g = 1 / (1 + m^2 / kappa^2)` evaluated on cell faces, where `m` is the
//!   pixel gradient magnitude averaged onto the face;
//! * curvature flow: `D(x) = (|grad x| + psi) * div(grad x / (|grad x| + psi))`.
//!
//! Gradient magnitudes are `sqrt(dx^2 + dy^2 + GRADIENT_EPS)` so the step
//! maps are differentiable everywhere. Jacobian-vector and vector-Jacobian
//! products differentiate the discrete recurrence exactly.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{div, grad, Image, VectorField};

/// Added under the square root of every gradient magnitude.
pub const GRADIENT_EPS: f64 = 1e-12;

/// Largest grid accepted by [`ForwardModel::dense_jacobian`].
pub const DENSE_PIXEL_LIMIT: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dt: f64,
    pub steps: usize,
    /// Perona-Malik contrast parameter.
    pub kappa: f64,
    /// Curvature-flow stabilization threshold.
    pub psi: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            dt: 0.1,
            steps: 15,
            kappa: 0.1,
            psi: 0.001,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        // 0.25 is the explicit stability bound of the 2D Laplacian with h = 1.
        if !(self.dt > 0.0 && self.dt <= 0.25) {
            return Err(Error::InvalidParameter(format!(
                "dt must lie in (0, 0.25], got {}",
                self.dt
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidParameter("steps must be at least 1".into()));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "kappa must be positive, got {}",
                self.kappa
            )));
        }
        if !(self.psi > 0.0 && self.psi.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "psi must be positive, got {}",
                self.psi
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "ld")]
    LinearDiffusion,
    #[serde(rename = "nld")]
    NonlinearDiffusion,
    #[serde(rename = "cf")]
    CurvatureFlow,
}

impl ModelKind {
    pub fn short_name(self) -> &'static str {
        match self {
            ModelKind::LinearDiffusion => "ld",
            ModelKind::NonlinearDiffusion => "nld",
            ModelKind::CurvatureFlow => "cf",
        }
    }

    pub fn is_linear(self) -> bool {
        self == ModelKind::LinearDiffusion
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardModel {
    pub kind: ModelKind,
    pub params: ModelParams,
}

impl ForwardModel {
    pub fn new(kind: ModelKind, params: ModelParams) -> Result<Self> {
        params.validate()?;
        Ok(ForwardModel { kind, params })
    }

    pub fn linear_diffusion(params: ModelParams) -> Result<Self> {
        Self::new(ModelKind::LinearDiffusion, params)
    }

    pub fn nonlinear_diffusion(params: ModelParams) -> Result<Self> {
        Self::new(ModelKind::NonlinearDiffusion, params)
    }

    pub fn curvature_flow(params: ModelParams) -> Result<Self> {
        Self::new(ModelKind::CurvatureFlow, params)
    }

    pub fn evaluate(&self, x0: &Image) -> Result<Image> {
        let mut x = x0.clone();
        for _ in 0..self.params.steps {
            let d = self.step_update(&x);
            x.axpy(self.params.dt, &d);
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("forward model evaluation"));
        }
        Ok(x)
    }

    /// Runs the model from `x0` and keeps every intermediate state together
    /// with the per-step linearization data needed by [`Trajectory::jvp`] and
    /// [`Trajectory::vjp`].
    pub fn trajectory(&self, x0: &Image) -> Result<Trajectory> {
        let mut steps = Vec::with_capacity(self.params.steps);
        let mut x = x0.clone();
        for _ in 0..self.params.steps {
            let coeffs = StepCoeffs::new(self, &x);
            let d = coeffs.update(&x);
            let next = Image::lin_comb(1.0, &x, self.params.dt, &d);
            steps.push(coeffs);
            x = next;
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("forward model evaluation"));
        }
        Ok(Trajectory {
            dt: self.params.dt,
            shape: x0.shape(),
            steps,
            output: x,
        })
    }

    pub fn jvp(&self, x: &Image, v: &Image) -> Result<Image> {
        v.check_shape(x.shape())?;
        Ok(self.trajectory(x)?.jvp(v))
    }

    pub fn vjp(&self, x: &Image, w: &Image) -> Result<Image> {
        w.check_shape(x.shape())?;
        Ok(self.trajectory(x)?.vjp(w))
    }

    /// Column `k` is `jvp(x, e_k)` over the row-major flattening.
    pub fn dense_jacobian(&self, x: &Image) -> Result<DMatrix<f64>> {
        let n = x.len();
        if n > DENSE_PIXEL_LIMIT {
            return Err(Error::GridTooLarge {
                pixels: n,
                limit: DENSE_PIXEL_LIMIT,
            });
        }
        let traj = self.trajectory(x)?;
        let (w, h) = x.shape();
        let columns: Vec<Image> = (0..n)
            .into_par_iter()
            .map(|k| traj.jvp(&Image::basis(w, h, k)))
            .collect();
        Ok(DMatrix::from_fn(n, n, |r, c| columns[c].values()[r]))
    }

    fn step_update(&self, x: &Image) -> Image {
        match self.kind {
            ModelKind::LinearDiffusion => div(&grad(x)),
            _ => StepCoeffs::new(self, x).update(x),
        }
    }
}

/// Stored forward pass of a model from a fixed starting point.
#[derive(Clone, Debug)]
pub struct Trajectory {
    dt: f64,
    shape: (usize, usize),
    steps: Vec<StepCoeffs>,
    output: Image,
}

impl Trajectory {
    /// Model output at the end of the trajectory.
    pub fn output(&self) -> &Image {
        &self.output
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    /// Directional derivative of the model at the trajectory's start.
    ///
    /// Panics if `v` does not match the trajectory's shape.
    pub fn jvp(&self, v: &Image) -> Image {
        assert_eq!(v.shape(), self.shape, "jvp direction shape mismatch");
        let mut v = v.clone();
        for step in &self.steps {
            let dv = step.jvp(&v);
            v.axpy(self.dt, &dv);
        }
        v
    }

    /// Transpose of [`Trajectory::jvp`].
    pub fn vjp(&self, w: &Image) -> Image {
        assert_eq!(w.shape(), self.shape, "vjp cotangent shape mismatch");
        let mut w = w.clone();
        for step in self.steps.iter().rev() {
            let dw = step.vjp(&w);
            w.axpy(self.dt, &dw);
        }
        w
    }
}

/// Linearization data of one explicit step around the state `x_t`.
#[derive(Clone, Debug)]
enum StepCoeffs {
    Linear,
    PeronaMalik(PeronaMalikCoeffs),
    Curvature(CurvatureCoeffs),
}

impl StepCoeffs {
    fn new(model: &ForwardModel, x: &Image) -> Self {
        match model.kind {
            ModelKind::LinearDiffusion => StepCoeffs::Linear,
            ModelKind::NonlinearDiffusion => {
                StepCoeffs::PeronaMalik(PeronaMalikCoeffs::new(x, model.params.kappa))
            }
            ModelKind::CurvatureFlow => {
                StepCoeffs::Curvature(CurvatureCoeffs::new(x, model.params.psi))
            }
        }
    }

    fn update(&self, x: &Image) -> Image {
        match self {
            StepCoeffs::Linear => div(&grad(x)),
            StepCoeffs::PeronaMalik(c) => c.update(),
            StepCoeffs::Curvature(c) => c.update(),
        }
    }

    fn jvp(&self, v: &Image) -> Image {
        match self {
            StepCoeffs::Linear => div(&grad(v)),
            StepCoeffs::PeronaMalik(c) => c.jvp(v),
            StepCoeffs::Curvature(c) => c.jvp(v),
        }
    }

    fn vjp(&self, w: &Image) -> Image {
        match self {
            // div(grad .) is symmetric.
            StepCoeffs::Linear => div(&grad(w)),
            StepCoeffs::PeronaMalik(c) => c.vjp(w),
            StepCoeffs::Curvature(c) => c.vjp(w),
        }
    }
}

fn magnitudes(g: &VectorField) -> Vec<f64> {
    g.dx.iter()
        .zip(&g.dy)
        .map(|(a, b)| (a * a + b * b + GRADIENT_EPS).sqrt())
        .collect()
}

/// Face arrays are indexed by the left (x faces) or upper (y faces) pixel and
/// are zero where the face lies outside the grid.
#[derive(Clone, Debug)]
struct PeronaMalikCoeffs {
    width: usize,
    height: usize,
    grad: VectorField,
    mag: Vec<f64>,
    g_x: Vec<f64>,
    g_y: Vec<f64>,
    dg_x: Vec<f64>,
    dg_y: Vec<f64>,
}

impl PeronaMalikCoeffs {
    fn new(x: &Image, kappa: f64) -> Self {
        let (w, h) = x.shape();
        let n = w * h;
        let gr = grad(x);
        let mag = magnitudes(&gr);
        let inv_k2 = 1.0 / (kappa * kappa);
        let diffusivity = |m: f64| {
            let g = 1.0 / (1.0 + m * m * inv_k2);
            (g, -2.0 * m * inv_k2 * g * g)
        };
        let mut g_x = vec![0.0; n];
        let mut g_y = vec![0.0; n];
        let mut dg_x = vec![0.0; n];
        let mut dg_y = vec![0.0; n];
        for i in 0..h {
            for j in 0..w {
                let k = i * w + j;
                if j + 1 < w {
                    (g_x[k], dg_x[k]) = diffusivity(0.5 * (mag[k] + mag[k + 1]));
                }
                if i + 1 < h {
                    (g_y[k], dg_y[k]) = diffusivity(0.5 * (mag[k] + mag[k + w]));
                }
            }
        }
        PeronaMalikCoeffs {
            width: w,
            height: h,
            grad: gr,
            mag,
            g_x,
            g_y,
            dg_x,
            dg_y,
        }
    }

    fn update(&self) -> Image {
        let mut flux = VectorField::zeros(self.width, self.height);
        for k in 0..self.mag.len() {
            flux.dx[k] = self.g_x[k] * self.grad.dx[k];
            flux.dy[k] = self.g_y[k] * self.grad.dy[k];
        }
        div(&flux)
    }

    fn jvp(&self, v: &Image) -> Image {
        let (w, h) = (self.width, self.height);
        let gv = grad(v);
        let dm: Vec<f64> = (0..w * h)
            .map(|k| (self.grad.dx[k] * gv.dx[k] + self.grad.dy[k] * gv.dy[k]) / self.mag[k])
            .collect();
        let mut flux = VectorField::zeros(w, h);
        for i in 0..h {
            for j in 0..w {
                let k = i * w + j;
                if j + 1 < w {
                    flux.dx[k] = self.g_x[k] * gv.dx[k]
                        + self.dg_x[k] * self.grad.dx[k] * 0.5 * (dm[k] + dm[k + 1]);
                }
                if i + 1 < h {
                    flux.dy[k] = self.g_y[k] * gv.dy[k]
                        + self.dg_y[k] * self.grad.dy[k] * 0.5 * (dm[k] + dm[k + w]);
                }
            }
        }
        div(&flux)
    }

    fn vjp(&self, wt: &Image) -> Image {
        let (w, h) = (self.width, self.height);
        let a = grad(wt);
        let mut b = VectorField::zeros(w, h);
        let mut mu = vec![0.0; w * h];
        for i in 0..h {
            for j in 0..w {
                let k = i * w + j;
                if j + 1 < w {
                    b.dx[k] = self.g_x[k] * a.dx[k];
                    let c = 0.5 * self.dg_x[k] * self.grad.dx[k] * a.dx[k];
                    mu[k] += c;
                    mu[k + 1] += c;
                }
                if i + 1 < h {
                    b.dy[k] = self.g_y[k] * a.dy[k];
                    let c = 0.5 * self.dg_y[k] * self.grad.dy[k] * a.dy[k];
                    mu[k] += c;
                    mu[k + w] += c;
                }
            }
        }
        for k in 0..w * h {
            let s = mu[k] / self.mag[k];
            b.dx[k] += s * self.grad.dx[k];
            b.dy[k] += s * self.grad.dy[k];
        }
        div(&b)
    }
}

#[derive(Clone, Debug)]
struct CurvatureCoeffs {
    width: usize,
    height: usize,
    grad: VectorField,
    mag: Vec<f64>,
    /// `mag + psi`
    scale: Vec<f64>,
    /// `div(grad x / scale)`
    div_normal: Image,
}

impl CurvatureCoeffs {
    fn new(x: &Image, psi: f64) -> Self {
        let (w, h) = x.shape();
        let gr = grad(x);
        let mag = magnitudes(&gr);
        let scale: Vec<f64> = mag.iter().map(|m| m + psi).collect();
        let normal = VectorField::new(
            w,
            h,
            gr.dx.iter().zip(&scale).map(|(d, s)| d / s).collect(),
            gr.dy.iter().zip(&scale).map(|(d, s)| d / s).collect(),
        )
        .unwrap_or_else(|_| VectorField::zeros(w, h));
        let div_normal = div(&normal);
        CurvatureCoeffs {
            width: w,
            height: h,
            grad: gr,
            mag,
            scale,
            div_normal,
        }
    }

    fn update(&self) -> Image {
        let mut out = self.div_normal.clone();
        for (o, s) in out.values_mut().iter_mut().zip(&self.scale) {
            *o *= s;
        }
        out
    }

    fn jvp(&self, v: &Image) -> Image {
        let n = self.width * self.height;
        let gv = grad(v);
        let mut d_normal = VectorField::zeros(self.width, self.height);
        let mut d_scale = vec![0.0; n];
        for k in 0..n {
            let (dx, dy, p) = (self.grad.dx[k], self.grad.dy[k], self.scale[k]);
            d_scale[k] = (dx * gv.dx[k] + dy * gv.dy[k]) / self.mag[k];
            let r = d_scale[k] / (p * p);
            d_normal.dx[k] = gv.dx[k] / p - dx * r;
            d_normal.dy[k] = gv.dy[k] / p - dy * r;
        }
        let div_dn = div(&d_normal);
        let dn = self.div_normal.values();
        Image::from_fn(self.width, self.height, |i, j| {
            let k = i * self.width + j;
            d_scale[k] * dn[k] + self.scale[k] * div_dn.values()[k]
        })
    }

    fn vjp(&self, wt: &Image) -> Image {
        let n = self.width * self.height;
        let w = wt.values();
        let weighted = Image::from_fn(self.width, self.height, |i, j| {
            let k = i * self.width + j;
            self.scale[k] * w[k]
        });
        let z = grad(&weighted);
        let dn = self.div_normal.values();
        let mut c = VectorField::zeros(self.width, self.height);
        for k in 0..n {
            let (dx, dy, p) = (self.grad.dx[k], self.grad.dy[k], self.scale[k]);
            let mu = dn[k] * w[k] + (dx * z.dx[k] + dy * z.dy[k]) / (p * p);
            c.dx[k] = dx * mu / self.mag[k] - z.dx[k] / p;
            c.dy[k] = dy * mu / self.mag[k] - z.dy[k] / p;
        }
        &div(&c) * -1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{inner, norm_l2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_models() -> Vec<ForwardModel> {
        let p = ModelParams::default();
        vec![
            ForwardModel::linear_diffusion(p).unwrap(),
            ForwardModel::nonlinear_diffusion(p).unwrap(),
            ForwardModel::curvature_flow(p).unwrap(),
        ]
    }

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |_, _| rng.random_range(0.0..1.0))
    }

    fn max_abs_diff(a: &Image, b: &Image) -> f64 {
        (a - b).values().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    #[test]
    fn constants_are_fixed_points() {
        let c = Image::filled(9, 7, 0.37);
        for m in all_models() {
            assert!(
                max_abs_diff(&m.evaluate(&c).unwrap(), &c) < 1e-15,
                "{:?}",
                m.kind
            );
        }
    }

    #[test]
    fn one_linear_step_on_impulse() {
        let p = ModelParams {
            steps: 1,
            ..Default::default()
        };
        let ld = ForwardModel::linear_diffusion(p).unwrap();
        let mut x = Image::zeros(7, 7);
        x.set(3, 3, 1.0);
        let y = ld.evaluate(&x).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let expected = match (i, j) {
                    (3, 3) => 0.6,
                    (2, 3) | (4, 3) | (3, 2) | (3, 4) => 0.1,
                    _ => 0.0,
                };
                assert!((y.get(i, j) - expected).abs() < 1e-15, "({i},{j})");
            }
        }
    }

    #[test]
    fn huge_kappa_reduces_to_linear_diffusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(&mut rng, 16, 16);
        let p = ModelParams {
            kappa: 1e6,
            ..Default::default()
        };
        let nld = ForwardModel::nonlinear_diffusion(p).unwrap();
        let ld = ForwardModel::linear_diffusion(p).unwrap();
        let d = max_abs_diff(&nld.evaluate(&x).unwrap(), &ld.evaluate(&x).unwrap());
        assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn huge_psi_reduces_to_linear_diffusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_image(&mut rng, 16, 16);
        let p = ModelParams {
            psi: 1e6,
            ..Default::default()
        };
        let cf = ForwardModel::curvature_flow(p).unwrap();
        let ld = ForwardModel::linear_diffusion(p).unwrap();
        let d = max_abs_diff(&cf.evaluate(&x).unwrap(), &ld.evaluate(&x).unwrap());
        assert!(d < 1e-3, "{d}");
    }

    #[test]
    fn zero_direction_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_image(&mut rng, 8, 8);
        let z = Image::zeros(8, 8);
        for m in all_models() {
            assert_eq!(norm_l2(&m.jvp(&x, &z).unwrap()), 0.0);
            assert_eq!(norm_l2(&m.vjp(&x, &z).unwrap()), 0.0);
        }
    }

    #[test]
    fn linear_jvp_is_independent_of_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ld = all_models()[0];
        let v = random_image(&mut rng, 10, 6);
        let expected = ld.evaluate(&v).unwrap();
        for _ in 0..3 {
            let x = random_image(&mut rng, 10, 6);
            assert!(max_abs_diff(&ld.jvp(&x, &v).unwrap(), &expected) < 1e-14);
            assert!(max_abs_diff(&ld.vjp(&x, &v).unwrap(), &expected) < 1e-14);
        }
    }

    #[test]
    fn linear_dense_jacobian_is_symmetric_and_transposes_to_vjp() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ld = all_models()[0];
        let x = random_image(&mut rng, 4, 4);
        let j = ld.dense_jacobian(&x).unwrap();
        assert!((&j - j.transpose()).amax() < 1e-15);

        for m in all_models() {
            let x = random_image(&mut rng, 8, 8);
            let j = m.dense_jacobian(&x).unwrap();
            let w = random_image(&mut rng, 8, 8);
            let jt_w = j.transpose() * nalgebra::DVector::from_column_slice(w.values());
            let vjp = m.vjp(&x, &w).unwrap();
            for (a, b) in jt_w.iter().zip(vjp.values()) {
                assert!((a - b).abs() < 1e-12, "{:?}: {a} vs {b}", m.kind);
            }
        }
    }

    #[test]
    fn perona_malik_jacobian_at_constant_matches_linear() {
        let models = all_models();
        let x = Image::filled(5, 5, 0.4);
        let jl = models[0].dense_jacobian(&x).unwrap();
        let jn = models[1].dense_jacobian(&x).unwrap();
        assert!((jl - jn).amax() < 1e-9);
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for m in all_models() {
            for _ in 0..10 {
                let x = random_image(&mut rng, 12, 9);
                let v = random_image(&mut rng, 12, 9);
                let w = random_image(&mut rng, 12, 9);
                let lhs = inner(&m.jvp(&x, &v).unwrap(), &w);
                let rhs = inner(&v, &m.vjp(&x, &w).unwrap());
                assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs(), "{:?}", m.kind);
            }
        }
    }

    #[test]
    fn jvp_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-4;
        for m in all_models() {
            let x = random_image(&mut rng, 16, 16);
            let v = random_image(&mut rng, 16, 16);
            let plus = m.evaluate(&Image::lin_comb(1.0, &x, h, &v)).unwrap();
            let minus = m.evaluate(&Image::lin_comb(1.0, &x, -h, &v)).unwrap();
            let fd = &(&plus - &minus) * (0.5 / h);
            let jv = m.jvp(&x, &v).unwrap();
            let rel = norm_l2(&(&fd - &jv)) / norm_l2(&jv);
            assert!(rel < 1e-4, "{:?}: {rel}", m.kind);
        }
    }

    #[test]
    fn curvature_flow_difference_error_is_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cf = all_models()[2];
        for _ in 0..3 {
            let x = random_image(&mut rng, 16, 16);
            let v = random_image(&mut rng, 16, 16);
            let jv = cf.jvp(&x, &v).unwrap();
            let err = |h: f64| {
                let plus = cf.evaluate(&Image::lin_comb(1.0, &x, h, &v)).unwrap();
                let minus = cf.evaluate(&Image::lin_comb(1.0, &x, -h, &v)).unwrap();
                norm_l2(&(&(&(&plus - &minus) * (0.5 / h)) - &jv)) / norm_l2(&jv)
            };
            let (coarse, fine) = (err(1e-5), err(1e-6));
            assert!(fine < 1e-5, "{fine}");
            assert!(fine < coarse / 50.0, "{coarse} -> {fine}");
        }
    }

    #[test]
    fn mass_conservation_and_maximum_principle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let models = all_models();
        for _ in 0..10 {
            let x = random_image(&mut rng, 11, 13);
            for m in &models[..2] {
                let y = m.evaluate(&x).unwrap();
                assert!((y.sum() - x.sum()).abs() <= 1e-9 * x.sum().abs());
            }
            let y = models[0].evaluate(&x).unwrap();
            assert!(y.min() >= x.min() - 1e-15 && y.max() <= x.max() + 1e-15);
        }
    }

    #[test]
    fn parameter_validation() {
        let bad = [
            ModelParams {
                dt: 0.3,
                ..Default::default()
            },
            ModelParams {
                dt: 0.0,
                ..Default::default()
            },
            ModelParams {
                steps: 0,
                ..Default::default()
            },
            ModelParams {
                kappa: -1.0,
                ..Default::default()
            },
            ModelParams {
                psi: 0.0,
                ..Default::default()
            },
        ];
        for p in bad {
            assert!(ForwardModel::nonlinear_diffusion(p).is_err(), "{p:?}");
        }
        assert!(ForwardModel::curvature_flow(ModelParams {
            dt: 0.25,
            ..Default::default()
        })
        .is_ok());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let m = all_models()[1];
        let r = m.jvp(&Image::zeros(4, 4), &Image::zeros(4, 5));
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn dense_jacobian_rejects_large_grids() {
        let m = all_models()[0];
        assert!(matches!(
            m.dense_jacobian(&Image::zeros(65, 64)),
            Err(Error::GridTooLarge { .. })
        ));
    }
}
