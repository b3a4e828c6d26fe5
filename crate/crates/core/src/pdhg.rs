//! Chambolle-Pock primal-dual iteration for
//!
//! ```text
//! min_u  F(Ã u - b) + lambda * TV(u)
//! ```
//!
//! with `F = 0.5 ||.||_2^2` or `F = ||.||_1` and isotropic TV. The iteration
//! treats the stacked operator `(Ã, grad)` and uses `tau = sigma = 1/K`, `theta = 1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    div, field_magnitude, grad, inner, norm_l1, norm_l2, total_variation, Image, VectorField,
};
use crate::linearize::LinearOperator;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fidelity {
    /// `0.5 * ||r||_2^2`
    #[serde(rename = "l2")]
    L2,
    /// `||r||_1`
    #[serde(rename = "l1")]
    L1,
}

impl Fidelity {
    pub fn value(self, residual: &Image) -> f64 {
        match self {
            Fidelity::L2 => 0.5 * norm_l2(residual).powi(2),
            Fidelity::L1 => norm_l1(residual),
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Fidelity::L2 => "l2",
            Fidelity::L1 => "l1",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdhgConfig {
    pub fidelity: Fidelity,
    pub lambda: f64,
    pub max_iters: usize,
    /// Stop once `||u_{t+1} - u_t|| / max(||u_t||, 1)` drops below this.
    pub tol: f64,
    pub power_iters: usize,
    pub power_tol: f64,
    /// The estimated operator norm is multiplied by this factor before the
    /// step sizes are set. Power iteration approaches the norm from below.
    pub norm_margin: f64,
    /// Seed of the power-iteration start vector.
    pub seed: u64,
    /// Keep a per-iteration record of objective and dual feasibility.
    pub record_history: bool,
}

impl Default for PdhgConfig {
    fn default() -> Self {
        PdhgConfig {
            fidelity: Fidelity::L2,
            lambda: 0.01,
            max_iters: 2000,
            tol: 1e-6,
            power_iters: 200,
            power_tol: 1e-7,
            norm_margin: 1.02,
            seed: 0,
            record_history: false,
        }
    }
}

impl PdhgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter(
                "max_iters must be at least 1".into(),
            ));
        }
        if !(self.norm_margin >= 1.0) {
            return Err(Error::InvalidParameter(
                "norm_margin must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Iterates of one solve; passed back in to warm-start the next one.
#[derive(Clone, Debug, PartialEq)]
pub struct PdhgState {
    pub u: Image,
    pub u_bar: Image,
    /// Dual of the data term, in data space.
    pub p: Image,
    /// Dual of the TV term.
    pub q: VectorField,
    pub tau: f64,
    pub sigma: f64,
    pub theta: f64,
}

impl PdhgState {
    /// `u = u_bar = x0`, zero duals.
    pub fn cold(x0: &Image, data_shape: (usize, usize)) -> Self {
        PdhgState {
            u: x0.clone(),
            u_bar: x0.clone(),
            p: Image::zeros(data_shape.0, data_shape.1),
            q: VectorField::zeros(x0.width(), x0.height()),
            tau: 0.0,
            sigma: 0.0,
            theta: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PdhgRecord {
    pub iter: usize,
    pub objective: f64,
    /// `max |p|` after the iteration.
    pub max_p: f64,
    /// Largest pointwise magnitude of `q` after the iteration.
    pub max_q: f64,
}

#[derive(Clone, Debug)]
pub struct PdhgOutput {
    /// Final extrapolated primal iterate.
    pub solution: Image,
    pub state: PdhgState,
    pub iterations: usize,
    pub converged: bool,
    /// Estimated norm of the stacked operator (before the margin).
    pub op_norm: f64,
    pub history: Vec<PdhgRecord>,
}

/// Norm of `op`, or of the stacked map `v -> (op v, grad v)` when
/// `stack_grad` is set, by power iteration on the normal operator.
pub fn operator_norm(
    op: &dyn LinearOperator,
    stack_grad: bool,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> f64 {
    let (w, h) = op.input_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Image::from_fn(w, h, |_, _| rng.random_range(-1.0..1.0));
    let n0 = norm_l2(&v);
    v = &v * (1.0 / n0);
    let normal = |v: &Image| {
        let mut out = op.apply_adjoint(&op.apply(v));
        if stack_grad {
            out -= &div(&grad(v));
        }
        out
    };
    let mut eig = 0.0;
    for _ in 0..max_iters.max(1) {
        let mv = normal(&v);
        let rayleigh = inner(&v, &mv);
        let nrm = norm_l2(&mv);
        if nrm == 0.0 || !nrm.is_finite() {
            return 0.0;
        }
        let change = (rayleigh - eig).abs();
        eig = rayleigh;
        v = &mv * (1.0 / nrm);
        if change <= tol * eig.abs() {
            break;
        }
    }
    eig.max(0.0).sqrt()
}

/// Dual step of `F = 0.5||.||^2`: `(p + sigma r) / (1 + sigma)`.
pub fn prox_dual_l2(p: &Image, r: &Image, sigma: f64) -> Image {
    p.zip_map(r, |p, r| (p + sigma * r) / (1.0 + sigma))
}

/// Dual step of `F = ||.||_1`: projection of `p + sigma r` onto `[-1, 1]`.
pub fn prox_dual_l1(p: &Image, r: &Image, sigma: f64) -> Image {
    p.zip_map(r, |p, r| {
        let t = p + sigma * r;
        t / t.abs().max(1.0)
    })
}

/// Dual step of `lambda * TV`: per-pixel projection of `q + sigma g` onto the
/// disc of radius `lambda`.
pub fn prox_dual_tv(q: &VectorField, g: &VectorField, sigma: f64, lambda: f64) -> VectorField {
    let mut out = q.clone();
    out.axpy(sigma, g);
    for (a, b) in out.dx.iter_mut().zip(out.dy.iter_mut()) {
        let s = lambda / a.hypot(*b).max(lambda);
        *a *= s;
        *b *= s;
    }
    out
}

/// `F(op u - data) + lambda TV(u)`.
pub fn surrogate_objective(
    op: &dyn LinearOperator,
    data: &Image,
    lambda: f64,
    fidelity: Fidelity,
    u: &Image,
) -> f64 {
    fidelity.value(&(&op.apply(u) - data)) + lambda * total_variation(u)
}

/// Solves `min_u F(op u, y - eps) + lambda TV(u)`.
///
/// Without a warm state the iteration starts from `u = 0`.
pub fn pdhg_solve(
    op: &dyn LinearOperator,
    y: &Image,
    eps: &Image,
    cfg: &PdhgConfig,
    warm: Option<PdhgState>,
) -> Result<PdhgOutput> {
    let data = y - eps;
    let norm = operator_norm(op, true, cfg.power_iters, cfg.power_tol, cfg.seed);
    pdhg_solve_with_norm(op, &data, cfg, warm, norm)
}

/// As [`pdhg_solve`] with the effective data `y - eps` already assembled and
/// the stacked operator norm supplied by the caller.
pub fn pdhg_solve_with_norm(
    op: &dyn LinearOperator,
    data: &Image,
    cfg: &PdhgConfig,
    warm: Option<PdhgState>,
    op_norm: f64,
) -> Result<PdhgOutput> {
    cfg.validate()?;
    let in_shape = op.input_shape();
    data.check_shape(op.output_shape())?;
    if !(op_norm > 0.0) || !op_norm.is_finite() {
        return Err(Error::DegenerateOperator);
    }
    let mut state = match warm {
        Some(s) => {
            s.u.check_shape(in_shape)?;
            s.u_bar.check_shape(in_shape)?;
            s.p.check_shape(op.output_shape())?;
            if s.q.shape() != in_shape {
                return Err(Error::shape(in_shape, s.q.shape()));
            }
            s
        }
        None => PdhgState::cold(&Image::zeros(in_shape.0, in_shape.1), op.output_shape()),
    };
    let step = 1.0 / (op_norm * cfg.norm_margin);
    state.tau = step;
    state.sigma = step;
    state.theta = 1.0;
    let (tau, sigma, theta, lambda) = (state.tau, state.sigma, state.theta, cfg.lambda);

    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let residual = &op.apply(&state.u_bar) - data;
        state.p = match cfg.fidelity {
            Fidelity::L2 => prox_dual_l2(&state.p, &residual, sigma),
            Fidelity::L1 => prox_dual_l1(&state.p, &residual, sigma),
        };
        state.q = prox_dual_tv(&state.q, &grad(&state.u_bar), sigma, lambda);

        let mut u_next = state.u.clone();
        u_next.axpy(-tau, &op.apply_adjoint(&state.p));
        u_next.axpy(tau, &div(&state.q));

        let change = norm_l2(&(&u_next - &state.u)) / norm_l2(&state.u).max(1.0);
        if !change.is_finite() {
            return Err(Error::NonFinite("primal-dual iteration"));
        }
        state.u_bar = Image::lin_comb(1.0 + theta, &u_next, -theta, &state.u);
        state.u = u_next;

        if cfg.record_history {
            history.push(PdhgRecord {
                iter: iterations,
                objective: surrogate_objective(op, data, lambda, cfg.fidelity, &state.u),
                max_p: state.p.values().iter().fold(0.0, |m, v| m.max(v.abs())),
                max_q: field_magnitude(&state.q).max(),
            });
        }
        if change < cfg.tol {
            converged = true;
            break;
        }
    }

    Ok(PdhgOutput {
        solution: state.u_bar.clone(),
        state,
        iterations,
        converged,
        op_norm,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linearize::{fixed_approx, DenseMatrix, Identity};
    use crate::models::ModelParams;
    use nalgebra::DMatrix;

    fn test_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |i, j| {
            let base = if (i as f64 - 7.5).hypot(j as f64 - 7.5) < 5.0 {
                0.8
            } else {
                0.2
            };
            base + 0.05 * rng.random_range(-1.0..1.0)
        })
    }

    #[test]
    fn norm_of_simple_operators() {
        let id = Identity::new(6, 6);
        assert!((operator_norm(&id, false, 100, 1e-12, 0) - 1.0).abs() < 1e-6);
        let d = DenseMatrix::square(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            3.0, 1.0,
        ])))
        .unwrap();
        assert!((operator_norm(&d, false, 200, 1e-14, 0) - 3.0).abs() < 1e-6);
        let zero = DenseMatrix::square(DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(operator_norm(&zero, false, 10, 1e-12, 0), 0.0);
    }

    #[test]
    fn stacked_identity_norm_matches_dense_svd() {
        let (w, h) = (8, 8);
        let n = w * h;
        let id = Identity::new(w, h);
        let est = operator_norm(&id, true, 2000, 1e-12, 1);
        // Dense stacked matrix [I; Gx; Gy].
        let mut stacked = DMatrix::zeros(3 * n, n);
        for k in 0..n {
            let e = Image::basis(w, h, k);
            let g = grad(&e);
            stacked[(k, k)] = 1.0;
            for r in 0..n {
                stacked[(n + r, k)] = g.dx[r];
                stacked[(2 * n + r, k)] = g.dy[r];
            }
        }
        let svd = stacked.singular_values();
        let exact = svd.max();
        assert!((est - exact).abs() / exact < 0.01, "{est} vs {exact}");
        assert!(est <= 3.0);
    }

    #[test]
    fn prox_formulas() {
        let one = |v: f64| Image::filled(1, 1, v);
        assert_eq!(prox_dual_l2(&one(0.0), &one(2.0), 1.0).values()[0], 1.0);
        assert_eq!(prox_dual_l2(&one(0.3), &one(2.0), 0.0).values()[0], 0.3);
        // Repeated application with a fixed residual converges to it.
        let mut p = one(0.0);
        for _ in 0..200 {
            p = prox_dual_l2(&p, &one(2.0), 0.5);
        }
        assert!((p.values()[0] - 2.0).abs() < 1e-12);

        assert_eq!(prox_dual_l1(&one(0.0), &one(0.5), 1.0).values()[0], 0.5);
        assert_eq!(prox_dual_l1(&one(0.0), &one(5.0), 1.0).values()[0], 1.0);
        assert_eq!(prox_dual_l1(&one(0.0), &one(-5.0), 1.0).values()[0], -1.0);
    }

    #[test]
    fn tv_prox_projects() {
        let zero = VectorField::zeros(3, 3);
        assert_eq!(prox_dual_tv(&zero, &zero, 1.0, 0.5), zero);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rand_field = |rng: &mut ChaCha8Rng| {
            VectorField::new(
                3,
                3,
                (0..9).map(|_| rng.random_range(-3.0..3.0)).collect(),
                (0..9).map(|_| rng.random_range(-3.0..3.0)).collect(),
            )
            .unwrap()
        };
        for _ in 0..20 {
            let q = rand_field(&mut rng);
            let g = rand_field(&mut rng);
            let out = prox_dual_tv(&q, &g, 0.7, 0.5);
            assert!(field_magnitude(&out).max() <= 0.5 + 1e-15);
            let free = prox_dual_tv(&q, &g, 0.7, 1e9);
            let mut expected = q.clone();
            expected.axpy(0.7, &g);
            assert_eq!(free, expected);
        }
    }

    #[test]
    fn unregularized_identity_recovers_data() {
        let y = test_image(16, 16, 1);
        let cfg = PdhgConfig {
            lambda: 1e-9,
            tol: 1e-10,
            max_iters: 20000,
            ..Default::default()
        };
        let out = pdhg_solve(
            &Identity::new(16, 16),
            &y,
            &Image::zeros(16, 16),
            &cfg,
            None,
        )
        .unwrap();
        let rel = norm_l2(&(&out.solution - &y)) / norm_l2(&y);
        assert!(rel < 1e-4, "{rel}");
    }

    #[test]
    fn heavy_regularization_gives_mean() {
        let y = test_image(16, 16, 2);
        let cfg = PdhgConfig {
            lambda: 1e3,
            tol: 1e-10,
            max_iters: 50000,
            ..Default::default()
        };
        let out = pdhg_solve(
            &Identity::new(16, 16),
            &y,
            &Image::zeros(16, 16),
            &cfg,
            None,
        )
        .unwrap();
        let mean = y.mean();
        let dev = out
            .solution
            .values()
            .iter()
            .fold(0.0f64, |m, v| m.max((v - mean).abs()));
        assert!(dev < 1e-2, "{dev}");
    }

    #[test]
    fn duals_stay_feasible() {
        let y = test_image(16, 16, 3);
        for fidelity in [Fidelity::L1, Fidelity::L2] {
            let cfg = PdhgConfig {
                fidelity,
                lambda: 0.1,
                record_history: true,
                max_iters: 300,
                ..Default::default()
            };
            let out = pdhg_solve(
                &Identity::new(16, 16),
                &y,
                &Image::zeros(16, 16),
                &cfg,
                None,
            )
            .unwrap();
            for rec in &out.history {
                assert!(rec.max_q <= 0.1 * (1.0 + 1e-12));
                if fidelity == Fidelity::L1 {
                    assert!(rec.max_p <= 1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn warm_and_cold_starts_agree() {
        let p = ModelParams::default();
        let op = fixed_approx(p, 16, 16).unwrap();
        let y = op.apply(&test_image(16, 16, 4));
        let cfg = PdhgConfig {
            lambda: 0.01,
            tol: 1e-9,
            max_iters: 20000,
            ..Default::default()
        };
        let zero = Image::zeros(16, 16);
        let cold = pdhg_solve(&op, &y, &zero, &cfg, None).unwrap();
        let short = PdhgConfig {
            max_iters: 50,
            ..cfg.clone()
        };
        let partial = pdhg_solve(&op, &y, &zero, &short, None).unwrap();
        let warm = pdhg_solve(&op, &y, &zero, &cfg, Some(partial.state)).unwrap();
        let f = |u: &Image| surrogate_objective(&op, &y, cfg.lambda, cfg.fidelity, u);
        let (a, b) = (f(&cold.solution), f(&warm.solution));
        assert!((a - b).abs() <= 1e-6 * a.abs(), "{a} vs {b}");
    }

    #[test]
    fn degenerate_operator_is_rejected() {
        let zero = DenseMatrix::square(DMatrix::zeros(4, 4)).unwrap();
        let y = Image::zeros(4, 1);
        let r = pdhg_solve_with_norm(&zero, &y, &PdhgConfig::default(), None, 0.0);
        assert!(matches!(r, Err(Error::DegenerateOperator)));
    }
}
