//! Outer correction loop.
//!
//! Each outer step freezes the approximation error at the current iterate,
//! solves the resulting convex problem
//!
//! ```text
//! s_k = argmin_u F(Ã_k u, y - eps(x_k)) + lambda R(u)
//! ```
//!
//! and moves to `x_{k+1} = delta_k s_k + (1 - delta_k) x_k`. In fixed mode
//! `Ã_k` is one linear operator throughout; in adaptive mode it is the
//! Jacobian of the forward model at `x_k`, so `eps(x_k) = A(x_k) - J_k x_k`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{norm_l2, total_variation, Image};
use crate::linearize::{approx_error, to_dense, ForwardOperator, LinearOperator};
use crate::pdhg::{operator_norm, pdhg_solve_with_norm, Fidelity, PdhgConfig, PdhgState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regularizer {
    /// Isotropic total variation.
    TotalVariation,
    /// `0.5 * ||u||^2`
    Tikhonov,
}

impl Regularizer {
    pub fn value(self, u: &Image) -> f64 {
        match self {
            Regularizer::TotalVariation => total_variation(u),
            Regularizer::Tikhonov => 0.5 * norm_l2(u).powi(2),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Fixed,
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Damping {
    None,
    Constant(f64),
    /// Uniform grid over `[0, 1]` with this many points.
    LineSearch(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum InitialGuess {
    Data,
    Zero,
    Given(Image),
}

impl InitialGuess {
    pub fn label(&self) -> &'static str {
        match self {
            InitialGuess::Data => "data",
            InitialGuess::Zero => "zero",
            InitialGuess::Given(_) => "given",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceConfig {
    pub mode: Mode,
    pub damping: Damping,
    pub fidelity: Fidelity,
    pub lambda: f64,
    pub outer_max: usize,
    /// From the second outer iteration on, stop when the true objective
    /// decreases by less than this fraction of its previous value.
    /// `f64::NEG_INFINITY` disables the test.
    pub outer_tol: f64,
    /// Stop when `||x_{k+1} - x_k|| <= step_tol * max(||x_k||, 1)`. Zero disables.
    pub step_tol: f64,
    pub inner: PdhgConfig,
    pub x0_policy: InitialGuess,
    pub warm_start: bool,
    pub record_timing: bool,
    /// Keep every iterate in the trace.
    pub keep_iterates: bool,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            mode: Mode::Fixed,
            damping: Damping::None,
            fidelity: Fidelity::L2,
            lambda: 0.01,
            outer_max: 30,
            outer_tol: 1e-5,
            step_tol: 0.0,
            inner: PdhgConfig::default(),
            x0_policy: InitialGuess::Data,
            warm_start: true,
            record_timing: true,
            keep_iterates: false,
        }
    }
}

impl SequenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_max == 0 {
            return Err(Error::InvalidParameter(
                "outer_max must be at least 1".into(),
            ));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        match self.damping {
            Damping::Constant(d) if !(d > 0.0 && d <= 1.0) => Err(Error::InvalidParameter(
                format!("damping must lie in (0, 1], got {d}"),
            )),
            Damping::LineSearch(n) if n < 2 => Err(Error::InvalidParameter(
                "line search needs at least two grid points".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Inner solver settings with this sequence's fidelity and lambda.
    pub fn inner_config(&self) -> PdhgConfig {
        PdhgConfig {
            fidelity: self.fidelity,
            lambda: self.lambda,
            ..self.inner.clone()
        }
    }
}

/// `F(A(u), y) + lambda R(u)` against the true model.
pub struct Objective<'a> {
    pub model: &'a dyn ForwardOperator,
    pub y: &'a Image,
    pub lambda: f64,
    pub fidelity: Fidelity,
    pub regularizer: Regularizer,
}

impl Objective<'_> {
    /// `(objective, data fidelity)` at `u`.
    pub fn evaluate(&self, u: &Image) -> Result<(f64, f64)> {
        let au = self.model.evaluate(u)?;
        au.check_shape(self.y.shape())?;
        let fid = self.fidelity.value(&(&au - self.y));
        Ok((fid + self.lambda * self.regularizer.value(u), fid))
    }

    pub fn value(&self, u: &Image) -> Result<f64> {
        Ok(self.evaluate(u)?.0)
    }

    /// Gradient `J(u)^* (A(u) - y) + lambda u`; smooth objectives only.
    pub fn gradient(&self, u: &Image) -> Result<Image> {
        if self.fidelity != Fidelity::L2 || self.regularizer != Regularizer::Tikhonov {
            return Err(Error::Unsupported(
                "gradient requires L2 fidelity with Tikhonov regularization".into(),
            ));
        }
        let approx = self.model.linearize(u)?;
        let au = approx.eval(u);
        let mut g = approx.linear.apply_adjoint(&(&au - self.y));
        g.axpy(self.lambda, u);
        Ok(g)
    }
}

/// `F(A(u), y) + lambda TV(u)`.
pub fn objective(
    model: &dyn ForwardOperator,
    y: &Image,
    lambda: f64,
    fidelity: Fidelity,
    u: &Image,
) -> Result<f64> {
    Objective {
        model,
        y,
        lambda,
        fidelity,
        regularizer: Regularizer::TotalVariation,
    }
    .value(u)
}

/// Minimizes `f` over the uniform grid `{0, 1/(n-1), ..., 1}`; the first
/// minimizer in ascending order wins. Returns `(delta, f(delta))`.
pub fn line_search_by(
    grid_size: usize,
    mut f: impl FnMut(f64) -> Result<f64>,
) -> Result<(f64, f64)> {
    if grid_size < 2 {
        return Err(Error::InvalidParameter(
            "line search needs at least two grid points".into(),
        ));
    }
    let mut best = (0.0, f(0.0)?);
    for i in 1..grid_size {
        let delta = i as f64 / (grid_size - 1) as f64;
        let v = f(delta)?;
        if v < best.1 {
            best = (delta, v);
        }
    }
    Ok(best)
}

/// Best step `delta` on the segment from `x_k` (delta = 0) to `s_k` (delta = 1).
pub fn line_search(
    objective: &Objective<'_>,
    x_k: &Image,
    s_k: &Image,
    grid_size: usize,
) -> Result<f64> {
    let (delta, _) = line_search_by(grid_size, |d| {
        objective.value(&Image::lin_comb(d, s_k, 1.0 - d, x_k))
    })?;
    Ok(delta)
}

/// Solver for the convex subproblem `min_u F(op u - data) + lambda R(u)`.
pub trait InnerSolver {
    fn regularizer(&self) -> Regularizer;

    /// `operator_changed` is false when `op` is the same operator as in the
    /// previous call. Returns the minimizer and the iterations spent.
    fn solve(
        &mut self,
        op: &dyn LinearOperator,
        data: &Image,
        x_k: &Image,
        operator_changed: bool,
    ) -> Result<(Image, usize)>;
}

/// TV-regularized subproblems by primal-dual iteration, warm-started across
/// outer iterations.
pub struct PdhgInner {
    cfg: PdhgConfig,
    warm_start: bool,
    state: Option<PdhgState>,
    norm: Option<f64>,
}

impl PdhgInner {
    pub fn new(cfg: PdhgConfig, warm_start: bool) -> Self {
        PdhgInner {
            cfg,
            warm_start,
            state: None,
            norm: None,
        }
    }
}

impl InnerSolver for PdhgInner {
    fn regularizer(&self) -> Regularizer {
        Regularizer::TotalVariation
    }

    fn solve(
        &mut self,
        op: &dyn LinearOperator,
        data: &Image,
        x_k: &Image,
        operator_changed: bool,
    ) -> Result<(Image, usize)> {
        let norm = match self.norm {
            Some(n) if !operator_changed => n,
            _ => {
                let n = operator_norm(
                    op,
                    true,
                    self.cfg.power_iters,
                    self.cfg.power_tol,
                    self.cfg.seed,
                );
                self.norm = Some(n);
                n
            }
        };
        let start = match self.state.take() {
            Some(s) if self.warm_start => s,
            _ => PdhgState::cold(x_k, op.output_shape()),
        };
        let out = pdhg_solve_with_norm(op, data, &self.cfg, Some(start), norm)?;
        self.state = Some(out.state);
        Ok((out.solution, out.iterations))
    }
}

/// Exact Tikhonov subproblem `min_u 0.5||op u - data||^2 + 0.5 lambda ||u||^2`
/// by dense normal equations. Small grids only.
pub struct TikhonovDense {
    pub lambda: f64,
}

impl InnerSolver for TikhonovDense {
    fn regularizer(&self) -> Regularizer {
        Regularizer::Tikhonov
    }

    fn solve(
        &mut self,
        op: &dyn LinearOperator,
        data: &Image,
        _x_k: &Image,
        _operator_changed: bool,
    ) -> Result<(Image, usize)> {
        let m = to_dense(op)?;
        let n = m.ncols();
        let normal = m.tr_mul(&m) + DMatrix::identity(n, n) * self.lambda;
        let rhs = m.tr_mul(&DVector::from_column_slice(data.values()));
        let sol = normal
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Factorization("singular Tikhonov normal matrix".into()))?;
        let (w, h) = op.input_shape();
        Ok((Image::new(w, h, sol.as_slice().to_vec())?, 1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    /// `F(A(x_k), y)` against the true model.
    pub data_fidelity: f64,
    pub objective: f64,
    pub delta: f64,
    pub inner_iters: usize,
    /// Wall time since the start of the run (zero when timing is off).
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    MaxIterations,
    ObjectiveStalled,
    StepConverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceTrace {
    /// One record per iterate, starting with `x_0`.
    pub records: Vec<TraceRecord>,
    pub stop_reason: StopReason,
    pub x0_policy: String,
    #[serde(skip)]
    pub iterates: Vec<Image>,
}

impl SequenceTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn objectives(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.objective).collect()
    }
}

/// Fixed approximation sequence with the primal-dual inner solver.
pub fn run_fixed(
    model: &dyn ForwardOperator,
    approx: &dyn LinearOperator,
    y: &Image,
    cfg: &SequenceConfig,
) -> Result<(Image, SequenceTrace)> {
    let mut inner = PdhgInner::new(cfg.inner_config(), cfg.warm_start);
    run_sequence(model, Some(approx), y, cfg, &mut inner)
}

/// Fixed sequence with constant damping `x_{k+1} = delta S(x_k) + (1 - delta) x_k`.
pub fn run_damped(
    model: &dyn ForwardOperator,
    approx: &dyn LinearOperator,
    y: &Image,
    cfg: &SequenceConfig,
) -> Result<(Image, SequenceTrace)> {
    if !matches!(cfg.damping, Damping::Constant(_)) {
        return Err(Error::InvalidParameter(
            "damped sequence needs constant damping".into(),
        ));
    }
    run_fixed(model, approx, y, cfg)
}

/// Adaptive (Taylor) sequence with the primal-dual inner solver.
pub fn run_adaptive(
    model: &dyn ForwardOperator,
    y: &Image,
    cfg: &SequenceConfig,
) -> Result<(Image, SequenceTrace)> {
    let mut inner = PdhgInner::new(cfg.inner_config(), cfg.warm_start);
    let cfg = SequenceConfig {
        mode: Mode::Adaptive,
        ..cfg.clone()
    };
    run_sequence(model, None, y, &cfg, &mut inner)
}

/// General driver. `approx` is required in fixed mode and ignored in
/// adaptive mode.
pub fn run_sequence(
    model: &dyn ForwardOperator,
    approx: Option<&dyn LinearOperator>,
    y: &Image,
    cfg: &SequenceConfig,
    inner: &mut dyn InnerSolver,
) -> Result<(Image, SequenceTrace)> {
    cfg.validate()?;
    let start = Instant::now();
    let elapsed = || {
        if cfg.record_timing {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        }
    };
    let fixed = match (cfg.mode, approx) {
        (Mode::Fixed, Some(a)) => Some(a),
        (Mode::Fixed, None) => {
            return Err(Error::InvalidParameter(
                "fixed mode needs a linear approximation".into(),
            ))
        }
        (Mode::Adaptive, _) => None,
    };
    let objective = Objective {
        model,
        y,
        lambda: cfg.lambda,
        fidelity: cfg.fidelity,
        regularizer: inner.regularizer(),
    };

    let mut x = match &cfg.x0_policy {
        InitialGuess::Data => y.clone(),
        InitialGuess::Zero => Image::zeros(y.width(), y.height()),
        InitialGuess::Given(x0) => x0.clone(),
    };
    if let Some(a) = fixed {
        x.check_shape(a.input_shape())?;
        y.check_shape(a.output_shape())?;
    }
    let (mut value, fid) = objective.evaluate(&x)?;
    let mut trace = SequenceTrace {
        records: vec![TraceRecord {
            iter: 0,
            data_fidelity: fid,
            objective: value,
            delta: 0.0,
            inner_iters: 0,
            seconds: elapsed(),
        }],
        stop_reason: StopReason::MaxIterations,
        x0_policy: cfg.x0_policy.label().to_string(),
        iterates: Vec::new(),
    };
    if cfg.keep_iterates {
        trace.iterates.push(x.clone());
    }

    for k in 0..cfg.outer_max {
        let (solution, inner_iters) = match fixed {
            Some(a) => {
                let eps = approx_error(model, a, &x)?;
                inner.solve(a, &(y - &eps), &x, k == 0)?
            }
            None => {
                let taylor = model.linearize(&x)?;
                // For a Taylor expansion at x_k, eps(x_k) = A(x_k) - J_k x_k = offset.
                inner.solve(taylor.linear.as_ref(), &(y - &taylor.offset), &x, true)?
            }
        };

        let (delta, next, next_value, next_fid) = match cfg.damping {
            Damping::None => {
                let (v, f) = objective.evaluate(&solution)?;
                (1.0, solution, v, f)
            }
            Damping::Constant(d) => {
                let next = Image::lin_comb(d, &solution, 1.0 - d, &x);
                let (v, f) = objective.evaluate(&next)?;
                (d, next, v, f)
            }
            Damping::LineSearch(n) => {
                let mut fids = vec![fid_of(&trace); n];
                let (d, v) = line_search_by(n, |d| {
                    if d == 0.0 {
                        return Ok(value);
                    }
                    let cand = Image::lin_comb(d, &solution, 1.0 - d, &x);
                    let (v, f) = objective.evaluate(&cand)?;
                    fids[grid_index(d, n)] = f;
                    Ok(v)
                })?;
                let next = if d == 0.0 {
                    x.clone()
                } else {
                    Image::lin_comb(d, &solution, 1.0 - d, &x)
                };
                (d, next, v, fids[grid_index(d, n)])
            }
        };

        trace.records.push(TraceRecord {
            iter: k + 1,
            data_fidelity: next_fid,
            objective: next_value,
            delta,
            inner_iters,
            seconds: elapsed(),
        });
        if cfg.keep_iterates {
            trace.iterates.push(next.clone());
        }

        let decrease = value - next_value;
        let step = norm_l2(&(&next - &x));
        // x_0 is a starting point rather than a reconstruction, so the first
        // corrected solve is always taken.
        let stalled = k > 0 && decrease < cfg.outer_tol * value.abs();
        let step_converged = step <= cfg.step_tol * norm_l2(&x).max(1.0);
        if stalled {
            trace.stop_reason = StopReason::ObjectiveStalled;
            if next_value <= value {
                x = next;
            }
            break;
        }
        x = next;
        value = next_value;
        if step_converged {
            trace.stop_reason = StopReason::StepConverged;
            break;
        }
    }
    Ok((x, trace))
}

fn fid_of(trace: &SequenceTrace) -> f64 {
    trace.records.last().map_or(f64::NAN, |r| r.data_fidelity)
}

fn grid_index(delta: f64, n: usize) -> usize {
    (delta * (n - 1) as f64).round() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::inner as dot;
    use crate::linearize::{fixed_approx, DenseMatrix};
    use crate::models::{ForwardModel, ModelParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn phantom(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |i, j| {
            let r = (i as f64 - h as f64 / 2.0).hypot(j as f64 - w as f64 / 2.0);
            if r < w as f64 / 4.0 {
                0.8
            } else if j < w / 3 {
                0.5
            } else {
                0.2
            }
        })
    }

    #[test]
    fn objective_examples() {
        let ld = ForwardModel::linear_diffusion(ModelParams::default()).unwrap();
        let c = Image::filled(6, 6, 0.4);
        let y = ld.evaluate(&c).unwrap();
        assert!(objective(&ld, &y, 0.3, Fidelity::L2, &c).unwrap().abs() < 1e-20);

        let y0 = Image::zeros(6, 6);
        let f = objective(&ld, &y0, 5.0, Fidelity::L1, &c).unwrap();
        assert!((f - 0.4 * 36.0).abs() < 1e-12);

        let u = Image::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = ld.evaluate(&u).unwrap();
        assert!((objective(&ld, &y, 1.0, Fidelity::L2, &u).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn line_search_examples() {
        let (d, _) = line_search_by(11, |d| Ok(1.0 - d)).unwrap();
        assert_eq!(d, 1.0);
        let (d, v) = line_search_by(11, |d| Ok((d - 0.5).powi(2))).unwrap();
        assert_eq!(d, 0.5);
        assert!(v < 1e-30);
        assert!(line_search_by(1, |_| Ok(0.0)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let c: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = |d: f64| c[0] + c[1] * d + c[2] * d * d + c[3] * (7.0 * d).sin();
            let (_, v) = line_search_by(7, |d| Ok(f(d))).unwrap();
            assert!(v <= f(0.0));
        }
    }

    #[test]
    fn exact_approximation_converges_immediately() {
        let p = ModelParams::default();
        let ld = ForwardModel::linear_diffusion(p).unwrap();
        let approx = fixed_approx(p, 16, 16).unwrap();
        let y = ld.evaluate(&phantom(16, 16)).unwrap();
        let cfg = SequenceConfig {
            lambda: 1e-3,
            record_timing: false,
            keep_iterates: true,
            inner: PdhgConfig {
                tol: 1e-8,
                max_iters: 50000,
                ..Default::default()
            },
            ..Default::default()
        };
        let (_, trace) = run_fixed(&ld, &approx, &y, &cfg).unwrap();
        assert_eq!(trace.stop_reason, StopReason::ObjectiveStalled);
        assert!(trace.len() <= 3, "{}", trace.len());
        let x1 = &trace.iterates[1];
        let x2 = &trace.iterates[2];
        assert!(norm_l2(&(x2 - x1)) / norm_l2(x1) < 1e-4);
    }

    #[test]
    fn unit_damping_reproduces_fixed() {
        let p = ModelParams::default();
        let nld = ForwardModel::nonlinear_diffusion(p).unwrap();
        let approx = fixed_approx(p, 16, 16).unwrap();
        let y = nld.evaluate(&phantom(16, 16)).unwrap();
        let cfg = SequenceConfig {
            lambda: 1e-3,
            outer_max: 4,
            record_timing: false,
            ..Default::default()
        };
        let (a, ta) = run_fixed(&nld, &approx, &y, &cfg).unwrap();
        let damped = SequenceConfig {
            damping: Damping::Constant(1.0),
            ..cfg.clone()
        };
        let (b, tb) = run_damped(&nld, &approx, &y, &damped).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta.objectives(), tb.objectives());

        let tiny = SequenceConfig {
            damping: Damping::Constant(1e-9),
            outer_max: 1,
            outer_tol: f64::NEG_INFINITY,
            ..cfg
        };
        let (x1, _) = run_damped(&nld, &approx, &y, &tiny).unwrap();
        let d = (&x1 - &y)
            .values()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(d < 1e-6);
    }

    #[test]
    fn damped_sequence_keeps_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a_tilde = DMatrix::from_fn(
            3,
            3,
            |i, j| if i == j { 1.5 } else { 0.0 } + rng.random_range(-0.2..0.2),
        );
        let e = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-0.2..0.2));
        let a = &a_tilde * (DMatrix::identity(3, 3) - &e);
        let model = DenseMatrix::square(a).unwrap();
        let approx = DenseMatrix::square(a_tilde).unwrap();
        let y = Image::new(3, 1, vec![0.4, -0.1, 0.9]).unwrap();
        let lambda = 0.05;
        let cfg = SequenceConfig {
            lambda,
            outer_max: 300,
            outer_tol: f64::NEG_INFINITY,
            step_tol: 1e-14,
            x0_policy: InitialGuess::Zero,
            record_timing: false,
            ..Default::default()
        };
        let (x_star, trace) = run_sequence(
            &model,
            Some(&approx),
            &y,
            &cfg,
            &mut TikhonovDense { lambda },
        )
        .unwrap();
        assert_eq!(trace.stop_reason, StopReason::StepConverged);
        for delta in [0.3, 0.5, 1.0] {
            let again = SequenceConfig {
                damping: Damping::Constant(delta),
                outer_max: 1,
                x0_policy: InitialGuess::Given(x_star.clone()),
                ..cfg.clone()
            };
            let (x1, _) = run_sequence(
                &model,
                Some(&approx),
                &y,
                &again,
                &mut TikhonovDense { lambda },
            )
            .unwrap();
            let rel = norm_l2(&(&x1 - &x_star)) / norm_l2(&x_star);
            assert!(rel < 1e-12, "delta {delta}: {rel}");
        }
    }

    #[test]
    fn adaptive_equals_fixed_for_linear_model() {
        let p = ModelParams::default();
        let ld = ForwardModel::linear_diffusion(p).unwrap();
        let approx = fixed_approx(p, 16, 16).unwrap();
        let y = ld.evaluate(&phantom(16, 16)).unwrap();
        let cfg = SequenceConfig {
            lambda: 1e-3,
            outer_max: 3,
            outer_tol: f64::NEG_INFINITY,
            record_timing: false,
            keep_iterates: true,
            ..Default::default()
        };
        let (_, tf) = run_fixed(&ld, &approx, &y, &cfg).unwrap();
        let (_, ta) = run_adaptive(&ld, &y, &cfg).unwrap();
        for (a, b) in tf.iterates.iter().zip(&ta.iterates) {
            assert!(norm_l2(&(a - b)) <= 1e-4 * norm_l2(a).max(1.0));
        }
    }

    #[test]
    fn fixed_sequence_dense_invertible_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a_tilde = DMatrix::from_fn(
            2,
            2,
            |i, j| if i == j { 2.0 } else { 0.0 } + rng.random_range(-0.3..0.3),
        );
        let e = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-0.25..0.25));
        let a = &a_tilde * (DMatrix::identity(2, 2) - &e);
        let y = Image::new(2, 1, vec![0.7, -0.2]).unwrap();
        let model = DenseMatrix::square(a.clone()).unwrap();
        let approx = DenseMatrix::square(a_tilde).unwrap();
        let cfg = SequenceConfig {
            lambda: 1e-12,
            outer_max: 200,
            outer_tol: f64::NEG_INFINITY,
            step_tol: 1e-15,
            x0_policy: InitialGuess::Zero,
            record_timing: false,
            ..Default::default()
        };
        let mut solver = TikhonovDense { lambda: 1e-12 };
        let (x, _) = run_sequence(&model, Some(&approx), &y, &cfg, &mut solver).unwrap();
        let exact = a
            .lu()
            .solve(&DVector::from_column_slice(y.values()))
            .unwrap();
        for (u, v) in x.values().iter().zip(exact.iter()) {
            assert!((u - v).abs() < 1e-8);
        }
    }

    #[test]
    fn descent_direction_and_gradient_matching() {
        let p = ModelParams::default();
        let nld = ForwardModel::nonlinear_diffusion(p).unwrap();
        let truth = phantom(8, 8);
        let y = nld.evaluate(&truth).unwrap();
        let lambda = 0.1;
        let cfg = SequenceConfig {
            mode: Mode::Adaptive,
            damping: Damping::LineSearch(11),
            lambda,
            outer_max: 5,
            outer_tol: f64::NEG_INFINITY,
            record_timing: false,
            keep_iterates: true,
            x0_policy: InitialGuess::Zero,
            ..Default::default()
        };
        let mut solver = TikhonovDense { lambda };
        let (_, trace) = run_sequence(&nld, None, &y, &cfg, &mut solver).unwrap();
        let obj = Objective {
            model: &nld,
            y: &y,
            lambda,
            fidelity: Fidelity::L2,
            regularizer: Regularizer::Tikhonov,
        };
        for pair in trace.iterates.windows(2) {
            let g = obj.gradient(&pair[0]).unwrap();
            let step = &pair[1] - &pair[0];
            assert!(dot(&g, &step) <= 1e-6 * norm_l2(&g) * norm_l2(&step));
        }
        for w in trace.objectives().windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }

        // The analytic gradient against central differences of the objective.
        let x = &trace.iterates[1];
        let g = obj.gradient(x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = Image::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
        let h = 1e-5;
        let fd = (obj.value(&Image::lin_comb(1.0, x, h, &v)).unwrap()
            - obj.value(&Image::lin_comb(1.0, x, -h, &v)).unwrap())
            / (2.0 * h);
        let an = dot(&g, &v);
        assert!((fd - an).abs() <= 1e-4 * an.abs(), "{fd} vs {an}");
    }

    #[test]
    fn config_validation() {
        let bad = [
            SequenceConfig {
                outer_max: 0,
                ..Default::default()
            },
            SequenceConfig {
                damping: Damping::Constant(0.0),
                ..Default::default()
            },
            SequenceConfig {
                damping: Damping::Constant(1.5),
                ..Default::default()
            },
            SequenceConfig {
                damping: Damping::LineSearch(1),
                ..Default::default()
            },
            SequenceConfig {
                lambda: 0.0,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        let ld = ForwardModel::linear_diffusion(ModelParams::default()).unwrap();
        let y = Image::zeros(4, 4);
        let r = run_sequence(
            &ld,
            None,
            &y,
            &SequenceConfig::default(),
            &mut TikhonovDense { lambda: 1.0 },
        );
        assert!(r.is_err());
    }
    #[test]
    fn first_corrected_solve_is_taken_even_if_worse() {
        // |1 - A~^-1 A| = 1.5: from x_0 = 0.9 the first solve gives 1.15,
        // which is worse than x_0, and the second gives 0.775, worse again.
        let model = DenseMatrix::square(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let approx = DenseMatrix::square(DMatrix::from_element(1, 1, 0.4)).unwrap();
        let y = Image::new(1, 1, vec![1.0]).unwrap();
        let lambda = 1e-12;
        let cfg = SequenceConfig {
            lambda,
            x0_policy: InitialGuess::Given(Image::new(1, 1, vec![0.9]).unwrap()),
            record_timing: false,
            ..Default::default()
        };
        let (x, trace) = run_sequence(
            &model,
            Some(&approx),
            &y,
            &cfg,
            &mut TikhonovDense { lambda },
        )
        .unwrap();
        assert_eq!(trace.stop_reason, StopReason::ObjectiveStalled);
        let obj = trace.objectives();
        assert!(obj[1] > obj[0]);
        assert!((x.values()[0] - 1.15).abs() < 1e-9, "{}", x.values()[0]);
    }
}
