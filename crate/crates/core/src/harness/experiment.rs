//! Method comparison runs: noisy data from ground-truth images, lambda
//! selection by SSIM on the first image, batch reconstruction, and export of
//! reconstructions, convergence curves, metrics and run metadata.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aem::{aem_reconstruct, estimate_stats, AemStats};
use crate::error::{Error, Result};
use crate::grid::Image;
use crate::harness::noise::{gaussian_sigma, split_seed, NoiseKind, STREAM_NOISE, STREAM_POWER};
use crate::harness::pgm::{load_pgm, save_pgm};
use crate::harness::phantoms::fit_to_size;
use crate::linearize::{fixed_approx, FixedModel, LinearOperator};
use crate::metrics::{MetricReport, PSNR_CAP};
use crate::models::{ForwardModel, ModelKind, ModelParams};
use crate::pdhg::{pdhg_solve, Fidelity, PdhgConfig, PdhgState};
use crate::sequence::{
    run_sequence, Damping, InitialGuess, Mode, PdhgInner, SequenceConfig, SequenceTrace,
    StopReason, TraceRecord,
};

pub const DEFAULT_SWEEP_LEN: usize = 8;
pub const DEFAULT_LINE_SEARCH: usize = 11;
pub const CONVERGENCE_HEADER: &str = "iter,data_fidelity,objective,delta,inner_iters,seconds";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correction {
    None,
    Fixed,
    Adaptive,
    Aem,
}

impl Correction {
    pub fn short_name(self) -> &'static str {
        match self {
            Correction::None => "none",
            Correction::Fixed => "fixed",
            Correction::Adaptive => "adaptive",
            Correction::Aem => "aem",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaSpec {
    Fixed(f64),
    Sweep(Vec<f64>),
    /// `n` log-spaced values in the method's default range, see [`auto_sweep`].
    Auto(usize),
}

/// `n` log-spaced values: `[1e-3, 1e-1]` for L2, `[1e-2, 1]` for L1.
pub fn default_sweep(fidelity: Fidelity, n: usize) -> Vec<f64> {
    let (lo, hi): (f64, f64) = match fidelity {
        Fidelity::L2 => (1e-3, 1e-1),
        Fidelity::L1 => (1e-2, 1.0),
    };
    if n <= 1 {
        return vec![(lo * hi).sqrt()];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect()
}

/// [`default_sweep`] for the fidelity; for the error-statistics method the
/// L2 range is divided by `sigma^2` because whitening scales the data term by
/// roughly `1 / sigma^2`.
pub fn auto_sweep(
    correction: Correction,
    fidelity: Fidelity,
    n: usize,
    aem_sigma: Option<f64>,
) -> Vec<f64> {
    let sweep = default_sweep(fidelity, n);
    match (correction, aem_sigma) {
        (Correction::Aem, Some(s)) => sweep.into_iter().map(|l| l / (s * s)).collect(),
        _ => sweep,
    }
}

/// Per-method solver settings shared by every image of a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSettings {
    pub correction: Correction,
    pub fidelity: Fidelity,
    pub lambda: f64,
    pub outer_max: usize,
    pub outer_tol: f64,
    pub inner_max: usize,
    pub inner_tol: f64,
    /// Constant damping; `None` selects the method default (undamped fixed
    /// sequence, line search for the adaptive one).
    pub damping: Option<f64>,
    pub warm_start: bool,
    /// Seed of the power-method start vector.
    pub power_seed: u64,
    pub record_timing: bool,
}

impl MethodSettings {
    pub fn new(correction: Correction, fidelity: Fidelity, lambda: f64) -> Self {
        MethodSettings {
            correction,
            fidelity,
            lambda,
            outer_max: 30,
            outer_tol: 1e-5,
            inner_max: 2000,
            inner_tol: 1e-6,
            damping: None,
            warm_start: true,
            power_seed: 0,
            record_timing: false,
        }
    }

    pub fn inner_config(&self) -> PdhgConfig {
        PdhgConfig {
            fidelity: self.fidelity,
            lambda: self.lambda,
            max_iters: self.inner_max,
            tol: self.inner_tol,
            seed: self.power_seed,
            ..PdhgConfig::default()
        }
    }

    pub fn sequence_config(&self) -> SequenceConfig {
        let (mode, default_damping) = match self.correction {
            Correction::Adaptive => (Mode::Adaptive, Damping::LineSearch(DEFAULT_LINE_SEARCH)),
            _ => (Mode::Fixed, Damping::None),
        };
        SequenceConfig {
            mode,
            damping: self.damping.map_or(default_damping, Damping::Constant),
            fidelity: self.fidelity,
            lambda: self.lambda,
            outer_max: self.outer_max,
            outer_tol: self.outer_tol,
            step_tol: 0.0,
            inner: self.inner_config(),
            x0_policy: InitialGuess::Data,
            warm_start: self.warm_start,
            record_timing: self.record_timing,
            keep_iterates: false,
        }
    }
}

/// One ground-truth image and its noisy measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct Problem {
    pub truth: Image,
    pub y: Image,
    /// Standard deviation of the added Gaussian noise (zero for impulse noise).
    pub noise_sigma: f64,
}

/// Simulates `y_i = noise(A(x_i))` with the noise seed split per image.
pub fn make_problems(
    model: &ForwardModel,
    truths: &[Image],
    noise: NoiseKind,
    level: f64,
    seed: u64,
) -> Result<Vec<Problem>> {
    truths
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let clean = model.evaluate(x)?;
            let y = noise.apply(&clean, level, split_seed(seed, STREAM_NOISE, i as u64))?;
            let noise_sigma = match noise {
                NoiseKind::Gaussian => gaussian_sigma(&clean, level),
                NoiseKind::Impulse => 0.0,
            };
            Ok(Problem {
                truth: x.clone(),
                y,
                noise_sigma,
            })
        })
        .collect()
}

/// Reconstructs one measurement with the configured correction method.
pub fn reconstruct(
    model: &ForwardModel,
    approx: &FixedModel,
    y: &Image,
    settings: &MethodSettings,
    aem: Option<&AemStats>,
) -> Result<(Image, SequenceTrace)> {
    let start = Instant::now();
    let single = |x: Image, inner_iters: usize| -> Result<(Image, SequenceTrace)> {
        let initial = single_record(model, y, settings, y, 0, 0.0, 0.0)?;
        let seconds = if settings.record_timing {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let last = single_record(model, y, settings, &x, 1, 1.0, seconds)?;
        let trace = SequenceTrace {
            records: vec![
                initial,
                TraceRecord {
                    inner_iters,
                    ..last
                },
            ],
            stop_reason: StopReason::MaxIterations,
            x0_policy: InitialGuess::Data.label().to_string(),
            iterates: Vec::new(),
        };
        Ok((x, trace))
    };
    match settings.correction {
        Correction::None => {
            let cfg = settings.inner_config();
            let zero = Image::zeros(y.width(), y.height());
            let out = pdhg_solve(
                approx,
                y,
                &zero,
                &cfg,
                Some(PdhgState::cold(y, approx.output_shape())),
            )?;
            single(out.solution, out.iterations)
        }
        Correction::Aem => {
            let stats = aem.ok_or_else(|| {
                Error::InvalidParameter("approximation error method needs error statistics".into())
            })?;
            let x = aem_reconstruct(approx, y, stats, settings.lambda, &settings.inner_config())?;
            single(x, 0)
        }
        Correction::Fixed | Correction::Adaptive => {
            let cfg = settings.sequence_config();
            let mut inner = PdhgInner::new(cfg.inner_config(), cfg.warm_start);
            let approx: Option<&dyn LinearOperator> = match settings.correction {
                Correction::Fixed => Some(approx),
                _ => None,
            };
            run_sequence(model, approx, y, &cfg, &mut inner)
        }
    }
}

fn single_record(
    model: &ForwardModel,
    y: &Image,
    settings: &MethodSettings,
    x: &Image,
    iter: usize,
    delta: f64,
    seconds: f64,
) -> Result<TraceRecord> {
    let data_fidelity = settings.fidelity.value(&(&model.evaluate(x)? - y));
    Ok(TraceRecord {
        iter,
        data_fidelity,
        objective: data_fidelity + settings.lambda * crate::grid::total_variation(x),
        delta,
        inner_iters: 0,
        seconds,
    })
}

/// `F(A(x) - y)` under the true model.
pub fn true_data_fidelity(
    model: &ForwardModel,
    fidelity: Fidelity,
    x: &Image,
    y: &Image,
) -> Result<f64> {
    Ok(fidelity.value(&(&model.evaluate(x)? - y)))
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub reconstruction: Image,
    pub trace: SequenceTrace,
    pub report: MetricReport,
}

/// Reconstructs and scores every problem; results are in input order.
pub fn run_batch(
    model: &ForwardModel,
    approx: &FixedModel,
    problems: &[Problem],
    settings: &MethodSettings,
    aem: Option<&AemStats>,
) -> Result<Vec<Outcome>> {
    problems
        .par_iter()
        .map(|p| {
            let (x, trace) = reconstruct(model, approx, &p.y, settings, aem)?;
            let fid = true_data_fidelity(model, settings.fidelity, &x, &p.y)?;
            let report =
                MetricReport::compute(settings.correction.short_name(), &x, &p.truth, fid)?;
            Ok(Outcome {
                reconstruction: x,
                trace,
                report,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Reconstructs `problem` for each candidate and returns the highest-SSIM
/// lambda (first one on ties) with the whole sweep.
pub fn select_lambda(
    model: &ForwardModel,
    approx: &FixedModel,
    problem: &Problem,
    settings: &MethodSettings,
    candidates: &[f64],
    aem: Option<&AemStats>,
) -> Result<(f64, Vec<SweepPoint>)> {
    if candidates.is_empty() {
        return Err(Error::InvalidParameter("empty lambda sweep".into()));
    }
    let sweep: Vec<SweepPoint> = candidates
        .par_iter()
        .map(|&lambda| {
            let s = MethodSettings {
                lambda,
                ..settings.clone()
            };
            let (x, _) = reconstruct(model, approx, &problem.y, &s, aem)?;
            let r = MetricReport::compute("", &x, &problem.truth, 0.0)?;
            Ok(SweepPoint {
                lambda,
                psnr_db: r.psnr_db,
                ssim: r.ssim,
            })
        })
        .collect::<Result<_>>()?;
    let best = sweep
        .iter()
        .fold(None::<&SweepPoint>, |best, p| match best {
            Some(b) if b.ssim >= p.ssim => Some(b),
            _ => Some(p),
        })
        .expect("non-empty sweep");
    Ok((best.lambda, sweep))
}

/// Full description of a file-based experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub model: ModelKind,
    pub correction: Correction,
    pub noise: NoiseKind,
    pub noise_level: f64,
    pub fidelity: Fidelity,
    pub lambda: LambdaSpec,
    pub seed: u64,
    pub images: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub size: usize,
    pub outer_max: usize,
    pub inner_max: usize,
    pub damping: Option<f64>,
    pub warm_start: bool,
    pub aem_stats: Option<PathBuf>,
    /// Images used to estimate error statistics when no stats file is given.
    pub aem_training: Vec<PathBuf>,
    /// Record wall-clock times. Off by default so outputs are byte-reproducible.
    pub record_timing: bool,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.model.is_linear() {
            return bad("the true model must be nonlinear (nld or cf)".into());
        }
        if !(self.noise_level > 0.0 && self.noise_level < 1.0) {
            return bad(format!(
                "noise level must lie in (0, 1), got {}",
                self.noise_level
            ));
        }
        if self.correction == Correction::Aem && self.fidelity != Fidelity::L2 {
            return Err(Error::Unsupported(
                "the approximation error method requires the l2 fidelity".into(),
            ));
        }
        match &self.lambda {
            LambdaSpec::Fixed(l) if !(*l > 0.0 && l.is_finite()) => {
                return bad(format!("lambda must be positive, got {l}"))
            }
            LambdaSpec::Sweep(v)
                if v.is_empty() || v.iter().any(|l| !(*l > 0.0 && l.is_finite())) =>
            {
                return bad("lambda sweep must be a non-empty list of positive values".into())
            }
            LambdaSpec::Auto(0) => return bad("lambda sweep needs at least one value".into()),
            _ => {}
        }
        if self.images.is_empty() {
            return bad("no input images".into());
        }
        if self.size < crate::metrics::SSIM_WINDOW {
            return bad(format!(
                "grid size must be at least {}",
                crate::metrics::SSIM_WINDOW
            ));
        }
        if self.outer_max == 0 || self.inner_max == 0 {
            return bad("iteration limits must be positive".into());
        }
        if let Some(d) = self.damping {
            if !(d > 0.0 && d <= 1.0) {
                return bad(format!("damping must lie in (0, 1], got {d}"));
            }
        }
        if self.correction == Correction::Aem
            && self.aem_stats.is_none()
            && self.aem_training.len() < 2
        {
            return bad("aem needs a statistics file or at least two training images".into());
        }
        Ok(())
    }

    pub fn settings(&self, lambda: f64) -> MethodSettings {
        MethodSettings {
            outer_max: self.outer_max,
            inner_max: self.inner_max,
            damping: self.damping,
            warm_start: self.warm_start,
            power_seed: split_seed(self.seed, STREAM_POWER, 0),
            record_timing: self.record_timing,
            ..MethodSettings::new(self.correction, self.fidelity, lambda)
        }
    }
}

/// Settings and derived quantities that were not given explicitly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedDefaults {
    pub model_params: ModelParams,
    pub sequence: SequenceConfig,
    pub lambda_candidates: Vec<f64>,
    pub noise_seed: u64,
    pub noise_sigma: f64,
    pub noise_convention: String,
    pub psnr_peak: f64,
    pub psnr_cap: f64,
    pub downsampling: String,
    pub aem_sigma: Option<f64>,
    pub aem_samples: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub spec: ExperimentSpec,
    pub image: PathBuf,
    pub index: usize,
    pub lambda: f64,
    pub metrics: MetricReport,
    pub outer_iterations: usize,
    pub stop_reason: StopReason,
    /// Convergence CSV, relative to the output directory.
    pub convergence_file: String,
    pub reconstruction_file: String,
    /// Solve time for this image; zero unless timing was requested.
    pub wall_seconds: f64,
    pub version: String,
    pub resolved: ResolvedDefaults,
}

impl RunRecord {
    pub fn to_json(records: &[RunRecord]) -> Result<String> {
        Ok(serde_json::to_string_pretty(records)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Vec<RunRecord>> {
        Ok(serde_json::from_slice(bytes)?)
    }
}

fn fmt_real(v: f64) -> String {
    format!("{v:e}")
}

/// Convergence table, one row per outer iterate.
pub fn convergence_csv(trace: &SequenceTrace) -> Result<String> {
    if trace.is_empty() {
        return Err(Error::InvalidParameter("empty trace".into()));
    }
    let mut out = String::from(CONVERGENCE_HEADER);
    out.push('\n');
    for r in &trace.records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.iter,
            fmt_real(r.data_fidelity),
            fmt_real(r.objective),
            fmt_real(r.delta),
            r.inner_iters,
            fmt_real(r.seconds)
        )
        .expect("writing to a string");
    }
    Ok(out)
}

pub fn export_convergence(trace: &SequenceTrace, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, convergence_csv(trace)?)?;
    Ok(())
}

/// Loads an image and reduces it to `size x size`.
pub fn load_ground_truth(path: &Path, size: usize) -> Result<Image> {
    fit_to_size(&load_pgm(path)?, size)
}

fn model_for(kind: ModelKind) -> Result<ForwardModel> {
    ForwardModel::new(kind, ModelParams::default())
}

/// Error statistics from training images: each image is passed through the
/// true model, `sigma` is `level` times the mean dynamic range of those outputs.
pub fn fit_aem_stats(
    model: &ForwardModel,
    approx: &FixedModel,
    training: &[Image],
    level: f64,
) -> Result<AemStats> {
    if training.len() < 2 {
        return Err(Error::InvalidParameter(
            "need at least two training images".into(),
        ));
    }
    let mut range = 0.0;
    for x in training {
        let out = model.evaluate(x)?;
        range += out.max() - out.min();
    }
    let sigma = level * range / training.len() as f64;
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(
            "training images are constant".into(),
        ));
    }
    estimate_stats(model, approx, training, sigma)
}

/// Runs `spec` end to end and writes its outputs under `spec.output_dir`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<RunRecord>> {
    spec.validate()?;
    let model = model_for(spec.model)?;
    let approx = fixed_approx(ModelParams::default(), spec.size, spec.size)?;
    let truths = spec
        .images
        .iter()
        .map(|p| load_ground_truth(p, spec.size))
        .collect::<Result<Vec<_>>>()?;
    let problems = make_problems(&model, &truths, spec.noise, spec.noise_level, spec.seed)?;

    let aem = match spec.correction {
        Correction::Aem => Some(match &spec.aem_stats {
            Some(path) => AemStats::load(path)?,
            None => {
                let training = spec
                    .aem_training
                    .iter()
                    .map(|p| load_ground_truth(p, spec.size))
                    .collect::<Result<Vec<_>>>()?;
                fit_aem_stats(&model, &approx, &training, spec.noise_level)?
            }
        }),
        _ => None,
    };
    if let Some(stats) = &aem {
        stats.mu.check_shape((spec.size, spec.size))?;
    }

    let candidates = match &spec.lambda {
        LambdaSpec::Fixed(l) => vec![*l],
        LambdaSpec::Sweep(v) => v.clone(),
        LambdaSpec::Auto(n) => auto_sweep(
            spec.correction,
            spec.fidelity,
            *n,
            aem.as_ref().map(|s| s.sigma_noise),
        ),
    };
    let base = spec.settings(candidates[0]);
    let (lambda, sweep) = if candidates.len() == 1 {
        (candidates[0], Vec::new())
    } else {
        select_lambda(
            &model,
            &approx,
            &problems[0],
            &base,
            &candidates,
            aem.as_ref(),
        )?
    };
    let settings = spec.settings(lambda);
    let outcomes = run_batch(&model, &approx, &problems, &settings, aem.as_ref())?;

    fs::create_dir_all(&spec.output_dir)?;
    let mut metrics = String::new();
    writeln!(metrics, "# psnr_peak=1 psnr_cap={PSNR_CAP}").unwrap();
    writeln!(
        metrics,
        "# noise={} level={} {}",
        spec.noise.short_name(),
        spec.noise_level,
        noise_convention(spec.noise)
    )
    .unwrap();
    writeln!(
        metrics,
        "# model={} correction={} fidelity={} lambda={}",
        spec.model.short_name(),
        spec.correction.short_name(),
        spec.fidelity.short_name(),
        fmt_real(lambda)
    )
    .unwrap();
    metrics.push_str("index,image,psnr_db,ssim,data_fidelity,outer_iters,stop_reason\n");

    let mut records = Vec::with_capacity(outcomes.len());
    for (i, ((out, problem), path)) in outcomes.iter().zip(&problems).zip(&spec.images).enumerate()
    {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let recon_file = format!("{i:03}_{stem}_recon.pgm");
        let conv_file = format!("{i:03}_{stem}_convergence.csv");
        save_pgm(&out.reconstruction, spec.output_dir.join(&recon_file))?;
        export_convergence(&out.trace, spec.output_dir.join(&conv_file))?;
        let outer = out.trace.len() - 1;
        writeln!(
            metrics,
            "{i},{stem},{},{},{},{outer},{:?}",
            fmt_real(out.report.psnr_db),
            fmt_real(out.report.ssim),
            fmt_real(out.report.data_fidelity),
            out.trace.stop_reason
        )
        .unwrap();
        records.push(RunRecord {
            spec: spec.clone(),
            image: path.clone(),
            index: i,
            lambda,
            metrics: out.report.clone(),
            outer_iterations: outer,
            stop_reason: out.trace.stop_reason,
            convergence_file: conv_file,
            reconstruction_file: recon_file,
            wall_seconds: out.trace.records.last().map_or(0.0, |r| r.seconds),
            version: env!("CARGO_PKG_VERSION").to_string(),
            resolved: ResolvedDefaults {
                model_params: ModelParams::default(),
                sequence: settings.sequence_config(),
                lambda_candidates: candidates.clone(),
                noise_seed: split_seed(spec.seed, STREAM_NOISE, i as u64),
                noise_sigma: problem.noise_sigma,
                noise_convention: noise_convention(spec.noise).to_string(),
                psnr_peak: 1.0,
                psnr_cap: PSNR_CAP,
                downsampling: "box average by an integer factor".into(),
                aem_sigma: aem.as_ref().map(|s| s.sigma_noise),
                aem_samples: aem.as_ref().map(|s| s.n_samples),
            },
        });
    }
    fs::write(spec.output_dir.join("metrics.csv"), metrics)?;
    if !sweep.is_empty() {
        let mut s = String::from("lambda,psnr_db,ssim\n");
        for p in &sweep {
            writeln!(
                s,
                "{},{},{}",
                fmt_real(p.lambda),
                fmt_real(p.psnr_db),
                fmt_real(p.ssim)
            )
            .unwrap();
        }
        fs::write(spec.output_dir.join("sweep.csv"), s)?;
    }
    fs::write(
        spec.output_dir.join("run.json"),
        RunRecord::to_json(&records)?,
    )?;
    Ok(records)
}

fn noise_convention(noise: NoiseKind) -> &'static str {
    match noise {
        NoiseKind::Gaussian => "sigma=level*(max-min) of the noiseless model output",
        NoiseKind::Impulse => "floor(level*N) distinct pixels set to 0 or 1",
    }
}
