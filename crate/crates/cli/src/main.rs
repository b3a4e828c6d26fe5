use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use seqcorr::harness::experiment::{
    fit_aem_stats, load_ground_truth, run_experiment, Correction, ExperimentSpec, LambdaSpec,
    DEFAULT_SWEEP_LEN,
};
use seqcorr::harness::noise::NoiseKind;
use seqcorr::harness::pgm::save_pgm;
use seqcorr::harness::phantoms::phantom;
use seqcorr::linearize::fixed_approx;
use seqcorr::metrics::{error_pair_samples, excess_kurtosis, probe_pairs};
use seqcorr::models::{ForwardModel, ModelKind, ModelParams};
use seqcorr::pdhg::Fidelity;

#[derive(Parser)]
#[command(
    name = "seqcorr",
    version,
    about = "Image restoration by sequential model correction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct every PGM in a directory and write reconstructions, curves and metrics.
    Reconstruct(ReconstructArgs),
    /// Write synthetic piecewise-constant phantoms as PGM files.
    MakePhantoms(PhantomArgs),
    /// Estimate approximation-error statistics from training images.
    AemFit(AemFitArgs),
    /// Write approximation-error samples at neighbouring pixel pairs as CSV.
    ErrorScatter(ScatterArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Nld,
    Cf,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Nld => ModelKind::NonlinearDiffusion,
            ModelArg::Cf => ModelKind::CurvatureFlow,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CorrectionArg {
    None,
    Fixed,
    Adaptive,
    Aem,
}

impl From<CorrectionArg> for Correction {
    fn from(c: CorrectionArg) -> Self {
        match c {
            CorrectionArg::None => Correction::None,
            CorrectionArg::Fixed => Correction::Fixed,
            CorrectionArg::Adaptive => Correction::Adaptive,
            CorrectionArg::Aem => Correction::Aem,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Gaussian,
    Impulse,
}

impl From<NoiseArg> for NoiseKind {
    fn from(n: NoiseArg) -> Self {
        match n {
            NoiseArg::Gaussian => NoiseKind::Gaussian,
            NoiseArg::Impulse => NoiseKind::Impulse,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FidelityArg {
    L2,
    L1,
}

impl From<FidelityArg> for Fidelity {
    fn from(f: FidelityArg) -> Self {
        match f {
            FidelityArg::L2 => Fidelity::L2,
            FidelityArg::L1 => Fidelity::L1,
        }
    }
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long, value_enum)]
    model: ModelArg,
    #[arg(long, value_enum)]
    correction: CorrectionArg,
    #[arg(long, value_enum)]
    noise: NoiseArg,
    /// Gaussian: std as a fraction of the data range. Impulse: fraction of pixels.
    #[arg(long)]
    noise_level: f64,
    #[arg(long, value_enum)]
    fidelity: FidelityArg,
    #[arg(long, conflicts_with = "lambda_sweep")]
    lambda: Option<f64>,
    /// Number of log-spaced lambda values; the best SSIM on the first image wins.
    #[arg(long)]
    lambda_sweep: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory of ground-truth PGM images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 30)]
    outer_max: usize,
    #[arg(long, default_value_t = 2000)]
    inner_max: usize,
    /// Stats file from `aem-fit`.
    #[arg(long)]
    aem_stats: Option<PathBuf>,
    /// Training images for AEM when no stats file is given.
    #[arg(long, conflicts_with = "aem_stats")]
    aem_train: Option<PathBuf>,
    /// Constant step in (0, 1] instead of the mode's default.
    #[arg(long)]
    damping: Option<f64>,
    #[arg(long)]
    no_warm_start: bool,
    /// Record per-iteration wall-clock seconds (breaks byte-identical reruns).
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Index of the first phantom; use disjoint ranges for training and test sets.
    #[arg(long, default_value_t = 0)]
    start: u64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct AemFitArgs {
    #[arg(long, value_enum)]
    model: ModelArg,
    /// Directory of training PGM images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Noise std as a fraction of the mean range of the model outputs.
    #[arg(long)]
    noise_level: f64,
    /// Skip this many images (in name order) so training stays disjoint from test data.
    #[arg(long, default_value_t = 0)]
    skip: usize,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct ScatterArgs {
    #[arg(long, value_enum)]
    model: ModelArg,
    /// Directory of sample PGM images. Without it, phantoms are generated.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    phantoms: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 8)]
    pairs: usize,
    #[arg(long)]
    output: PathBuf,
}

fn list_pgm(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let is_pgm = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
        if path.is_file() && is_pgm {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        bail!("no .pgm files in {}", dir.display());
    }
    Ok(paths)
}

fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let lambda = match (a.lambda, a.lambda_sweep) {
        (Some(l), _) => LambdaSpec::Fixed(l),
        (None, Some(n)) => LambdaSpec::Auto(n),
        (None, None) => LambdaSpec::Auto(DEFAULT_SWEEP_LEN),
    };
    let images = list_pgm(&a.input)?;
    let aem_training = match &a.aem_train {
        Some(dir) => list_pgm(dir)?,
        None => Vec::new(),
    };
    if let Some(overlap) = aem_training.iter().find(|p| images.contains(p)) {
        bail!("training image {} is also a test image", overlap.display());
    }
    let spec = ExperimentSpec {
        model: a.model.into(),
        correction: a.correction.into(),
        noise: a.noise.into(),
        noise_level: a.noise_level,
        fidelity: a.fidelity.into(),
        lambda,
        seed: a.seed,
        images,
        output_dir: a.output,
        size: a.size,
        outer_max: a.outer_max,
        inner_max: a.inner_max,
        damping: a.damping,
        warm_start: !a.no_warm_start,
        aem_stats: a.aem_stats,
        aem_training,
        record_timing: a.timing,
    };
    let records = run_experiment(&spec)?;
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&seqcorr::harness::experiment::RunRecord) -> f64| {
        records.iter().map(f).sum::<f64>() / n
    };
    println!("lambda {:e}", records[0].lambda);
    for r in &records {
        println!(
            "{:3} {:<24} psnr {:7.3} dB  ssim {:.4}  outer {}",
            r.index,
            r.image
                .file_name()
                .map(|s| s.to_string_lossy())
                .unwrap_or_default(),
            r.metrics.psnr_db,
            r.metrics.ssim,
            r.outer_iterations
        );
    }
    println!(
        "mean psnr {:.3} dB  ssim {:.4}  data fidelity {:e}",
        mean(&|r| r.metrics.psnr_db),
        mean(&|r| r.metrics.ssim),
        mean(&|r| r.metrics.data_fidelity)
    );
    println!("outputs in {}", spec.output_dir.display());
    Ok(())
}

fn make_phantoms(a: PhantomArgs) -> Result<()> {
    fs::create_dir_all(&a.output)?;
    for k in 0..a.count as u64 {
        let index = a.start + k;
        let path = a.output.join(format!("phantom_{index:05}.pgm"));
        save_pgm(&phantom(a.size, a.seed, index), &path)?;
    }
    println!("wrote {} phantoms to {}", a.count, a.output.display());
    Ok(())
}

fn aem_fit(a: AemFitArgs) -> Result<()> {
    let paths: Vec<PathBuf> = list_pgm(&a.input)?
        .into_iter()
        .skip(a.skip)
        .take(a.limit.unwrap_or(usize::MAX))
        .collect();
    let training = paths
        .iter()
        .map(|p| load_ground_truth(p, a.size).with_context(|| p.display().to_string()))
        .collect::<Result<Vec<_>>>()?;
    let model = ForwardModel::new(a.model.into(), ModelParams::default())?;
    let approx = fixed_approx(ModelParams::default(), a.size, a.size)?;
    let stats = fit_aem_stats(&model, &approx, &training, a.noise_level)?;
    stats.save(&a.output)?;
    println!(
        "fitted {} samples, sigma {:e}, wrote {}",
        stats.n_samples,
        stats.sigma_noise,
        a.output.display()
    );
    Ok(())
}

fn error_scatter(a: ScatterArgs) -> Result<()> {
    let samples = match &a.input {
        Some(dir) => list_pgm(dir)?
            .iter()
            .map(|p| load_ground_truth(p, a.size).with_context(|| p.display().to_string()))
            .collect::<Result<Vec<_>>>()?,
        None => (0..a.phantoms as u64)
            .map(|i| phantom(a.size, a.seed, i))
            .collect(),
    };
    let model = ForwardModel::new(a.model.into(), ModelParams::default())?;
    let approx = fixed_approx(ModelParams::default(), a.size, a.size)?;
    let pairs = probe_pairs(a.size, a.size, a.pairs);
    let rows = error_pair_samples(&model, &approx, &samples, &pairs)?;

    let mut out = String::from("sample,pixel_i,pixel_j,eps_i,eps_j\n");
    for r in &rows {
        out.push_str(&format!(
            "{},{},{},{:e},{:e}\n",
            r.sample, r.pixel_i, r.pixel_j, r.eps_i, r.eps_j
        ));
    }
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&a.output, out)?;

    let mut stdout = std::io::stdout().lock();
    for &(i, j) in &pairs {
        let eps: Vec<f64> = rows
            .iter()
            .filter(|r| r.pixel_i == i)
            .map(|r| r.eps_i)
            .collect();
        writeln!(
            stdout,
            "pair ({i}, {j}): excess kurtosis of eps_i {:.3}",
            excess_kurtosis(&eps)
        )?;
    }
    writeln!(
        stdout,
        "wrote {} rows to {}",
        rows.len(),
        a.output.display()
    )?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Reconstruct(a) => reconstruct(a),
        Command::MakePhantoms(a) => make_phantoms(a),
        Command::AemFit(a) => aem_fit(a),
        Command::ErrorScatter(a) => error_scatter(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
