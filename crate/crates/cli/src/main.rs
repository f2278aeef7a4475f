//! `mpgd`: degrade, restore, evaluate and sweep from the command line.
//!
//! Exit codes: 0 on success (including `--help` and `--version`), 1 on usage
//! errors, 2 on runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use mpgd_core::diffusion::{
    make_schedule, Denoiser, GaussianAnalyticDenoiser, GmmAnalyticDenoiser, GmmComponent,
    DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_TRAIN_STEPS,
};
use mpgd_core::guidance::{
    restore_with_norm, train_pca_projector, GuidanceConfig, IdentityProjector, ManifoldProjector,
    PcaProjector, StepMode, NORM_ITERS, NORM_SEED,
};
use mpgd_core::harness::{
    degrade_dataset, list_pngs, monotonicity_report, read_manifest, replay_cell, run_sweep,
    time_call, RunOptions, SweepConfig, TaskSelect,
};
use mpgd_core::image::{center_crop_resize, load_image, save_image};
use mpgd_core::metrics::{format_db, MetricReport};
use mpgd_core::operators::{operator_norm, DEFAULT_NOISE_SIGMA};
use mpgd_core::selftest::{all_passed, run_selftest, Fault, SelftestOptions};
use mpgd_core::{Error, Image, LinearOperator, NoiseSpec, Result, Shape, Task};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser, Debug)]
#[command(
    name = "mpgd",
    version,
    about = "Guided diffusion restoration with multi-step manifold guidance"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Crop, resize and degrade a directory of PNGs into a pair directory.
    Degrade(DegradeArgs),
    /// Restore one measurement PNG.
    Restore(RestoreArgs),
    /// SSIM and PSNR between a reference and a test image.
    Metrics(MetricsArgs),
    /// Run the parameter sweep, or replay one cell of a manifest.
    Sweep(SweepArgs),
    /// Fit a PCA projector to a directory of PNGs.
    ProjectorTrain(ProjectorTrainArgs),
    /// Check <A x, y> = <x, Aᵀ y> on random pairs.
    AdjointCheck(AdjointCheckArgs),
    /// Run the embedded verification suite.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct DegradeArgs {
    /// Directory of source PNGs.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    task: Task,
    /// Measurement noise standard deviation.
    #[arg(long, default_value_t = DEFAULT_NOISE_SIGMA)]
    sigma: f64,
    /// Working resolution after center crop and resize.
    #[arg(long, default_value_t = 64)]
    side: usize,
    /// Base noise seed; file i of the sorted listing uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output pair directory.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum DenoiserKind {
    Gaussian,
    Gmm,
}

#[derive(Args, Debug)]
struct RestoreArgs {
    /// Measurement PNG (the `deg/` image of a pair directory).
    #[arg(long)]
    measurement: PathBuf,
    #[arg(long)]
    task: Task,
    /// Inner guidance steps per timestep; 0 disables guidance.
    #[arg(long, default_value_t = 15)]
    m: usize,
    /// Guidance scale g.
    #[arg(long, default_value_t = 7.5)]
    scale: f64,
    #[arg(long, default_value_t = 20)]
    ddim_steps: usize,
    /// budget (ρ = g / (m L̂)) or raw (ρ = g).
    #[arg(long, default_value = "budget")]
    step_mode: StepMode,
    /// `identity` or the path of a projector file.
    #[arg(long, default_value = "identity")]
    projector: String,
    #[arg(long, value_enum, default_value_t = DenoiserKind::Gaussian)]
    denoiser: DenoiserKind,
    /// Gaussian prior mean (gray level).
    #[arg(long, default_value_t = 0.5)]
    prior_mean: f64,
    /// Prior variance of the Gaussian or of each mixture component.
    #[arg(long, default_value_t = 0.05)]
    prior_var: f64,
    /// Mixture component levels for the gmm denoiser.
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.75")]
    gmm_levels: Vec<f64>,
    /// Seed of the initial latent.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Restored PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    test: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// TOML config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// sr4x, deblur or both [default: both]
    #[arg(long)]
    task: Option<TaskSelect>,
    /// Inner step counts [default: 1,3,7,15,20]
    #[arg(long, value_delimiter = ',')]
    inner_steps: Option<Vec<usize>>,
    /// DDIM step counts [default: 20,50,100]
    #[arg(long, value_delimiter = ',')]
    ddim_steps: Option<Vec<usize>>,
    /// Guidance scales [default: 4,7.5,17.5]
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    /// Directory of source PNGs or an existing pair directory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Working resolution [default: 64]
    #[arg(long)]
    side: Option<usize>,
    /// Untimed runs before each timed restore [default: 2]
    #[arg(long)]
    warmup_runs: Option<usize>,
    /// Measurement noise [default: 0.05]
    #[arg(long)]
    sigma: Option<f64>,
    /// budget or raw [default: budget]
    #[arg(long)]
    step_mode: Option<StepMode>,
    /// Master seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for results.csv, results.md, manifest.json and pairs.
    #[arg(long, default_value = "sweep-out")]
    out: PathBuf,
    /// Worker threads for image-level parallelism.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Manifest to replay a cell from.
    #[arg(long, requires = "cell", conflicts_with_all = ["config", "dataset"])]
    replay: Option<PathBuf>,
    /// Cell index to replay.
    #[arg(long, requires = "replay")]
    cell: Option<usize>,
}

#[derive(Args, Debug)]
struct ProjectorTrainArgs {
    /// Directory of training PNGs.
    #[arg(long)]
    input: PathBuf,
    /// Number of principal components.
    #[arg(long)]
    k: usize,
    /// Working resolution after center crop and resize.
    #[arg(long, default_value_t = 64)]
    side: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AdjointCheckArgs {
    /// sr4x or deblur; both when omitted.
    #[arg(long)]
    task: Option<Task>,
    /// Input side length.
    #[arg(long, default_value_t = 16)]
    side: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 100)]
    pairs: usize,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_fault: Option<Fault>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Degrade(a) => degrade(a),
        Command::Restore(a) => restore(a),
        Command::Metrics(a) => metrics(a),
        Command::Sweep(a) => sweep(a),
        Command::ProjectorTrain(a) => projector_train(a),
        Command::AdjointCheck(a) => adjoint_check(a),
        Command::Selftest(a) => selftest(a),
    }
}

fn with_pool<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn degrade(a: DegradeArgs) -> Result<ExitCode> {
    let noise = NoiseSpec::new(a.sigma, a.seed)?;
    let meta = with_pool(a.jobs, || {
        degrade_dataset(&a.input, a.task, noise, a.side, &a.out)
    })??;
    for e in &meta.entries {
        println!(
            "{}: {} -> {} {} seed {}",
            e.source, e.gt_shape, e.deg, e.deg_shape, e.seed
        );
    }
    for s in &meta.skipped {
        println!("{}: skipped ({})", s.source, s.error);
    }
    println!(
        "{} pairs written to {}, {} skipped",
        meta.entries.len(),
        a.out.display(),
        meta.skipped.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn build_denoiser(a: &RestoreArgs, shape: Shape) -> Result<Box<dyn Denoiser<f64>>> {
    let schedule = make_schedule(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)?;
    Ok(match a.denoiser {
        DenoiserKind::Gaussian => Box::new(GaussianAnalyticDenoiser::new(
            Image::filled(shape, a.prior_mean)?,
            a.prior_var,
            schedule,
        )?),
        DenoiserKind::Gmm => {
            if a.gmm_levels.is_empty() {
                return Err(Error::InvalidArgument("--gmm-levels is empty".into()));
            }
            let weight = 1.0 / a.gmm_levels.len() as f64;
            let components = a
                .gmm_levels
                .iter()
                .map(|&l| {
                    Ok(GmmComponent {
                        weight,
                        mean: Image::filled(shape, l)?,
                        var: a.prior_var,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Box::new(GmmAnalyticDenoiser::new(components, schedule)?)
        }
    })
}

fn restore(a: RestoreArgs) -> Result<ExitCode> {
    let y: Image = load_image(&a.measurement)?;
    let shape = a.task.input_shape_for(y.shape());
    let op = a.task.operator::<f64>(shape)?;
    let denoiser = build_denoiser(&a, shape)?;
    let schedule = make_schedule(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)?;
    let projector: Arc<dyn ManifoldProjector<f64>> = if a.projector == "identity" {
        Arc::new(IdentityProjector)
    } else {
        let p = PcaProjector::<f64>::load(&a.projector)?;
        if p.dim() != shape.len() {
            return Err(Error::InvalidArgument(format!(
                "projector dimension {} does not match image size {}",
                p.dim(),
                shape.len()
            )));
        }
        Arc::new(p)
    };
    let cfg = GuidanceConfig::new(a.m, a.scale)
        .with_step_mode(a.step_mode)
        .with_projector(projector);
    let lipschitz = if a.m == 0 {
        1.0
    } else {
        operator_norm(&op, NORM_ITERS, NORM_SEED)?
    };
    let (x, ms) = time_call(
        || {
            restore_with_norm(
                &y,
                &op,
                denoiser.as_ref(),
                &schedule,
                a.ddim_steps,
                &cfg,
                a.seed,
                lipschitz,
            )
        },
        0,
    );
    let x = x?;
    let residual = y.sub(&op.apply(&x)?)?.norm();
    save_image(&x, &a.out)?;
    println!("residual {residual:.6}");
    println!("elapsed_ms {ms:.3}");
    Ok(ExitCode::SUCCESS)
}

fn metrics(a: MetricsArgs) -> Result<ExitCode> {
    let reference: Image = load_image(&a.reference)?;
    let test: Image = load_image(&a.test)?;
    let r = MetricReport::evaluate(&reference, &test)?;
    println!("ssim {:.6}", r.ssim);
    println!("psnr {}", format_db(r.psnr_db));
    Ok(ExitCode::SUCCESS)
}

fn sweep(a: SweepArgs) -> Result<ExitCode> {
    if let (Some(path), Some(cell)) = (&a.replay, a.cell) {
        return replay(path, cell);
    }
    let mut cfg = match &a.config {
        Some(path) => SweepConfig::from_file(path)?,
        None => SweepConfig::default(),
    };
    if let Some(v) = a.task {
        cfg.task = v;
    }
    if let Some(v) = a.inner_steps {
        cfg.inner_steps_list = v;
    }
    if let Some(v) = a.ddim_steps {
        cfg.ddim_steps_list = v;
    }
    if let Some(v) = a.scales {
        cfg.scales_list = v;
    }
    if let Some(v) = a.dataset {
        cfg.dataset_dir = v;
    }
    if let Some(v) = a.side {
        cfg.working_side = v;
    }
    if let Some(v) = a.warmup_runs {
        cfg.warmup_runs = v;
    }
    if let Some(v) = a.sigma {
        cfg.noise_sigma = v;
    }
    if let Some(v) = a.step_mode {
        cfg.step_mode = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if cfg.dataset_dir.as_os_str().is_empty() {
        return Err(Error::InvalidArgument(
            "no dataset: pass --dataset or set dataset_dir in the config".into(),
        ));
    }
    let outcome = run_sweep(
        &cfg,
        &RunOptions {
            out_dir: a.out.clone(),
            jobs: a.jobs,
        },
    )?;
    println!(
        "{} rows written to {}",
        outcome.rows.len(),
        outcome.csv_path.display()
    );
    println!("table: {}", outcome.md_path.display());
    println!("manifest: {}", outcome.manifest_path.display());
    for check in monotonicity_report(&outcome.manifest) {
        println!(
            "{} ddim {} g {}: residual m=1 {:.6}, m=15 {:.6} [{}]",
            check.task,
            check.ddim_steps,
            check.scale,
            check.residual_m1,
            check.residual_m15,
            if check.holds() { "ok" } else { "not monotone" }
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn replay(path: &Path, cell: usize) -> Result<ExitCode> {
    let manifest = read_manifest(path)?;
    let recorded = manifest
        .cells
        .iter()
        .find(|c| c.index == cell)
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "manifest has no cell {cell} ({} cells)",
                manifest.cells.len()
            ))
        })?
        .row
        .clone();
    let replayed = replay_cell(&manifest, cell)?;
    println!("recorded: {}", recorded.to_csv());
    println!("replayed: {}", replayed.row.to_csv());
    if replayed.row.same_metrics(&recorded) {
        println!("metric columns identical");
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: replayed metrics differ from the manifest");
        Ok(ExitCode::from(2))
    }
}

fn projector_train(a: ProjectorTrainArgs) -> Result<ExitCode> {
    let images = list_pngs(&a.input)?
        .iter()
        .map(|p| center_crop_resize(&load_image::<f64>(p)?, a.side))
        .collect::<Result<Vec<_>>>()?;
    let p = train_pca_projector(&images, a.k)?;
    p.save(&a.out)?;
    println!(
        "projector rank {} (requested {}), dimension {}, {} images -> {}",
        p.rank(),
        a.k,
        p.dim(),
        images.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn random_image(rng: &mut ChaCha8Rng, shape: Shape) -> Result<Image> {
    Image::from_vec(shape, (0..shape.len()).map(|_| rng.random()).collect())
}

fn adjoint_check(a: AdjointCheckArgs) -> Result<ExitCode> {
    let tasks = a
        .task
        .map(|t| vec![t])
        .unwrap_or_else(|| Task::ALL.to_vec());
    let mut ok = true;
    for task in tasks {
        let op = task.operator::<f64>(Shape::new(a.side, a.side, a.channels))?;
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let mut worst = 0.0f64;
        for _ in 0..a.pairs {
            let x = random_image(&mut rng, op.input_shape())?;
            let y = random_image(&mut rng, op.output_shape())?;
            let lhs = op.apply(&x)?.dot(&y)?;
            let rhs = x.dot(&op.adjoint(&y)?)?;
            worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));
        }
        let pass = worst < a.tol;
        ok &= pass;
        println!(
            "{} {task} {} -> {}: max relative error {worst:.3e} over {} pairs",
            if pass { "PASS" } else { "FAIL" },
            op.input_shape(),
            op.output_shape(),
            a.pairs
        );
    }
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn selftest(a: SelftestArgs) -> Result<ExitCode> {
    let results = run_selftest(&SelftestOptions {
        seed: a.seed,
        fault: a.inject_fault,
    });
    for r in &results {
        println!("{r}");
    }
    let passed = results.iter().filter(|r| r.passed).count();
    println!("{passed}/{} checks passed", results.len());
    Ok(if all_passed(&results) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}
