use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{degrade_dataset, PairSet};
use super::timing::time_call;
use super::{DenoiserSpec, MeanSource, PriorMean, SweepConfig};
use crate::diffusion::{
    make_schedule, Denoiser, GaussianAnalyticDenoiser, GmmAnalyticDenoiser, GmmComponent,
    NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_TRAIN_STEPS,
};
use crate::error::{Error, Result};
use crate::guidance::{
    restore_with_norm, train_pca_projector, GuidanceConfig, IdentityProjector, ManifoldProjector,
    PcaProjector, StepMode, NORM_ITERS, NORM_SEED,
};
use crate::image::ImageTensor;
use crate::metrics::{format_db, MetricReport};
use crate::operators::{operator_norm, LinearDegradation, LinearOperator, NoiseSpec, Task};

pub const CSV_HEADER: &str =
    "task,m,ddim_steps,scale,n_images,n_failures,ssim_mean,ssim_std,psnr_mean,psnr_std,n_inf,lpips,time_ms";

/// Shortest round-trip decimal, switching to exponent notation far from
/// unity. Infinities print as `inf` and `-inf`.
pub fn format_number(v: f64) -> String {
    let a = v.abs();
    if v.is_infinite() {
        if v > 0.0 {
            format_db(v)
        } else {
            "-inf".to_string()
        }
    } else if a == 0.0 || (1e-4..1e16).contains(&a) || v.is_nan() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Worker threads for image-level parallelism. `0` and `1` run serially.
    pub jobs: usize,
}

/// One aggregated grid cell. PSNR statistics skip infinite values, which are
/// counted in `n_inf`. Standard deviations are population deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: Task,
    pub m: usize,
    pub ddim_steps: usize,
    pub scale: f64,
    pub n_images: usize,
    pub n_failures: usize,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub n_inf: usize,
    /// Mean restore time per attempted image.
    pub time_ms: f64,
}

impl ResultRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},,{}",
            self.task,
            self.m,
            self.ddim_steps,
            format_number(self.scale),
            self.n_images,
            self.n_failures,
            format_number(self.ssim_mean),
            format_number(self.ssim_std),
            format_number(self.psnr_mean),
            format_number(self.psnr_std),
            self.n_inf,
            format_number(self.time_ms)
        )
    }

    /// Equality on every column except `time_ms`.
    pub fn same_metrics(&self, other: &Self) -> bool {
        let strip = |r: &Self| ResultRow {
            time_ms: 0.0,
            ..r.clone()
        };
        strip(self).to_csv() == strip(other).to_csv()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSeeds {
    pub name: String,
    pub noise_seed: u64,
    pub sampler_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFailure {
    pub name: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub index: usize,
    pub task: Task,
    pub m: usize,
    pub ddim_steps: usize,
    pub scale: f64,
    pub step_mode: StepMode,
    pub pair_dir: PathBuf,
    pub images: Vec<ImageSeeds>,
    /// Mean of `‖y − A x̂‖` over successful images.
    pub residual_mean: f64,
    pub failures: Vec<ImageFailure>,
    pub row: ResultRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRecord {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub engine_version: String,
    pub timestamp_unix: u64,
    pub config: SweepConfig,
    pub schedule: ScheduleRecord,
    /// Operator-norm estimate `L̂` per task.
    pub lipschitz: BTreeMap<Task, f64>,
    pub cells: Vec<CellRecord>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<ResultRow>,
    pub manifest: Manifest,
    pub csv_path: PathBuf,
    pub md_path: PathBuf,
    pub manifest_path: PathBuf,
}

/// `residual(m = 15) ≤ residual(m = 1)` at one `(task, ddim_steps, scale)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneCheck {
    pub task: Task,
    pub ddim_steps: usize,
    pub scale: f64,
    pub residual_m1: f64,
    pub residual_m15: f64,
}

impl MonotoneCheck {
    pub fn holds(&self) -> bool {
        self.residual_m15 <= self.residual_m1
    }
}

/// Everything a cell needs besides its grid coordinates.
struct TaskContext {
    task: Task,
    pairs: PairSet,
    op: LinearDegradation<f64>,
    denoiser: Box<dyn Denoiser<f64>>,
    projector: Arc<dyn ManifoldProjector<f64>>,
    schedule: NoiseSchedule,
    lipschitz: f64,
}

struct ImageOutcome {
    report: Option<(MetricReport, f64)>,
    failure: Option<ImageFailure>,
    ms: f64,
}

type BoxedDenoiser = Box<dyn Denoiser<f64>>;
type SharedProjector = Arc<dyn ManifoldProjector<f64>>;

fn default_schedule() -> Result<NoiseSchedule> {
    make_schedule(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
}

fn build_denoiser(
    spec: &DenoiserSpec,
    pairs: &PairSet,
    schedule: &NoiseSchedule,
) -> Result<(BoxedDenoiser, SharedProjector)> {
    let first = pairs
        .pairs
        .first()
        .ok_or_else(|| Error::invalid(format!("pair set {} is empty", pairs.dir.display())))?;
    let shape = first.gt.shape();
    let gts: Vec<ImageTensor<f64>> = pairs.pairs.iter().map(|p| p.gt.clone()).collect();
    let identity: Arc<dyn ManifoldProjector<f64>> = Arc::new(IdentityProjector);
    match spec {
        DenoiserSpec::Gaussian {
            prior_mean,
            prior_var,
        } => {
            let mean = match prior_mean {
                PriorMean::Constant(v) => ImageTensor::filled(shape, *v)?,
                PriorMean::From(MeanSource::Dataset) => pixel_mean(&gts)?,
            };
            let d = GaussianAnalyticDenoiser::new(mean, *prior_var, schedule.clone())?;
            Ok((Box::new(d), identity))
        }
        DenoiserSpec::Gmm { levels, prior_var } => {
            if levels.is_empty() {
                return Err(Error::invalid("gmm denoiser needs at least one level"));
            }
            let weight = 1.0 / levels.len() as f64;
            let components = levels
                .iter()
                .map(|&l| {
                    Ok(GmmComponent {
                        weight,
                        mean: ImageTensor::filled(shape, l)?,
                        var: *prior_var,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((
                Box::new(GmmAnalyticDenoiser::new(components, schedule.clone())?),
                identity,
            ))
        }
        DenoiserSpec::ProjectorAugmented {
            k,
            prior_var,
            projector_path,
        } => {
            let projector = match projector_path {
                Some(path) => PcaProjector::load(path)?,
                None => train_pca_projector(&gts, *k)?,
            };
            if projector.dim() != shape.len() {
                return Err(Error::invalid(format!(
                    "projector dimension {} does not match images of shape {shape}",
                    projector.dim()
                )));
            }
            let mean = ImageTensor::from_vec(shape, projector.mean().to_vec())?;
            let d = GaussianAnalyticDenoiser::new(mean, *prior_var, schedule.clone())?;
            Ok((Box::new(d), Arc::new(projector)))
        }
    }
}

fn pixel_mean(images: &[ImageTensor<f64>]) -> Result<ImageTensor<f64>> {
    let mut acc = ImageTensor::zeros(images[0].shape())?;
    for img in images {
        acc = acc.add(img)?;
    }
    Ok(acc.scale(1.0 / images.len() as f64))
}

fn build_context(
    cfg: &SweepConfig,
    task: Task,
    pair_dir: &Path,
    lipschitz: Option<f64>,
) -> Result<TaskContext> {
    let pairs = PairSet::load(pair_dir)?;
    if pairs.meta.task != task {
        return Err(Error::invalid(format!(
            "pair directory {} holds {} pairs, expected {task}",
            pair_dir.display(),
            pairs.meta.task
        )));
    }
    let shape =
        pairs.pairs.first().map(|p| p.gt.shape()).ok_or_else(|| {
            Error::invalid(format!("pair directory {} is empty", pair_dir.display()))
        })?;
    if let Some(p) = pairs.pairs.iter().find(|p| p.gt.shape() != shape) {
        return Err(Error::ShapeMismatch {
            expected: shape,
            actual: p.gt.shape(),
        });
    }
    let op = task.operator::<f64>(shape)?;
    let schedule = default_schedule()?;
    let (denoiser, projector) = build_denoiser(&cfg.denoiser_spec, &pairs, &schedule)?;
    let lipschitz = match lipschitz {
        Some(l) => l,
        None => operator_norm(&op, NORM_ITERS, NORM_SEED)?,
    };
    Ok(TaskContext {
        task,
        pairs,
        op,
        denoiser,
        projector,
        schedule,
        lipschitz,
    })
}

/// Pair directory for `task`: `dataset_dir` itself when it already holds
/// pairs, otherwise a fresh degradation under `out_dir/pairs/<task>`.
fn prepare_pairs(cfg: &SweepConfig, task: Task, out_dir: &Path) -> Result<PathBuf> {
    if PairSet::is_pair_dir(&cfg.dataset_dir) {
        return Ok(cfg.dataset_dir.clone());
    }
    let dir = out_dir.join("pairs").join(task.as_str());
    degrade_dataset(
        &cfg.dataset_dir,
        task,
        NoiseSpec::new(cfg.noise_sigma, cfg.seed)?,
        cfg.working_side,
        &dir,
    )?;
    Ok(dir)
}

fn sampler_seed(cfg: &SweepConfig, index: usize) -> u64 {
    cfg.seed.wrapping_add(index as u64)
}

fn restore_one(
    ctx: &TaskContext,
    cfg: &SweepConfig,
    gcfg: &GuidanceConfig<f64>,
    ddim_steps: usize,
    i: usize,
) -> Result<ImageOutcome> {
    let pair = &ctx.pairs.pairs[i];
    let seed = sampler_seed(cfg, pair.entry.index);
    let (out, ms) = time_call(
        || {
            restore_with_norm(
                &pair.measurement,
                &ctx.op,
                ctx.denoiser.as_ref(),
                &ctx.schedule,
                ddim_steps,
                gcfg,
                seed,
                ctx.lipschitz,
            )
        },
        cfg.warmup_runs,
    );
    let failure = |e: String| ImageFailure {
        name: pair.entry.name.clone(),
        error: e,
    };
    match out {
        Ok(x) if x.all_finite() => {
            let report = MetricReport::evaluate(&pair.gt, &x)?;
            let residual = pair.measurement.sub(&ctx.op.apply(&x)?)?.norm();
            Ok(ImageOutcome {
                report: Some((report, residual)),
                failure: None,
                ms,
            })
        }
        Ok(_) => Ok(ImageOutcome {
            report: None,
            failure: Some(failure("restoration is not finite".into())),
            ms,
        }),
        Err(e @ (Error::Divergence { .. } | Error::NonFinite(_))) => Ok(ImageOutcome {
            report: None,
            failure: Some(failure(e.to_string())),
            ms,
        }),
        Err(e) => Err(e),
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn run_cell(
    ctx: &TaskContext,
    cfg: &SweepConfig,
    index: usize,
    m: usize,
    ddim_steps: usize,
    scale: f64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<CellRecord> {
    let gcfg = GuidanceConfig::new(m, scale)
        .with_step_mode(cfg.step_mode)
        .with_projector(Arc::clone(&ctx.projector));
    let n = ctx.pairs.pairs.len();
    let outcomes: Vec<ImageOutcome> = match pool {
        Some(pool) => pool.install(|| {
            (0..n)
                .into_par_iter()
                .map(|i| restore_one(ctx, cfg, &gcfg, ddim_steps, i))
                .collect::<Result<Vec<_>>>()
        })?,
        None => (0..n)
            .map(|i| restore_one(ctx, cfg, &gcfg, ddim_steps, i))
            .collect::<Result<Vec<_>>>()?,
    };

    let mut ssims = Vec::new();
    let mut psnrs = Vec::new();
    let mut residuals = Vec::new();
    let mut n_inf = 0;
    let mut failures = Vec::new();
    let mut total_ms = 0.0;
    for o in outcomes {
        total_ms += o.ms;
        if let Some((report, residual)) = o.report {
            ssims.push(report.ssim);
            residuals.push(residual);
            if report.psnr_db.is_infinite() {
                n_inf += 1;
            } else {
                psnrs.push(report.psnr_db);
            }
        }
        failures.extend(o.failure);
    }
    if ssims.is_empty() {
        return Err(Error::CellFailed(format!(
            "cell {index} (task {}, m {m}, ddim_steps {ddim_steps}, scale {scale}): all {n} restorations failed; first error: {}",
            ctx.task,
            failures.first().map(|f| f.error.as_str()).unwrap_or("none")
        )));
    }
    let (ssim_mean, ssim_std) = mean_std(&ssims);
    let (psnr_mean, psnr_std) = if psnrs.is_empty() {
        (f64::INFINITY, 0.0)
    } else {
        mean_std(&psnrs)
    };
    let row = ResultRow {
        task: ctx.task,
        m,
        ddim_steps,
        scale,
        n_images: ssims.len(),
        n_failures: failures.len(),
        ssim_mean,
        ssim_std,
        psnr_mean,
        psnr_std,
        n_inf,
        time_ms: total_ms / n as f64,
    };
    Ok(CellRecord {
        index,
        task: ctx.task,
        m,
        ddim_steps,
        scale,
        step_mode: cfg.step_mode,
        pair_dir: ctx.pairs.dir.clone(),
        images: ctx
            .pairs
            .pairs
            .iter()
            .map(|p| ImageSeeds {
                name: p.entry.name.clone(),
                noise_seed: p.entry.seed,
                sampler_seed: sampler_seed(cfg, p.entry.index),
            })
            .collect(),
        residual_mean: mean_std(&residuals).0,
        failures,
        row,
    })
}

fn thread_pool(jobs: usize) -> Result<Option<rayon::ThreadPool>> {
    if jobs <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map(Some)
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

/// Runs every grid cell for every selected task and writes `results.csv`,
/// `results.md` and `manifest.json` into `opts.out_dir`.
///
/// Cells are ordered by task, then `m`, then DDIM steps, then scale. Image
/// `i` of the pair listing samples with seed `cfg.seed + i`.
pub fn run_sweep(cfg: &SweepConfig, opts: &RunOptions) -> Result<SweepOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let pool = thread_pool(opts.jobs)?;
    let mut lipschitz = BTreeMap::new();
    let mut cells = Vec::new();
    for task in cfg.task.tasks() {
        let pair_dir = prepare_pairs(cfg, task, &opts.out_dir)?;
        let ctx = build_context(cfg, task, &pair_dir, None)?;
        log::info!(
            "{task}: {} images, operator norm {:.6}",
            ctx.pairs.pairs.len(),
            ctx.lipschitz
        );
        lipschitz.insert(task, ctx.lipschitz);
        for &m in &cfg.inner_steps_list {
            for &ddim_steps in &cfg.ddim_steps_list {
                for &scale in &cfg.scales_list {
                    let index = cells.len();
                    let cell = run_cell(&ctx, cfg, index, m, ddim_steps, scale, pool.as_ref())?;
                    log::info!("{}", cell.row.to_csv());
                    cells.push(cell);
                }
            }
        }
    }
    let manifest = Manifest {
        engine_version: crate::VERSION.to_string(),
        timestamp_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        config: cfg.clone(),
        schedule: ScheduleRecord {
            train_steps: DEFAULT_TRAIN_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        },
        lipschitz,
        cells,
    };
    let rows: Vec<ResultRow> = manifest.cells.iter().map(|c| c.row.clone()).collect();
    let csv_path = opts.out_dir.join("results.csv");
    let md_path = opts.out_dir.join("results.md");
    let manifest_path = opts.out_dir.join("manifest.json");
    write_file(&csv_path, &render_csv(&rows))?;
    write_file(&md_path, &render_markdown(&rows))?;
    write_file(&manifest_path, &serde_json::to_string_pretty(&manifest)?)?;
    Ok(SweepOutcome {
        rows,
        manifest,
        csv_path,
        md_path,
        manifest_path,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn render_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

pub fn render_markdown(rows: &[ResultRow]) -> String {
    let mut out = String::new();
    out.push_str("| Task | m | DDIM steps | Scale | LPIPS | SSIM | PSNR (dB) | Time (ms) | Images | Failures |\n");
    out.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        let psnr = if r.psnr_mean.is_infinite() {
            "inf".to_string()
        } else {
            format!("{:.2} ± {:.2}", r.psnr_mean, r.psnr_std)
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | n/a | {:.4} ± {:.4} | {} | {:.1} | {} | {} |",
            r.task,
            r.m,
            r.ddim_steps,
            r.scale,
            r.ssim_mean,
            r.ssim_std,
            psnr,
            r.time_ms,
            r.n_images,
            r.n_failures
        );
    }
    out
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Re-runs cell `index` of `manifest` from its recorded pair directory,
/// seeds and operator-norm estimate.
pub fn replay_cell(manifest: &Manifest, index: usize) -> Result<CellRecord> {
    let cell = manifest.cells.get(index).ok_or_else(|| {
        Error::invalid(format!(
            "manifest has {} cells, no cell {index}",
            manifest.cells.len()
        ))
    })?;
    let lipschitz = manifest.lipschitz.get(&cell.task).copied().ok_or_else(|| {
        Error::invalid(format!("manifest lacks an operator norm for {}", cell.task))
    })?;
    let cfg = SweepConfig {
        step_mode: cell.step_mode,
        ..manifest.config.clone()
    };
    let ctx = build_context(&cfg, cell.task, &cell.pair_dir, Some(lipschitz))?;
    run_cell(&ctx, &cfg, index, cell.m, cell.ddim_steps, cell.scale, None)
}

/// Compares `m = 15` against `m = 1` at every budget-mode
/// `(task, ddim_steps, scale)` present in the manifest.
pub fn monotonicity_report(manifest: &Manifest) -> Vec<MonotoneCheck> {
    let find = |c: &CellRecord, m: usize| {
        manifest.cells.iter().find(|o| {
            o.m == m && o.task == c.task && o.ddim_steps == c.ddim_steps && o.scale == c.scale
        })
    };
    manifest
        .cells
        .iter()
        .filter(|c| c.m == 1 && c.step_mode == StepMode::Budget)
        .filter_map(|c1| {
            find(c1, 15).map(|c15| MonotoneCheck {
                task: c1.task,
                ddim_steps: c1.ddim_steps,
                scale: c1.scale,
                residual_m1: c1.residual_mean,
                residual_m15: c15.residual_mean,
            })
        })
        .collect()
}
