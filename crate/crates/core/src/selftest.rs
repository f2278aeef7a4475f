//! Embedded verification suite run by `mpgd selftest`.
//!
//! Every check compares the engine against an independent computation on a
//! small problem: dense matrices for operators and the linear-Gaussian
//! posterior, finite differences for gradients and a direct sliding-window
//! loop for SSIM.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{
    make_schedule, sample_unconditional, GaussianAnalyticDenoiser, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::guidance::{
    fidelity_grad, fidelity_loss, guided_inner_loop, restore, restore_with_norm, GuidanceConfig,
    StepMode,
};
use crate::image::{ImageTensor, Shape};
use crate::metrics::{ssim, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
use crate::operators::{
    add_noise, build_downsample, gaussian_kernel, operator_norm, FnOperator, LinearOperator,
    NoiseSpec, Task,
};

/// Prior used by the posterior-mean check.
pub const POSTERIOR_PRIOR_MEAN: f64 = 0.5;
pub const POSTERIOR_PRIOR_VAR: f64 = 0.001;
pub const POSTERIOR_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Deliberate defects for exercising the failure path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Scales every adjoint application by `1 + 1e-3`.
    Adjoint,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adjoint" => Ok(Fault::Adjoint),
            other => Err(Error::invalid(format!("unknown fault '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SelftestOptions {
    pub seed: u64,
    pub fault: Option<Fault>,
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

/// Runs every check. Internal errors count as failures.
pub fn run_selftest(opts: &SelftestOptions) -> Vec<CheckResult> {
    type Check = fn(&SelftestOptions) -> Result<(bool, String)>;
    let checks: [(&'static str, Check); 7] = [
        ("adjoint", check_adjoint),
        ("gradient", check_gradient),
        ("posterior-mean", check_posterior_mean),
        ("ssim-bruteforce", check_ssim),
        ("descent", check_descent),
        ("m0-reduction", check_m0_reduction),
        ("multi-step-monotonicity", check_monotonicity),
    ];
    checks
        .iter()
        .map(|(name, check)| match check(opts) {
            Ok((passed, detail)) => CheckResult {
                name,
                passed,
                detail,
            },
            Err(e) => CheckResult {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        })
        .collect()
}

type BoxedOp = Box<dyn LinearOperator<f64>>;

/// Task operator at `shape`, with the configured fault applied.
fn task_operator(task: Task, shape: Shape, fault: Option<Fault>) -> Result<BoxedOp> {
    let op = task.operator::<f64>(shape)?;
    Ok(match fault {
        None => Box::new(op),
        Some(Fault::Adjoint) => {
            let (input_shape, output_shape) = (op.input_shape(), op.output_shape());
            let op = Arc::new(op);
            let fwd = Arc::clone(&op);
            Box::new(FnOperator {
                input_shape,
                output_shape,
                forward: move |x: &ImageTensor<f64>| fwd.apply(x),
                backward: move |y: &ImageTensor<f64>| Ok(op.adjoint(y)?.scale(1.0 + 1e-3)),
            })
        }
    })
}

fn random_image(rng: &mut ChaCha8Rng, shape: Shape) -> Result<ImageTensor<f64>> {
    ImageTensor::from_vec(
        shape,
        (0..shape.len()).map(|_| rng.random::<f64>()).collect(),
    )
}

fn check_adjoint(opts: &SelftestOptions) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    for task in Task::ALL {
        let op = task_operator(task, Shape::new(16, 16, 1), opts.fault)?;
        for _ in 0..20 {
            let x = random_image(&mut rng, op.input_shape())?;
            let y = random_image(&mut rng, op.output_shape())?;
            let lhs = op.apply(&x)?.dot(&y)?;
            let rhs = x.dot(&op.adjoint(&y)?)?;
            worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));
        }
    }
    Ok((
        worst < 1e-10,
        format!("max relative <Ax,y> - <x,A^T y> = {worst:.3e}"),
    ))
}

fn check_gradient(opts: &SelftestOptions) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let h = 1e-5;
    let mut worst = 0.0f64;
    for task in Task::ALL {
        let op = task_operator(task, Shape::new(8, 8, 1), opts.fault)?;
        let x = random_image(&mut rng, op.input_shape())?;
        let y = random_image(&mut rng, op.output_shape())?;
        let grad = fidelity_grad(&y, op.as_ref(), &x)?;
        let mut fd = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let mut plus = x.clone().into_vec();
            let mut minus = plus.clone();
            plus[i] += h;
            minus[i] -= h;
            let fp = fidelity_loss(&y, op.as_ref(), &ImageTensor::from_vec(x.shape(), plus)?)?;
            let fm = fidelity_loss(&y, op.as_ref(), &ImageTensor::from_vec(x.shape(), minus)?)?;
            fd.push((fp - fm) / (2.0 * h));
        }
        let fd = ImageTensor::from_vec(x.shape(), fd)?;
        worst = worst.max(grad.sub(&fd)?.norm() / fd.norm());
    }
    Ok((
        worst < 1e-6,
        format!("max relative gradient error = {worst:.3e}"),
    ))
}

/// Dense matrix of `op` acting on flattened images.
pub fn dense_matrix<A: LinearOperator<f64> + ?Sized>(op: &A) -> Result<DMatrix<f64>> {
    let (n, m) = (op.input_shape().len(), op.output_shape().len());
    let mut a = DMatrix::zeros(m, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = op.apply(&ImageTensor::from_vec(op.input_shape(), e)?)?;
        for (i, v) in col.as_slice().iter().enumerate() {
            a[(i, j)] = *v;
        }
    }
    Ok(a)
}

/// `E[x | y]` for `x ~ N(mu, prior_var I)` and `y = A x + N(0, sigma² I)`.
pub fn gaussian_posterior_mean(
    a: &DMatrix<f64>,
    mu: &DVector<f64>,
    prior_var: f64,
    sigma: f64,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    let m = a.nrows();
    let gram = a * a.transpose() * prior_var + DMatrix::identity(m, m) * (sigma * sigma);
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::invalid("posterior covariance is not positive definite"))?;
    Ok(mu + a.transpose() * chol.solve(&(y - a * mu)) * prior_var)
}

fn check_posterior_mean(opts: &SelftestOptions) -> Result<(bool, String)> {
    let shape = Shape::new(4, 4, 1);
    let op = build_downsample::<f64>(shape, 2)?;
    let schedule = make_schedule(1000, 1e-4, 0.02)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(2));
    let prior_sd = POSTERIOR_PRIOR_VAR.sqrt();
    let x_true: Vec<f64> = (0..shape.len())
        .map(|_| POSTERIOR_PRIOR_MEAN + prior_sd * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let x_true = ImageTensor::from_vec(shape, x_true)?;
    let sigma = 0.05;
    let y = add_noise(&op.apply(&x_true)?, NoiseSpec::new(sigma, opts.seed)?)?;

    let a = dense_matrix(&op)?;
    let mu = DVector::from_element(shape.len(), POSTERIOR_PRIOR_MEAN);
    let oracle = gaussian_posterior_mean(
        &a,
        &mu,
        POSTERIOR_PRIOR_VAR,
        sigma,
        &DVector::from_column_slice(y.as_slice()),
    )?;

    let denoiser = GaussianAnalyticDenoiser::new(
        ImageTensor::filled(shape, POSTERIOR_PRIOR_MEAN)?,
        POSTERIOR_PRIOR_VAR,
        schedule.clone(),
    )?;
    let cfg = GuidanceConfig::new(15, POSTERIOR_SCALE);
    let x = restore(&y, &op, &denoiser, &schedule, 100, &cfg, opts.seed)?;
    let x = DVector::from_column_slice(x.as_slice());
    let rel = (&x - &oracle).norm() / oracle.norm();
    Ok((
        rel < 0.1,
        format!("relative distance to dense posterior mean = {rel:.4}"),
    ))
}

/// SSIM computed window by window with no shared sums.
pub fn ssim_bruteforce(a: &ImageTensor<f64>, b: &ImageTensor<f64>) -> Result<f64> {
    a.check_same_shape(b)?;
    let g: Vec<f64> = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)?;
    let (h, w, c) = (a.height(), a.width(), a.channels());
    let mut total = 0.0;
    for ch in 0..c {
        let mut sum = 0.0;
        let mut count = 0usize;
        for r0 in 0..=h - SSIM_WINDOW {
            for c0 in 0..=w - SSIM_WINDOW {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let wt = g[i] * g[j];
                        mx += wt * a.get(r0 + i, c0 + j, ch);
                        my += wt * b.get(r0 + i, c0 + j, ch);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let wt = g[i] * g[j];
                        let dx = a.get(r0 + i, c0 + j, ch) - mx;
                        let dy = b.get(r0 + i, c0 + j, ch) - my;
                        vx += wt * dx * dx;
                        vy += wt * dy * dy;
                        cov += wt * dx * dy;
                    }
                }
                sum += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    Ok(total / c as f64)
}

fn check_ssim(opts: &SelftestOptions) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(3));
    let shape = Shape::new(32, 32, 1);
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let a = random_image(&mut rng, shape)?;
        let noise = random_image(&mut rng, shape)?;
        let b = a.axpy(0.3, &noise)?.map(|v| v.clamp(0.0, 1.0));
        worst = worst.max((ssim(&a, &b)? - ssim_bruteforce(&a, &b)?).abs());
    }
    Ok((
        worst < 1e-6,
        format!("max |ssim - bruteforce| = {worst:.3e}"),
    ))
}

fn check_descent(opts: &SelftestOptions) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(4));
    let mut worst = f64::NEG_INFINITY;
    for trial in 0..20 {
        let task = Task::ALL[trial % 2];
        let op = task_operator(task, Shape::new(16, 16, 1), opts.fault)?;
        let lipschitz = operator_norm(op.as_ref(), 200, 0)?;
        let m = rng.random_range(1..=20usize);
        let g = rng.random::<f64>() * 2.0 * m as f64;
        let rho = GuidanceConfig::<f64>::new(m, g).step_size(lipschitz);
        let single = GuidanceConfig::new(1, rho).with_step_mode(StepMode::Raw);
        let y = random_image(&mut rng, op.output_shape())?;
        let mut x = random_image(&mut rng, op.input_shape())?;
        let mut loss = fidelity_loss(&y, op.as_ref(), &x)?;
        for _ in 0..m {
            x = guided_inner_loop(&x, &y, op.as_ref(), &single, 1.0)?;
            let next = fidelity_loss(&y, op.as_ref(), &x)?;
            worst = worst.max(next - loss);
            loss = next;
        }
    }
    Ok((
        worst <= 1e-12,
        format!("largest per-step loss increase = {worst:.3e}"),
    ))
}

fn check_m0_reduction(opts: &SelftestOptions) -> Result<(bool, String)> {
    let shape = Shape::new(16, 16, 1);
    let op = Task::Sr4x.operator::<f64>(shape)?;
    let schedule = make_schedule(1000, 1e-4, 0.02)?;
    let denoiser =
        GaussianAnalyticDenoiser::new(ImageTensor::filled(shape, 0.5)?, 0.05, schedule.clone())?;
    let y = ImageTensor::filled(op.output_shape(), 0.3)?;
    let guided = restore(
        &y,
        &op,
        &denoiser,
        &schedule,
        20,
        &GuidanceConfig::new(0, 7.5),
        opts.seed,
    )?;
    let plain = sample_unconditional(&denoiser, &schedule, 20, shape, opts.seed)?;
    Ok((
        guided == plain,
        "m = 0 restore vs unconditional sample, bitwise".to_string(),
    ))
}

fn monotonicity_problem(
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<(
    ImageTensor<f64>,
    crate::operators::LinearDegradation<f64>,
    GaussianAnalyticDenoiser<f64>,
)> {
    let shape = Shape::new(16, 16, 1);
    let op = Task::Sr4x.operator::<f64>(shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = random_image(&mut rng, shape)?;
    let y = add_noise(&op.apply(&gt)?, NoiseSpec::new(0.05, seed)?)?;
    let denoiser =
        GaussianAnalyticDenoiser::new(ImageTensor::filled(shape, 0.5)?, 0.05, schedule.clone())?;
    Ok((y, op, denoiser))
}

fn check_monotonicity(opts: &SelftestOptions) -> Result<(bool, String)> {
    let schedule = make_schedule(1000, 1e-4, 0.02)?;
    let trials = 20;
    let mut wins = 0;
    for i in 0..trials {
        let seed = opts.seed.wrapping_add(100 + i);
        let (y, op, denoiser) = monotonicity_problem(&schedule, seed)?;
        let lipschitz = operator_norm(&op, 200, 0)?;
        let residual = |m: usize| -> Result<f64> {
            let x = restore_with_norm(
                &y,
                &op,
                &denoiser,
                &schedule,
                20,
                &GuidanceConfig::new(m, 7.5),
                seed,
                lipschitz,
            )?;
            Ok(y.sub(&op.apply(&x)?)?.norm())
        };
        if residual(15)? <= residual(1)? {
            wins += 1;
        }
    }
    Ok((
        wins * 20 >= trials * 19,
        format!("residual(m=15) <= residual(m=1) in {wins}/{trials} seeds"),
    ))
}
