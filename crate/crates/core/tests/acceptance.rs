//! End-to-end acceptance criteria. Each test prints one PASS/FAIL line and
//! asserts both its numeric threshold and its wall-clock budget. Tests take
//! a shared lock so that their timings are not inflated by each other.

mod common;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use common::{gray, rng, schedule, uniform_image};
use mpgd_core::diffusion::{sample_unconditional, GaussianAnalyticDenoiser};
use mpgd_core::guidance::{
    fidelity_grad, fidelity_loss, guided_inner_loop, restore, restore_with_norm,
    train_pca_projector, GuidanceConfig, ManifoldProjector, PcaProjector, StepMode,
};
use mpgd_core::harness::{run_sweep, RunOptions, SweepConfig, CSV_HEADER};
use mpgd_core::image::save_image;
use mpgd_core::metrics::{psnr_from_mse, ssim};
use mpgd_core::operators::{add_noise, build_downsample, operator_norm};
use mpgd_core::{Image, ImageTensor, LinearOperator, NoiseSpec, Shape, Task};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Writes straight to the process stdout so the verdict survives capture.
fn report(id: usize, name: &str, passed: bool, detail: &str, elapsed: Duration, limit: Duration) {
    let tag = if passed && elapsed < limit {
        "PASS"
    } else {
        "FAIL"
    };
    let line = format!(
        "criterion {id:>2} {name}: {tag} ({detail}; {:.2} s of {} s)\n",
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn finish(id: usize, name: &str, passed: bool, detail: String, start: Instant, limit_s: u64) {
    let elapsed = start.elapsed();
    let limit = Duration::from_secs(limit_s);
    report(id, name, passed, &detail, elapsed, limit);
    assert!(passed, "criterion {id} {name}: {detail}");
    assert!(
        elapsed < limit,
        "criterion {id} {name}: took {:.2} s, limit {limit_s} s",
        elapsed.as_secs_f64()
    );
}

fn operators_16() -> Vec<(Task, mpgd_core::Degradation)> {
    Task::ALL
        .iter()
        .map(|&t| (t, t.operator::<f64>(gray(16)).unwrap()))
        .collect()
}

#[test]
fn criterion_01_adjoint_identity() {
    let _g = serial();
    let start = Instant::now();
    let mut r = rng(1001);
    let mut worst = 0.0f64;
    let ops = operators_16();
    assert_eq!(ops[0].1.output_shape(), gray(4));
    assert_eq!(ops[1].1.output_shape(), gray(16));
    for (_, op) in &ops {
        for _ in 0..100 {
            let x = uniform_image(&mut r, op.input_shape());
            let y = uniform_image(&mut r, op.output_shape());
            let lhs = op.apply(&x).unwrap().dot(&y).unwrap();
            let rhs = x.dot(&op.adjoint(&y).unwrap()).unwrap();
            worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));
        }
    }
    finish(
        1,
        "adjoint identity",
        worst < 1e-10,
        format!("max relative error {worst:.2e} over 2 x 100 pairs"),
        start,
        5,
    );
}

#[test]
fn criterion_02_gradient_oracle() {
    let _g = serial();
    let start = Instant::now();
    let h = 1e-5;
    let mut r = rng(1002);
    let mut worst = 0.0f64;
    for task in Task::ALL {
        let op = task.operator::<f64>(gray(8)).unwrap();
        for _ in 0..10 {
            let x = uniform_image(&mut r, op.input_shape());
            let y = uniform_image(&mut r, op.output_shape());
            let grad = fidelity_grad(&y, &op, &x).unwrap();
            let base = x.as_slice().to_vec();
            let loss_at = |i: usize, d: f64| {
                let mut v = base.clone();
                v[i] += d;
                fidelity_loss(&y, &op, &ImageTensor::from_vec(x.shape(), v).unwrap()).unwrap()
            };
            let fd: Vec<f64> = (0..base.len())
                .map(|i| (loss_at(i, h) - loss_at(i, -h)) / (2.0 * h))
                .collect();
            let num: f64 = grad
                .as_slice()
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let den = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            worst = worst.max(num / den);
        }
    }
    finish(
        2,
        "gradient oracle",
        worst < 1e-6,
        format!("max relative error {worst:.2e} over 2 x 10 instances"),
        start,
        10,
    );
}

/// Dense operator matrix, one column per unit input.
fn dense(op: &dyn LinearOperator<f64>) -> DMatrix<f64> {
    let n = op.input_shape().len();
    let cols: Vec<DVector<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = op
                .apply(&ImageTensor::from_vec(op.input_shape(), e).unwrap())
                .unwrap();
            DVector::from_column_slice(col.as_slice())
        })
        .collect();
    DMatrix::from_columns(&cols)
}

#[test]
fn criterion_03_posterior_mean_oracle() {
    let _g = serial();
    let start = Instant::now();
    let (mu, prior_var, sigma, scale) = (0.5, 0.001, 0.05, 0.1);
    let shape = gray(4);
    let op = build_downsample::<f64>(shape, 2).unwrap();
    let a = dense(&op);
    let sched = schedule();
    let denoiser = GaussianAnalyticDenoiser::new(
        ImageTensor::filled(shape, mu).unwrap(),
        prior_var,
        sched.clone(),
    )
    .unwrap();
    let cfg = GuidanceConfig::new(15, scale);
    let mut worst = 0.0f64;
    let seeds = 10u64;
    for seed in 0..seeds {
        let mut r = rng(3000 + seed);
        let x_true = common::gaussian_image(&mut r, shape, mu, prior_var.sqrt());
        let y = add_noise(
            &op.apply(&x_true).unwrap(),
            NoiseSpec::new(sigma, seed).unwrap(),
        )
        .unwrap();

        // E[x|y] = mu + S Aᵀ (A S Aᵀ + σ² I)⁻¹ (y − A mu) with S = σp² I.
        let yv = DVector::from_column_slice(y.as_slice());
        let muv = DVector::from_element(shape.len(), mu);
        let gram = &a * a.transpose() * prior_var
            + DMatrix::identity(a.nrows(), a.nrows()) * sigma * sigma;
        let w = gram.lu().solve(&(&yv - &a * &muv)).unwrap();
        let oracle = &muv + a.transpose() * w * prior_var;

        let x = restore(&y, &op, &denoiser, &sched, 100, &cfg, seed).unwrap();
        let xv = DVector::from_column_slice(x.as_slice());
        worst = worst.max((&xv - &oracle).norm() / oracle.norm());
    }
    finish(
        3,
        "posterior-mean oracle",
        worst < 0.1,
        format!("max relative L2 distance {worst:.4} over {seeds} seeds"),
        start,
        30,
    );
}

/// Grayscale analytic-denoiser problem: uniform ground truth, noisy
/// measurement, Gaussian prior N(0.5, 0.05).
struct AnalyticTask {
    op: mpgd_core::Degradation,
    denoiser: GaussianAnalyticDenoiser<f64>,
    sched: mpgd_core::diffusion::NoiseSchedule,
    lipschitz: f64,
}

impl AnalyticTask {
    const SIDE: usize = 32;

    fn new(task: Task) -> Self {
        let shape = gray(Self::SIDE);
        let op = task.operator::<f64>(shape).unwrap();
        let sched = schedule();
        let denoiser = GaussianAnalyticDenoiser::new(
            ImageTensor::filled(shape, 0.5).unwrap(),
            0.05,
            sched.clone(),
        )
        .unwrap();
        let lipschitz = operator_norm(&op, 200, 0).unwrap();
        Self {
            op,
            denoiser,
            sched,
            lipschitz,
        }
    }

    fn measurement(&self, seed: u64) -> Image {
        let gt = uniform_image(&mut rng(4000 + seed), self.op.input_shape());
        add_noise(
            &self.op.apply(&gt).unwrap(),
            NoiseSpec::new(0.05, seed).unwrap(),
        )
        .unwrap()
    }

    /// `‖y − A x̂‖` after a budget-mode restore at 20 DDIM steps, g = 7.5.
    fn residual(&self, y: &Image, m: usize, seed: u64) -> f64 {
        let x = restore_with_norm(
            y,
            &self.op,
            &self.denoiser,
            &self.sched,
            20,
            &GuidanceConfig::new(m, 7.5),
            seed,
            self.lipschitz,
        )
        .unwrap();
        y.sub(&self.op.apply(&x).unwrap()).unwrap().norm()
    }
}

#[test]
fn criterion_04_multi_step_improvement() {
    let _g = serial();
    let start = Instant::now();
    let mut wins = Vec::new();
    for task in Task::ALL {
        let t = AnalyticTask::new(task);
        let count = (0..100u64)
            .filter(|&seed| {
                let y = t.measurement(seed);
                t.residual(&y, 15, seed) <= t.residual(&y, 1, seed)
            })
            .count();
        wins.push((task, count));
    }
    let detail = wins
        .iter()
        .map(|(t, c)| format!("{t} {c}/100"))
        .collect::<Vec<_>>()
        .join(", ");
    finish(
        4,
        "multi-step improvement",
        wins.iter().all(|&(_, c)| c >= 95),
        format!("residual(m=15) <= residual(m=1): {detail}"),
        start,
        60,
    );
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn criterion_05_saturation_shape() {
    let _g = serial();
    let start = Instant::now();
    let ms = [1usize, 3, 7, 15, 20];
    let mut passed = true;
    let mut parts = Vec::new();
    for task in Task::ALL {
        let t = AnalyticTask::new(task);
        let mut per_m = vec![Vec::new(); ms.len()];
        for seed in 0..50u64 {
            let y = t.measurement(seed);
            for (i, &m) in ms.iter().enumerate() {
                per_m[i].push(t.residual(&y, m, seed));
            }
        }
        let med: Vec<f64> = per_m.into_iter().map(median).collect();
        let monotone = med[..4].windows(2).all(|w| w[1] <= w[0]);
        let ratio = (med[3] - med[4]) / (med[0] - med[3]);
        let ok = monotone && ratio <= 0.2;
        passed &= ok;
        parts.push(format!(
            "{task} medians [{}] non-increasing {monotone}, gain(15->20)/gain(1->15) {ratio:.3e}",
            med.iter()
                .map(|v| format!("{v:.5}"))
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }
    finish(5, "saturation shape", passed, parts.join("; "), start, 120);
}

#[test]
fn criterion_06_descent_property() {
    let _g = serial();
    let start = Instant::now();
    let mut r = rng(1006);
    let ops = operators_16();
    let norms: Vec<f64> = ops
        .iter()
        .map(|(_, op)| operator_norm(op, 200, 0).unwrap())
        .collect();
    let mut worst = f64::NEG_INFINITY;
    for trial in 0..100 {
        let (_, op) = &ops[trial % 2];
        let lipschitz = norms[trial % 2];
        let m = r.random_range(1..=20usize);
        let g = r.random_range(0.01..2.0 * m as f64);
        let rho = GuidanceConfig::<f64>::new(m, g).step_size(lipschitz);
        let one = GuidanceConfig::new(1, rho).with_step_mode(StepMode::Raw);
        let y = uniform_image(&mut r, op.output_shape());
        let mut x = uniform_image(&mut r, op.input_shape());
        let mut loss = fidelity_loss(&y, op, &x).unwrap();
        for _ in 0..m {
            x = guided_inner_loop(&x, &y, op, &one, 1.0).unwrap();
            let next = fidelity_loss(&y, op, &x).unwrap();
            worst = worst.max(next - loss);
            loss = next;
        }
        // The m-step budget loop must land on the same iterate.
        let y0 = uniform_image(&mut rng(trial as u64), op.output_shape());
        let x0 = uniform_image(&mut rng(trial as u64 + 1), op.input_shape());
        let looped =
            guided_inner_loop(&x0, &y0, op, &GuidanceConfig::new(m, g), lipschitz).unwrap();
        let mut stepped = x0;
        for _ in 0..m {
            stepped = guided_inner_loop(&stepped, &y0, op, &one, 1.0).unwrap();
        }
        assert!(looped.sub(&stepped).unwrap().norm() <= 1e-12 * stepped.norm());
    }
    finish(
        6,
        "descent property",
        worst <= 1e-12,
        format!("largest per-iteration loss increase {worst:.2e} over 100 instances"),
        start,
        10,
    );
}

/// Windowed SSIM written out position by position.
fn ssim_reference(a: &Image, b: &Image) -> f64 {
    const W: usize = 11;
    let g: Vec<f64> = {
        let raw: Vec<f64> = (0..W)
            .map(|i| {
                let d = i as f64 - 5.0;
                (-d * d / (2.0 * 1.5 * 1.5)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    };
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w) = (a.height(), a.width());
    let mut acc = 0.0;
    let mut n = 0;
    for r0 in 0..=h - W {
        for c0 in 0..=w - W {
            let mut s = [0.0f64; 5];
            for i in 0..W {
                for j in 0..W {
                    let wt = g[i] * g[j];
                    let (p, q) = (a.get(r0 + i, c0 + j, 0), b.get(r0 + i, c0 + j, 0));
                    s[0] += wt * p;
                    s[1] += wt * q;
                    s[2] += wt * p * p;
                    s[3] += wt * q * q;
                    s[4] += wt * p * q;
                }
            }
            let (vx, vy, cov) = (s[2] - s[0] * s[0], s[3] - s[1] * s[1], s[4] - s[0] * s[1]);
            acc += (2.0 * s[0] * s[1] + c1) * (2.0 * cov + c2)
                / ((s[0] * s[0] + s[1] * s[1] + c1) * (vx + vy + c2));
            n += 1;
        }
    }
    acc / n as f64
}

#[test]
fn criterion_07_ssim_psnr_oracles() {
    let _g = serial();
    let start = Instant::now();
    let mut r = rng(1007);
    let shape = gray(32);
    let mut worst = 0.0f64;
    let mut self_err = 0.0f64;
    for i in 0..10 {
        let a = uniform_image(&mut r, shape);
        let noise = uniform_image(&mut r, shape);
        let b = a
            .axpy(0.1 * (i + 1) as f64, &noise)
            .unwrap()
            .map(|v| v.clamp(0.0, 1.0));
        worst = worst.max((ssim(&a, &b).unwrap() - ssim_reference(&a, &b)).abs());
        self_err = self_err.max((ssim(&a, &a).unwrap() - 1.0).abs());
    }
    let psnr_err = (psnr_from_mse(0.01) - 20.0).abs();
    finish(
        7,
        "SSIM/PSNR oracles",
        worst < 1e-6 && psnr_err <= 1e-9 && self_err <= 1e-9,
        format!(
            "max |ssim - reference| {worst:.2e}, |psnr(0.01) - 20| {psnr_err:.2e}, \
             max |ssim(x,x) - 1| {self_err:.2e}"
        ),
        start,
        10,
    );
}

fn off_subspace(p: &PcaProjector<f64>, x: &Image) -> f64 {
    let centered: Vec<f64> = x
        .as_slice()
        .iter()
        .zip(p.mean())
        .map(|(a, m)| a - m)
        .collect();
    let mut resid = centered.clone();
    for i in 0..p.rank() {
        let row = p.basis_row(i);
        let c: f64 = row.iter().zip(&centered).map(|(a, b)| a * b).sum();
        resid.iter_mut().zip(row).for_each(|(r, v)| *r -= c * v);
    }
    resid.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn criterion_08_projector_properties() {
    let _g = serial();
    let start = Instant::now();
    let shape = gray(8);
    let mut r = rng(1008);
    let train: Vec<Image> = (0..16).map(|_| uniform_image(&mut r, shape)).collect();
    let p = Arc::new(train_pca_projector(&train, 6).unwrap());

    let mut idem = 0.0f64;
    for _ in 0..20 {
        let x = uniform_image(&mut r, shape);
        let once = p.project(&x).unwrap();
        let twice = p.project(&once).unwrap();
        idem = idem.max(once.sub(&twice).unwrap().norm());
    }

    let op = Task::Sr4x.operator::<f64>(shape).unwrap();
    let lipschitz = operator_norm(&op, 200, 0).unwrap();
    let cfg = GuidanceConfig::new(7, 7.5).with_projector(p.clone());
    let mut orth = 0.0f64;
    for _ in 0..20 {
        let x0 = uniform_image(&mut r, shape);
        let y = uniform_image(&mut r, op.output_shape());
        let out = guided_inner_loop(&x0, &y, &op, &cfg, lipschitz).unwrap();
        orth = orth.max(off_subspace(&p, &out));
    }

    let small = gray(4);
    let full_train: Vec<Image> = (0..40).map(|_| uniform_image(&mut r, small)).collect();
    let full = train_pca_projector(&full_train, small.len()).unwrap();
    let mut ident = 0.0f64;
    for _ in 0..20 {
        let x = uniform_image(&mut r, small);
        ident = ident.max(full.project(&x).unwrap().sub(&x).unwrap().norm());
    }
    finish(
        8,
        "projector properties",
        idem < 1e-9 && orth < 1e-8 && ident < 1e-8 && full.rank() == small.len(),
        format!(
            "idempotence {idem:.2e}, post-guidance orthogonal component {orth:.2e}, \
             k=d distance to identity {ident:.2e}"
        ),
        start,
        10,
    );
}

/// Smooth grayscale test images built from a few random cosines.
fn write_images(dir: &Path, n: usize, side: usize) {
    let mut r = rng(1009);
    for k in 0..n {
        let waves: Vec<[f64; 4]> = (0..4)
            .map(|_| {
                [
                    r.random_range(0.0..4.0),
                    r.random_range(0.0..4.0),
                    r.random_range(0.0..std::f64::consts::TAU),
                    r.random_range(0.05..0.2),
                ]
            })
            .collect();
        let base = 0.5 + 0.1 * r.sample::<f64, _>(StandardNormal);
        let data = (0..side * side)
            .map(|i| {
                let (u, v) = (
                    (i / side) as f64 / side as f64,
                    (i % side) as f64 / side as f64,
                );
                let s: f64 = waves
                    .iter()
                    .map(|[fu, fv, ph, amp]| {
                        amp * (std::f64::consts::TAU * (fu * u + fv * v) + ph).cos()
                    })
                    .sum();
                (base + s).clamp(0.0, 1.0)
            })
            .collect();
        let img = ImageTensor::from_vec(Shape::new(side, side, 1), data).unwrap();
        save_image(&img, dir.join(format!("img{k:02}.png"))).unwrap();
    }
}

fn non_timing_columns(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| {
            l.rsplit_once(',')
                .map(|(head, _)| head.to_string())
                .unwrap()
        })
        .collect()
}

#[test]
fn criterion_09_sweep_reproduction() {
    let _g = serial();
    let start = Instant::now();
    let data = tempfile::tempdir().unwrap();
    write_images(data.path(), 8, 64);
    let cfg = SweepConfig {
        dataset_dir: data.path().to_path_buf(),
        warmup_runs: 0,
        ..Default::default()
    };
    let runs: Vec<String> = (0..2)
        .map(|_| {
            let out = tempfile::tempdir().unwrap();
            let outcome = run_sweep(
                &cfg,
                &RunOptions {
                    out_dir: out.path().to_path_buf(),
                    jobs: 1,
                },
            )
            .unwrap();
            fs::read_to_string(outcome.csv_path).unwrap()
        })
        .collect();
    let rows_per_task: Vec<usize> = Task::ALL
        .iter()
        .map(|t| {
            runs[0]
                .lines()
                .filter(|l| l.starts_with(&format!("{t},")))
                .count()
        })
        .collect();
    let header_ok = runs.iter().all(|c| c.lines().next() == Some(CSV_HEADER));
    let identical = non_timing_columns(&runs[0]) == non_timing_columns(&runs[1]);
    finish(
        9,
        "sweep reproduction",
        header_ok && rows_per_task.iter().all(|&n| n == 45) && identical,
        format!(
            "rows per task {rows_per_task:?}, non-timing columns identical across reruns: {identical}"
        ),
        start,
        600,
    );
}

#[test]
fn criterion_10_m0_reduction() {
    let _g = serial();
    let start = Instant::now();
    let mut all_equal = true;
    let mut cases = 0;
    for task in Task::ALL {
        let shape = gray(16);
        let op = task.operator::<f64>(shape).unwrap();
        let sched = schedule();
        let denoiser = GaussianAnalyticDenoiser::new(
            ImageTensor::filled(shape, 0.5).unwrap(),
            0.05,
            sched.clone(),
        )
        .unwrap();
        for seed in 0..5u64 {
            let y = uniform_image(&mut rng(seed), op.output_shape());
            for steps in [20, 50] {
                let guided = restore(
                    &y,
                    &op,
                    &denoiser,
                    &sched,
                    steps,
                    &GuidanceConfig::new(0, 7.5),
                    seed,
                )
                .unwrap();
                let plain = sample_unconditional(&denoiser, &sched, steps, shape, seed).unwrap();
                all_equal &= guided
                    .as_slice()
                    .iter()
                    .zip(plain.as_slice())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                cases += 1;
            }
        }
    }
    finish(
        10,
        "m=0 reduction",
        all_equal,
        format!("bitwise equal in {cases} cases: {all_equal}"),
        start,
        5,
    );
}
