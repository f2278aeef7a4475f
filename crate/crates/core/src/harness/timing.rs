use std::time::Instant;

/// Runs `f` `warmup_runs` times untimed, then once under a monotonic clock.
/// Returns the timed call's result and its duration in milliseconds.
pub fn time_call<R>(mut f: impl FnMut() -> R, warmup_runs: usize) -> (R, f64) {
    for _ in 0..warmup_runs {
        std::hint::black_box(f());
    }
    let start = Instant::now();
    let out = f();
    let ms = start.elapsed().as_secs_f64() * 1e3;
    (out, ms)
}

/// Wall-clock milliseconds of one call of `f` after `warmup_runs` warmups.
pub fn time_restore<R>(f: impl FnMut() -> R, warmup_runs: usize) -> f64 {
    time_call(f, warmup_runs).1
}
