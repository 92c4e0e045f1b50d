use std::sync::{Mutex, MutexGuard};

use memmamba_bench::{benchmark_forward, fit_scaling_exponent, ModelKind};

static TIMING: Mutex<()> = Mutex::new(());

/// Timings taken while another test runs on the same core are meaningless.
fn exclusive() -> MutexGuard<'static, ()> {
    TIMING.lock().unwrap_or_else(|e| e.into_inner())
}

const LENGTHS: [usize; 6] = [256, 512, 1024, 2048, 4096, 8192];

/// Time ratio between the ends of a 4x span; single doublings are too
/// noisy on a shared core.
fn span_ratio(kind: ModelKind, lo: usize) -> f64 {
    let r = benchmark_forward(kind, &[lo, 4 * lo], 7).unwrap();
    r[1].wall_ms / r[0].wall_ms
}

#[test]
fn memmamba_time_is_linear() {
    let _guard = exclusive();
    let r = span_ratio(ModelKind::MemMamba, 512);
    assert!((2.8..=5.6).contains(&r), "ratio {r}");
}

#[test]
fn baseline_time_is_quadratic() {
    let _guard = exclusive();
    let r = span_ratio(ModelKind::QuadraticBaseline, 1024);
    assert!((11.0..=22.0).contains(&r), "ratio {r}");
}

#[test]
fn short_median_is_stable() {
    let _guard = exclusive();
    let few = benchmark_forward(ModelKind::MemMamba, &[1024], 5).unwrap()[0].wall_ms;
    let many = benchmark_forward(ModelKind::MemMamba, &[1024], 32).unwrap()[0].wall_ms;
    assert!((few / many - 1.0).abs() <= 0.25, "{few} vs {many}");
}

#[test]
fn memmamba_state_is_constant_in_length() {
    let _guard = exclusive();
    let r = benchmark_forward(ModelKind::MemMamba, &LENGTHS[..4], 1).unwrap();
    let first = r[0].peak_state_bytes;
    assert!(first > 0);
    for rec in &r {
        assert_eq!(rec.peak_state_bytes, first, "state grows with n at {}", rec.seq_len);
    }
}

#[test]
fn fitted_exponents() {
    let _guard = exclusive();
    let mm = benchmark_forward(ModelKind::MemMamba, &LENGTHS, 5).unwrap();
    let qb = benchmark_forward(ModelKind::QuadraticBaseline, &LENGTHS, 5).unwrap();
    let (em, eq) = (fit_scaling_exponent(&mm).unwrap(), fit_scaling_exponent(&qb).unwrap());
    eprintln!("memmamba exponent {em:.3}, baseline exponent {eq:.3}");
    for r in mm.iter().chain(&qb) {
        eprintln!("{} {} {:.3}ms repeats {}", r.model_id, r.seq_len, r.wall_ms, r.repeats);
    }
    assert!(em <= 1.15, "{em}");
    assert!(eq >= 1.8, "{eq}");
}
