//! Closed-form bounds on memory decay, pooling error, stability and recall,
//! each paired with a simulation that checks the bound numerically.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::numerics::{block_max_pool, l2_norm, reconstruct_broadcast_to};
use crate::seed;
use crate::ssm::{contribution_bound, empirical_contribution, make_stable_a, SsmParams};
use crate::tensor::Tensor;

pub const SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub margin: f64,
}

impl BoundCheck {
    pub fn new(name: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        Self {
            name: name.into(),
            lhs,
            rhs,
            holds: lhs <= rhs + SLACK,
            margin: rhs - lhs,
        }
    }
}

pub const CSV_HEADER: &str = "name,lhs,rhs,holds,margin";

pub fn to_csv(checks: &[BoundCheck]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for c in checks {
        out.push_str(&format!("{},{:e},{:e},{},{:e}\n", c.name, c.lhs, c.rhs, c.holds, c.margin));
    }
    out
}

/// Frobenius error of max-pool-then-broadcast against `√(n·d)·Δ`, where `Δ`
/// is the largest gap between a block maximum and an entry of its block.
pub fn pooling_error_check(h: &Tensor, w: usize) -> Result<BoundCheck> {
    let (n, d) = h.dims2()?;
    let s = block_max_pool(h, w)?;
    let rec = reconstruct_broadcast_to(&s, w, n)?;
    let mut delta: f64 = 0.0;
    let mut err2 = 0.0;
    for i in 0..n {
        for j in 0..d {
            let gap = rec.get2(i, j) - h.get2(i, j);
            delta = delta.max(gap);
            err2 += gap * gap;
        }
    }
    Ok(BoundCheck::new(
        "pooling_error",
        err2.sqrt(),
        ((n * d) as f64).sqrt() * delta,
    ))
}

fn check_unit_interval(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(param_err(format!("{name} must lie in (0, 1), got {v}")));
    }
    Ok(())
}

/// `(max ‖A‖)^{L·τ} · ‖h₀‖` for a signal that crosses `L` layers, spending
/// `τ` steps in each.
pub fn layered_decay(a_norms: &[f64], tau: u32, h0_norm: f64) -> Result<f64> {
    if a_norms.is_empty() {
        return Err(param_err("need at least one layer"));
    }
    for &a in a_norms {
        check_unit_interval("layer decay norm", a)?;
    }
    let a = a_norms.iter().copied().fold(0.0, f64::max);
    Ok(a.powi((a_norms.len() as u32 * tau) as i32) * h0_norm)
}

/// Passes `h0` through a stack of diagonal layers. Each layer runs `tau`
/// zero-input steps and hands its state to the next. Compares the surviving
/// norm with [`layered_decay`].
pub fn layered_decay_simulation(a_diags: &[Tensor], tau: u32, h0: &[f64]) -> Result<BoundCheck> {
    let ds = h0.len();
    let mut h = h0.to_vec();
    let mut norms = Vec::with_capacity(a_diags.len());
    for a in a_diags {
        if a.len() != ds {
            return Err(crate::error::dim_err("layer decays must match the state width"));
        }
        let p = SsmParams::new(a.clone(), Tensor::zeros(&[ds, 1]), Tensor::zeros(&[1, ds]))?;
        let mut state = crate::ssm::ScanState { h, t: 0 };
        for _ in 0..tau {
            state = crate::ssm::ssm_step(&p, &state, &[0.0])?.0;
        }
        h = state.h;
        norms.push(p.a_norm());
    }
    let rhs = layered_decay(&norms, tau, l2_norm(h0))?;
    Ok(BoundCheck::new("layered_decay", l2_norm(&h), rhs))
}

/// `‖B‖·(x + α·c) / (1 − ‖A‖)`.
pub fn bibo_bound(a_norm: f64, b_norm: f64, x_bound: f64, alpha: f64, c_bound: f64) -> Result<f64> {
    if !(a_norm < 1.0) {
        return Err(Error::Instability(format!("state decay norm {a_norm} is not below 1")));
    }
    Ok(b_norm * (x_bound + alpha * c_bound) / (1.0 - a_norm))
}

/// Drives the recursion from zero with random inputs of norm at most
/// `x_bound + alpha·c_bound` and compares the largest state norm reached
/// with [`bibo_bound`].
pub fn bibo_simulation(
    p: &SsmParams,
    x_bound: f64,
    alpha: f64,
    c_bound: f64,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BoundCheck> {
    let rhs = bibo_bound(p.a_norm(), p.b_norm()?, x_bound, alpha, c_bound)?;
    let (ds, d) = (p.state_dim(), p.feature_dim());
    let u = x_bound + alpha * c_bound;
    let mut h = vec![0.0; ds];
    let mut x = vec![0.0; d];
    let mut peak: f64 = 0.0;
    for _ in 0..steps {
        for v in x.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let n = l2_norm(&x);
        if n > 0.0 {
            let r = u * rng.gen_range(0.5..=1.0) / n;
            x.iter_mut().for_each(|v| *v *= r);
        }
        for (i, hi) in h.iter_mut().enumerate() {
            let row = p.b.row(i);
            let mut bx = 0.0;
            for j in 0..d {
                bx += row[j] * x[j];
            }
            *hi = p.a_diag.data()[i] * *hi + bx;
        }
        peak = peak.max(l2_norm(&h));
    }
    Ok(BoundCheck::new("bibo", peak, rhs))
}

/// Upper bound on SSM recall `‖A‖^k·‖B‖·γ/θ` and lower bound on recall
/// with pooled attention `α(γ−Δ)/θ`, both clamped to `[0, 1]`.
pub fn recall_bounds(
    a_norm: f64,
    b_norm: f64,
    gamma: f64,
    theta: f64,
    k: u32,
    alpha: f64,
    delta: f64,
) -> Result<(f64, f64)> {
    if !(theta > 0.0) {
        return Err(param_err(format!("detection threshold must be positive, got {theta}")));
    }
    if !(delta < gamma) {
        return Err(param_err("pooling fluctuation must be below the signal strength"));
    }
    let mamba = a_norm.powi(k as i32) * b_norm * gamma / theta;
    let csa = alpha * (gamma - delta) / theta;
    Ok((mamba.clamp(0.0, 1.0), csa.clamp(0.0, 1.0)))
}

/// Context lengths reachable under compute budget `c`: quadratic attention
/// `√(C/(L·d))` against a linear model `C/(L·d)`.
pub fn equal_budget_lengths(c: f64, l_t: f64, d_t: f64, l_o: f64, d_o: f64) -> Result<(f64, f64)> {
    if [c, l_t, d_t, l_o, d_o].iter().any(|v| !(*v > 0.0)) {
        return Err(param_err("budget and model sizes must be positive"));
    }
    Ok(((c / (l_t * d_t)).sqrt(), c / (l_o * d_o)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSettings {
    pub instances: usize,
    pub bibo_steps: usize,
    pub seed: u64,
}

impl Default for SuiteSettings {
    fn default() -> Self {
        Self {
            instances: 1000,
            bibo_steps: 100_000,
            seed: 123,
        }
    }
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("positive shape")
}

fn random_ssm(rng: &mut ChaCha8Rng) -> Result<SsmParams> {
    let ds = rng.gen_range(1..=4);
    let d = rng.gen_range(1..=4);
    let raw = random_tensor(&[ds], -4.0, 3.0, rng);
    SsmParams::new(
        make_stable_a(&raw),
        random_tensor(&[ds, d], -1.0, 1.0, rng),
        random_tensor(&[d, ds], -1.0, 1.0, rng),
    )
}

fn instance(i: usize, s: &SuiteSettings) -> Result<Vec<BoundCheck>> {
    let mut rng = seed::rng_indexed(s.seed, "theory", i as u64);
    let tag = |c: BoundCheck| BoundCheck {
        name: format!("{}/{i}", c.name),
        ..c
    };

    let w = rng.gen_range(1..=6);
    let n = w * rng.gen_range(1..=8);
    let d = rng.gen_range(1..=5);
    let pool = pooling_error_check(&random_tensor(&[n, d], -5.0, 5.0, &mut rng), w)?;

    let layers = rng.gen_range(1..=6);
    let ds = rng.gen_range(1..=4);
    let tau = rng.gen_range(0..=12);
    let decays: Vec<Tensor> = (0..layers)
        .map(|_| make_stable_a(&random_tensor(&[ds], -4.0, 3.0, &mut rng)))
        .collect();
    let h0: Vec<f64> = (0..ds).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let layered = layered_decay_simulation(&decays, tau, &h0)?;

    let p = random_ssm(&mut rng)?;
    let x_bound = rng.gen_range(0.1..3.0);
    let alpha = rng.gen_range(0.0..1.0);
    let c_bound = rng.gen_range(0.0..2.0);
    let bibo = bibo_simulation(&p, x_bound, alpha, c_bound, s.bibo_steps, &mut rng)?;

    let p = random_ssm(&mut rng)?;
    let k = rng.gen_range(0..=64u32);
    let probe: Vec<f64> = (0..p.feature_dim()).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let lhs = empirical_contribution(&p, k as usize, &probe)?;
    let rhs = contribution_bound(p.a_norm(), p.b_norm()?, l2_norm(&probe), k)?;
    let contrib = BoundCheck::new("contribution", lhs, rhs);

    Ok(vec![tag(pool), tag(layered), tag(bibo), tag(contrib)])
}

/// Runs every randomized check on `instances` seeded draws. Results come
/// back in instance order regardless of scheduling.
pub fn bound_suite(s: &SuiteSettings) -> Result<Vec<BoundCheck>> {
    let per: Vec<Vec<BoundCheck>> = (0..s.instances)
        .into_par_iter()
        .map(|i| instance(i, s))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Deterministic worked examples for the closed-form calculators.
pub fn worked_examples() -> Result<Vec<BoundCheck>> {
    let (mamba, csa) = recall_bounds(0.9, 1.0, 1.0, 1.0, 100, 0.8, 0.1)?;
    let (_, csa2) = recall_bounds(0.9, 1.0, 1.0, 0.7, 100, 0.8, 0.1)?;
    let (n_t, n_o) = equal_budget_lengths(1e12, 1e4, 1.0, 1e4, 1.0)?;
    Ok(vec![
        BoundCheck::new("recall_mamba_k100", mamba, 0.01),
        // A lower bound holds when 0.9 ≤ value, written as 0.9 ≤ rhs.
        BoundCheck::new("recall_csa_lower", 0.9, csa2),
        BoundCheck::new("recall_csa_unit_threshold", 0.0, csa),
        BoundCheck::new("equal_budget_ratio", n_t * 100.0, n_o),
    ])
}
