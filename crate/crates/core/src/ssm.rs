//! Diagonal, time-invariant state-space recursion
//! `h_t = A ⊙ h_{t−1} + B·x_t`, `y_t = C·h_t`, and its decay analysis.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, param_err, Result};
use crate::numerics::{l2_norm, matvec_into, operator_norm, stable_decay};
use crate::tensor::Tensor;

pub const POWER_ITER_TOL: f64 = 1e-10;
pub const POWER_ITER_MAX: usize = 10_000;

/// Maps unconstrained parameters to decay rates `exp(−softplus(raw))`, each
/// strictly inside `(0, 1)` for finite `raw`.
pub fn make_stable_a(raw: &Tensor) -> Tensor {
    raw.map(stable_decay)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsmParams {
    pub a_diag: Tensor,
    pub b: Tensor,
    pub c: Tensor,
}

impl SsmParams {
    pub fn new(a_diag: Tensor, b: Tensor, c: Tensor) -> Result<Self> {
        let ds = a_diag.len();
        let (bs, d) = b.dims2()?;
        let (cd, cs) = c.dims2()?;
        if bs != ds || cs != ds || cd != d {
            return Err(dim_err(format!(
                "A has {ds} entries, B is {bs}x{d}, C is {cd}x{cs}"
            )));
        }
        if !a_diag.data().iter().all(|a| a.is_finite() && a.abs() < 1.0) {
            return Err(param_err("decay entries must satisfy |a| < 1"));
        }
        if !b.is_finite() || !c.is_finite() {
            return Err(param_err("B and C must be finite"));
        }
        Ok(Self { a_diag, b, c })
    }

    pub fn state_dim(&self) -> usize {
        self.a_diag.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.b.cols()
    }

    /// Largest |a_i|: the operator norm of the diagonal transition.
    pub fn a_norm(&self) -> f64 {
        self.a_diag.data().iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    /// Spectral norm of `B` by power iteration.
    pub fn b_norm(&self) -> Result<f64> {
        operator_norm(&self.b, POWER_ITER_TOL, POWER_ITER_MAX)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanState {
    pub h: Vec<f64>,
    pub t: usize,
}

impl ScanState {
    pub fn zeros(state_dim: usize) -> Self {
        Self {
            h: vec![0.0; state_dim],
            t: 0,
        }
    }
}

/// Updates `h` in place and writes `y = C·h` into `y`. `bx` is scratch of
/// length `d_s`.
#[inline]
pub(crate) fn step_in_place(p: &SsmParams, h: &mut [f64], x: &[f64], bx: &mut [f64], y: &mut [f64]) {
    let ds = h.len();
    let d = x.len();
    matvec_into(p.b.data(), ds, d, x, bx);
    for ((hi, &ai), &bi) in h.iter_mut().zip(p.a_diag.data()).zip(bx.iter()) {
        *hi = ai * *hi + bi;
    }
    matvec_into(p.c.data(), d, ds, h, y);
}

pub fn ssm_step(p: &SsmParams, state: &ScanState, x: &[f64]) -> Result<(ScanState, Vec<f64>)> {
    let ds = p.state_dim();
    let d = p.feature_dim();
    if x.len() != d || state.h.len() != ds {
        return Err(dim_err(format!(
            "ssm_step: expected x of length {d} and h of length {ds}, got {} and {}",
            x.len(),
            state.h.len()
        )));
    }
    let mut h = state.h.clone();
    let mut bx = vec![0.0; ds];
    let mut y = vec![0.0; d];
    step_in_place(p, &mut h, x, &mut bx, &mut y);
    Ok((ScanState { h, t: state.t + 1 }, y))
}

/// Runs the recursion over the rows of `x` (`n × d`), returning the state
/// trajectory `H` (`n × d_s`) and outputs `Y` (`n × d`).
pub fn ssm_scan(p: &SsmParams, x: &Tensor, h0: &[f64]) -> Result<(Tensor, Tensor)> {
    let (n, d) = x.dims2()?;
    let ds = p.state_dim();
    if d != p.feature_dim() || h0.len() != ds {
        return Err(dim_err(format!(
            "ssm_scan: inputs are {n}x{d}, h0 has {} entries; params expect d={}, d_s={ds}",
            h0.len(),
            p.feature_dim()
        )));
    }
    let mut hs = vec![0.0; n * ds];
    let mut ys = vec![0.0; n * d];
    let mut h = h0.to_vec();
    let mut bx = vec![0.0; ds];
    for t in 0..n {
        step_in_place(p, &mut h, x.row(t), &mut bx, &mut ys[t * d..(t + 1) * d]);
        hs[t * ds..(t + 1) * ds].copy_from_slice(&h);
    }
    Ok((Tensor::matrix(n, ds, hs)?, Tensor::matrix(n, d, ys)?))
}

/// Upper bound `‖A‖^k · ‖B‖ · ‖x‖` on the contribution of an input `k` steps
/// in the past.
pub fn contribution_bound(a_norm: f64, b_norm: f64, x_norm: f64, k: u32) -> Result<f64> {
    if !(a_norm > 0.0 && a_norm < 1.0) {
        return Err(param_err(format!("a_norm must lie in (0, 1), got {a_norm}")));
    }
    Ok(a_norm.powi(k as i32) * b_norm * x_norm)
}

/// `‖h_t‖` when `probe` is fed at step `t − k` into a zero state and zeros
/// follow.
pub fn empirical_contribution(p: &SsmParams, k: usize, probe: &[f64]) -> Result<f64> {
    let ds = p.state_dim();
    let d = p.feature_dim();
    if probe.len() != d {
        return Err(dim_err(format!("probe has length {}, expected {d}", probe.len())));
    }
    let zeros = vec![0.0; d];
    let mut h = vec![0.0; ds];
    let mut bx = vec![0.0; ds];
    let mut y = vec![0.0; d];
    step_in_place(p, &mut h, probe, &mut bx, &mut y);
    for _ in 0..k {
        step_in_place(p, &mut h, &zeros, &mut bx, &mut y);
    }
    Ok(l2_norm(&h))
}
