//! Note-block and attention building blocks.
//!
//! Each public function here evaluates the same graph helper the model uses,
//! so a block called on its own matches the value it takes inside a forward
//! pass.

use crate::autodiff::{EvalGraph, Graph};
use crate::error::{dim_err, param_err, Result};
use crate::memmamba::pool::{StatePool, StateSummary};
use crate::memmamba::FusionMethod;
use crate::tensor::Tensor;

/// Linear-plus-sigmoid importance scorer.
#[derive(Clone, Debug, PartialEq)]
pub struct Scorer {
    pub w: Tensor,
    pub b: f64,
}

impl Scorer {
    pub fn zeros(d: usize) -> Self {
        Self {
            w: Tensor::zeros(&[d]),
            b: 0.0,
        }
    }
}

/// Projections for one attention head. `wq` is `d_attn × d`, `wk` is
/// `d_attn × d_sum` and `wv` is `d × d_sum`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

impl AttnWeights {
    fn check(&self, x: &Tensor, d_sum: Option<usize>) -> Result<()> {
        let (qa, qd) = self.wq.dims2()?;
        let (ka, ks) = self.wk.dims2()?;
        let (vd, vs) = self.wv.dims2()?;
        if qd != x.len() || vd != x.len() || qa != ka || ks != vs {
            return Err(dim_err(format!(
                "attention weights {:?}/{:?}/{:?} do not fit input of {} dims",
                self.wq.shape(),
                self.wk.shape(),
                self.wv.shape(),
                x.len()
            )));
        }
        if let Some(ds) = d_sum {
            if ds != ks {
                return Err(dim_err(format!("summaries have {ds} dims, keys expect {ks}")));
            }
        }
        Ok(())
    }
}

/// Per-method fusion parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum FusionParams {
    Weighted { alpha_tok: f64, alpha_lay: f64 },
    Residual,
    /// `gate = σ(w·x + b)` with `w` of shape `d × d`.
    Gated { w: Tensor, b: Tensor },
    /// Per-channel taps for the token and layer contexts; the tap on `x`
    /// is fixed at 1.
    Conv1d { k_tok: Tensor, k_lay: Tensor },
    Elementwise,
}

impl FusionParams {
    pub fn method(&self) -> FusionMethod {
        match self {
            FusionParams::Weighted { .. } => FusionMethod::Weighted,
            FusionParams::Residual => FusionMethod::Residual,
            FusionParams::Gated { .. } => FusionMethod::Gated,
            FusionParams::Conv1d { .. } => FusionMethod::Conv1d,
            FusionParams::Elementwise => FusionMethod::Elementwise,
        }
    }
}

/// Fusion parameters as graph variables.
#[derive(Clone)]
pub(crate) enum FuseVars<V> {
    Weighted { tok: V, lay: V },
    Residual,
    Gated { w: V, b: V },
    Conv1d { tok: V, lay: V },
    Elementwise,
}

pub(crate) fn g_score<G: Graph>(g: &mut G, w: &G::Var, b: &G::Var, x: &G::Var) -> G::Var {
    let d = g.dot(w, x);
    let z = g.add(&d, b);
    g.sigmoid(&z)
}

pub(crate) fn g_attend<G: Graph>(
    g: &mut G,
    x: &G::Var,
    wq: &G::Var,
    keys: &[G::Var],
    values: &[G::Var],
) -> (G::Var, Vec<f64>) {
    let q = g.matvec(wq, x);
    let scale = 1.0 / (g.value(&q).len() as f64).sqrt();
    g.attend(&q, keys, values, scale)
}

/// Fuses available contexts into `x`. An absent context contributes
/// nothing; with both absent `x` is returned untouched.
pub(crate) fn g_fuse<G: Graph>(
    g: &mut G,
    fv: &FuseVars<G::Var>,
    x: &G::Var,
    c_tok: Option<&G::Var>,
    c_lay: Option<&G::Var>,
) -> G::Var {
    if c_tok.is_none() && c_lay.is_none() {
        return x.clone();
    }
    let sum = |g: &mut G, a: Option<&G::Var>, b: Option<&G::Var>| -> G::Var {
        match (a, b) {
            (Some(a), Some(b)) => g.add(a, b),
            (Some(a), None) | (None, Some(a)) => a.clone(),
            (None, None) => unreachable!(),
        }
    };
    match fv {
        FuseVars::Residual => {
            let c = sum(g, c_tok, c_lay);
            g.add(x, &c)
        }
        FuseVars::Weighted { tok, lay } => {
            let t = c_tok.map(|c| g.scale(c, tok));
            let l = c_lay.map(|c| g.scale(c, lay));
            let c = sum(g, t.as_ref(), l.as_ref());
            g.add(x, &c)
        }
        FuseVars::Conv1d { tok, lay } => {
            let t = c_tok.map(|c| g.mul(tok, c));
            let l = c_lay.map(|c| g.mul(lay, c));
            let c = sum(g, t.as_ref(), l.as_ref());
            g.add(x, &c)
        }
        FuseVars::Gated { w, b } => {
            let wx = g.matvec(w, x);
            let z = g.add(&wx, b);
            let gate = g.sigmoid(&z);
            let c = sum(g, c_tok, c_lay);
            let gc = g.mul(&gate, &c);
            g.add(x, &gc)
        }
        FuseVars::Elementwise => {
            let d = g.value(x).len();
            let ones = g.input(Tensor::filled(&[d], 1.0));
            let with_tok = match c_tok {
                Some(c) => g.add(&ones, c),
                None => ones,
            };
            let m = match c_lay {
                Some(c) => g.add(&with_tok, c),
                None => with_tok,
            };
            g.mul(x, &m)
        }
    }
}

fn check_scorer(x: &Tensor, s: &Scorer) -> Result<()> {
    if s.w.len() != x.len() {
        return Err(dim_err(format!(
            "scorer has {} weights for {} inputs",
            s.w.len(),
            x.len()
        )));
    }
    Ok(())
}

fn score(x: &Tensor, s: &Scorer) -> Result<f64> {
    check_scorer(x, s)?;
    let mut g = EvalGraph::detached();
    let w = g.input(s.w.clone());
    let b = g.input(Tensor::scalar(s.b));
    let xv = g.input(x.clone());
    let out = g_score(&mut g, &w, &b, &xv);
    Ok(g.value(&out).data()[0])
}

/// Importance of the current token, used to decide note insertion.
pub fn token_importance(x: &Tensor, scorer: &Scorer) -> Result<f64> {
    score(x, scorer)
}

/// Importance of the previous layer output, used to detect forgetting.
pub fn state_importance(z: &Tensor, scorer: &Scorer) -> Result<f64> {
    score(z, scorer)
}

pub fn summarize(x: &Tensor, proj: &Tensor) -> Result<Tensor> {
    let (_, cols) = proj.dims2()?;
    if cols != x.len() {
        return Err(dim_err(format!(
            "projection expects {cols} inputs, got {}",
            x.len()
        )));
    }
    let mut g = EvalGraph::detached();
    let p = g.input(proj.clone());
    let xv = g.input(x.clone());
    let out = g.matvec(&p, &xv);
    Ok(g.value(&out).clone())
}

fn attend_summaries(x: &Tensor, summaries: &[&StateSummary], w: &AttnWeights) -> Result<Tensor> {
    w.check(x, summaries.first().map(|s| s.vec.len()))?;
    if summaries.is_empty() {
        return Ok(Tensor::zeros(&[x.len()]));
    }
    if let Some(bad) = summaries.iter().find(|s| s.vec.len() != summaries[0].vec.len()) {
        return Err(dim_err(format!("mixed summary widths ({})", bad.vec.len())));
    }
    let mut g = EvalGraph::detached();
    let xv = g.input(x.clone());
    let wq = g.input(w.wq.clone());
    let wk = g.input(w.wk.clone());
    let wv = g.input(w.wv.clone());
    let mut keys = Vec::with_capacity(summaries.len());
    let mut values = Vec::with_capacity(summaries.len());
    for s in summaries {
        let sv = g.input(s.vec.clone());
        keys.push(g.matvec(&wk, &sv));
        values.push(g.matvec(&wv, &sv));
    }
    let (out, _) = g_attend(&mut g, &xv, &wq, &keys, &values);
    Ok(g.value(&out).clone())
}

/// Attention from `x` to every summary in the pool; zero for an empty pool.
pub fn cross_token_attention(x: &Tensor, pool: &StatePool, w: &AttnWeights) -> Result<Tensor> {
    let entries: Vec<&StateSummary> = pool.entries().iter().collect();
    attend_summaries(x, &entries, w)
}

/// Attention from `x` to the concatenated entries of several pools.
pub fn cross_layer_attention(x: &Tensor, pools: &[&StatePool], w: &AttnWeights) -> Result<Tensor> {
    let entries: Vec<&StateSummary> = pools.iter().flat_map(|p| p.entries()).collect();
    attend_summaries(x, &entries, w)
}

pub fn fuse(
    x: &Tensor,
    c_token: &Tensor,
    c_layer: &Tensor,
    method: FusionMethod,
    params: &FusionParams,
) -> Result<Tensor> {
    if params.method() != method {
        return Err(param_err(format!(
            "fusion method {} given parameters for {}",
            method.name(),
            params.method().name()
        )));
    }
    let d = x.len();
    if c_token.len() != d || c_layer.len() != d {
        return Err(dim_err("fusion inputs must share one width"));
    }
    let mut g = EvalGraph::detached();
    let fv = match params {
        FusionParams::Weighted { alpha_tok, alpha_lay } => FuseVars::Weighted {
            tok: g.input(Tensor::scalar(*alpha_tok)),
            lay: g.input(Tensor::scalar(*alpha_lay)),
        },
        FusionParams::Residual => FuseVars::Residual,
        FusionParams::Gated { w, b } => {
            if w.shape() != [d, d] || b.len() != d {
                return Err(dim_err("gate parameters must be d×d and d"));
            }
            FuseVars::Gated {
                w: g.input(w.clone()),
                b: g.input(b.clone()),
            }
        }
        FusionParams::Conv1d { k_tok, k_lay } => {
            if k_tok.len() != d || k_lay.len() != d {
                return Err(dim_err("convolution taps must have d entries"));
            }
            FuseVars::Conv1d {
                tok: g.input(k_tok.clone()),
                lay: g.input(k_lay.clone()),
            }
        }
        FusionParams::Elementwise => FuseVars::Elementwise,
    };
    let xv = g.input(x.clone());
    let ct = g.input(c_token.clone());
    let cl = g.input(c_layer.clone());
    let out = g_fuse(&mut g, &fv, &xv, Some(&ct), Some(&cl));
    Ok(g.value(&out).clone())
}
