//! Loss, AdamW, the training loop, perplexity and finite-difference checks.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore};
use crate::error::{dim_err, param_err, Error, Result};
use crate::memmamba::{MemMamba, ModelConfig};
use crate::numerics::log_sum_exp;
use crate::seed;
use crate::tasks::{gen_copy, gen_passkey, TaskSample};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub accum_steps: usize,
    pub steps: usize,
    pub seed: u64,
    pub context_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.1,
            clip_norm: 1.0,
            accum_steps: 4,
            steps: 0,
            seed: 123,
            context_len: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(param_err("lr and clip_norm must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(param_err("weight_decay must be non-negative"));
        }
        if self.accum_steps == 0 || self.context_len < 2 {
            return Err(param_err("accum_steps must be ≥ 1 and context_len ≥ 2"));
        }
        Ok(())
    }
}

/// Mean negative log-softmax at the target of each row.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (n, v) = logits.dims2()?;
    if n != targets.len() || n == 0 {
        return Err(dim_err(format!("{n} logit rows for {} targets", targets.len())));
    }
    let mut sum = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::Input(format!("target {t} outside vocab {v}")));
        }
        let row = logits.row(i);
        sum += log_sum_exp(row) - row[t];
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let z = params.zeros_like().tensors;
        Self {
            m: z.clone(),
            v: z,
            t: 0,
        }
    }
}

/// Clips the global gradient norm, applies decoupled weight decay, then a
/// bias-corrected Adam update. Returns the pre-clip norm.
pub fn optimizer_step(params: &mut [Tensor], grads: &Gradients, cfg: &TrainConfig, st: &mut AdamState) -> Result<f64> {
    let n = params.len();
    if grads.tensors.len() != n || st.m.len() != n || st.v.len() != n {
        return Err(dim_err("parameters, gradients and moments differ in count"));
    }
    for i in 0..n {
        let s = params[i].shape();
        if grads.tensors[i].shape() != s || st.m[i].shape() != s || st.v[i].shape() != s {
            return Err(dim_err(format!("shape mismatch at parameter {i}")));
        }
    }
    let norm = grads.global_norm();
    let scale = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
    st.t += 1;
    let bc1 = 1.0 - BETA1.powi(st.t as i32);
    let bc2 = 1.0 - BETA2.powi(st.t as i32);
    for i in 0..n {
        let g = grads.tensors[i].data();
        let m = st.m[i].data_mut();
        let v = st.v[i].data_mut();
        for (j, p) in params[i].data_mut().iter_mut().enumerate() {
            let gj = g[j] * scale;
            *p -= cfg.lr * cfg.weight_decay * *p;
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
            *p -= cfg.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + ADAM_EPS);
        }
    }
    Ok(norm)
}

/// Source of training sequences.
#[derive(Clone, Copy, Debug)]
pub enum TrainData<'a> {
    Passkey { vocab: usize },
    Copy { payload_len: usize, vocab: usize },
    /// Random windows of a token stream, next-token loss at every position.
    Corpus(&'a [usize]),
}

impl TrainData<'_> {
    pub fn example(&self, context_len: usize, seed: u64) -> Result<TaskSample> {
        match *self {
            TrainData::Passkey { vocab } => gen_passkey(context_len, vocab, seed),
            TrainData::Copy { payload_len, vocab } => gen_copy(context_len, payload_len, vocab, seed),
            TrainData::Corpus(tokens) => {
                if tokens.len() <= context_len {
                    return Err(param_err(format!(
                        "corpus of {} tokens is too short for context {context_len}",
                        tokens.len()
                    )));
                }
                let start = seed::rng(seed, "window").gen_range(0..tokens.len() - context_len);
                let w = &tokens[start..=start + context_len];
                Ok(TaskSample {
                    tokens: w[..context_len].to_vec(),
                    target: w[1..].to_vec(),
                    answer_pos: 0,
                    meta: Default::default(),
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

pub const LOG_CSV_HEADER: &str = "step,loss,grad_norm,lr";

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}\n", self.step, self.loss, self.grad_norm, self.lr)
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_CSV_HEADER}\n");
    rows.iter().for_each(|r| s.push_str(&r.csv()));
    s
}

/// Trains a fresh model from `model_cfg`. Each step averages `accum_steps`
/// sequences, whose gradients are computed in parallel and summed in a
/// fixed order. Rows are also streamed to `log` if given.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: TrainData<'_>,
    log: Option<&mut dyn Write>,
) -> Result<(MemMamba, Vec<LogRow>)> {
    let model = MemMamba::new(model_cfg.clone())?;
    train_from(model, cfg, data, log)
}

pub fn train_from(
    mut model: MemMamba,
    cfg: &TrainConfig,
    data: TrainData<'_>,
    mut log: Option<&mut dyn Write>,
) -> Result<(MemMamba, Vec<LogRow>)> {
    cfg.validate()?;
    let data_seed = seed::derive(cfg.seed, "data");
    let mut adam = AdamState::new(model.params());
    let mut rows = Vec::with_capacity(cfg.steps);
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{LOG_CSV_HEADER}")?;
    }
    for step in 0..cfg.steps {
        let samples = (0..cfg.accum_steps)
            .map(|k| data.example(cfg.context_len, seed::derive_indexed(data_seed, "step", (step * cfg.accum_steps + k) as u64)))
            .collect::<Result<Vec<_>>>()?;
        let parts = samples
            .par_iter()
            .map(|s| {
                let targets = match data {
                    TrainData::Corpus(_) => s.target.iter().copied().enumerate().collect(),
                    _ => s.loss_targets(),
                };
                let (loss, g, _) = model.loss_and_grad(&s.tokens, &targets, None)?;
                Ok((loss, g))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut loss = 0.0;
        let mut grads = model.params().zeros_like();
        for (l, g) in &parts {
            loss += l;
            grads.add_assign(g);
        }
        let k = cfg.accum_steps as f64;
        loss /= k;
        grads.scale(1.0 / k);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        for (id, name, _) in model.params().iter() {
            if !grads.get(id).is_finite() {
                return Err(Error::NonFiniteGradient { param: name.to_string() });
            }
        }
        let grad_norm = optimizer_step(model.tensors_mut(), &grads, cfg, &mut adam)?;
        let row = LogRow {
            step,
            loss,
            grad_norm,
            lr: cfg.lr,
        };
        if let Some(w) = log.as_deref_mut() {
            w.write_all(row.csv().as_bytes())?;
        }
        rows.push(row);
    }
    Ok((model, rows))
}

/// `exp` of the mean next-token cross-entropy over non-overlapping windows
/// of `context_len` tokens. Each window predicts its tokens after the
/// first, so windows shorter than two tokens are skipped.
pub fn perplexity(model: &MemMamba, tokens: &[usize], context_len: usize) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::Input("corpus needs at least two tokens".into()));
    }
    let windows: Vec<&[usize]> = crate::tasks::windows(tokens, context_len)?.filter(|w| w.len() >= 2).collect();
    if windows.is_empty() {
        return Err(param_err("no window holds two tokens"));
    }
    let sums = windows
        .par_iter()
        .map(|w| {
            let targets: Vec<(usize, usize)> = (0..w.len() - 1).map(|i| (i, w[i + 1])).collect();
            let (mean, _) = model.loss(&w[..w.len() - 1], &targets, None)?;
            Ok((mean * targets.len() as f64, targets.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (total, count) = sums.iter().fold((0.0, 0usize), |(s, c), (x, n)| (s + x, c + n));
    Ok((total / count as f64).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<GradCheckEntry>,
}

pub const FD_STEP: f64 = 1e-5;
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

/// Compares every gradient entry with a central difference of step `h`,
/// holding the gate decisions of the unperturbed pass fixed.
pub fn gradient_check(model: &MemMamba, tokens: &[usize], targets: &[(usize, usize)], h: f64) -> Result<GradCheckReport> {
    let (_, grads, record) = model.loss_and_grad(tokens, targets, None)?;
    let coords: Vec<(usize, usize)> = model
        .params()
        .tensors()
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |j| (p, j)))
        .collect();
    let entries = coords
        .par_iter()
        .map_init(
            || model.clone(),
            |m, &(p, j)| {
                let orig = m.tensors_mut()[p].data()[j];
                m.tensors_mut()[p].data_mut()[j] = orig + h;
                let (up, _) = m.loss(tokens, targets, Some(&record))?;
                m.tensors_mut()[p].data_mut()[j] = orig - h;
                let (down, _) = m.loss(tokens, targets, Some(&record))?;
                m.tensors_mut()[p].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.tensors[p].data()[j];
                Ok(GradCheckEntry {
                    param: m.params().name(crate::autodiff::ParamId(p)).to_string(),
                    index: j,
                    analytic,
                    numeric,
                    rel_err: relative_error(analytic, numeric),
                })
            },
        )
        .collect::<Result<Vec<_>>>()?;
    let worst = entries.iter().cloned().fold(None::<GradCheckEntry>, |w, e| match w {
        Some(w) if w.rel_err >= e.rel_err => Some(w),
        _ => Some(e),
    });
    Ok(GradCheckReport {
        checked: entries.len(),
        max_rel_err: worst.as_ref().map_or(0.0, |w| w.rel_err),
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memmamba::{FusionMethod, PoolPolicy};

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 2,
            d_model: 8,
            d_state: 8,
            d_sum: 6,
            d_attn: 4,
            pool_capacity: 4,
            period: 2,
            lookback: 1,
            vocab: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let l = Tensor::matrix(1, 2, vec![0.0, 3f64.ln()]).unwrap();
        assert!((cross_entropy(&l, &[1]).unwrap() + 0.75f64.ln()).abs() < 1e-12);
        let u = Tensor::zeros(&[3, 7]);
        assert!((cross_entropy(&u, &[0, 3, 6]).unwrap() - 7f64.ln()).abs() < 1e-12);
        let sharp = Tensor::matrix(1, 3, vec![0.0, 800.0, 0.0]).unwrap();
        assert!(cross_entropy(&sharp, &[1]).unwrap() < 1e-300);
        assert!(cross_entropy(&u, &[0, 3, 7]).is_err());
        assert!(cross_entropy(&u, &[0]).is_err());
    }

    fn one_param(v: Vec<f64>) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(v));
        p
    }

    #[test]
    fn adamw_contract() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = one_param(vec![1.0, -2.0]);
        let g = p.zeros_like();
        let mut st = AdamState::new(&p);
        optimizer_step(p.tensors_mut(), &g, &cfg, &mut st).unwrap();
        assert_eq!(p.tensors()[0].data(), &[1.0, -2.0]);

        let cfg = TrainConfig::default();
        optimizer_step(p.tensors_mut(), &g, &cfg, &mut st).unwrap();
        assert_eq!(p.tensors()[0].data(), &[1.0 * (1.0 - 1e-5), -2.0 * (1.0 - 1e-5)]);

        let mut g = p.zeros_like();
        g.tensors[0] = Tensor::vector(vec![6.0, 8.0]);
        let mut st = AdamState::new(&p);
        assert_eq!(optimizer_step(p.tensors_mut(), &g, &cfg, &mut st).unwrap(), 10.0);
        // First bias-corrected step moves each coordinate by lr·sign(g).
        let mut clipped = g.clone();
        clipped.scale(0.1);
        assert!((clipped.global_norm() - 1.0).abs() < 1e-12);
        let want = 1.0 * (1.0 - 1e-5) * (1.0 - 1e-5) - 1e-4 * 0.6 / (0.6 + ADAM_EPS);
        assert!((p.tensors()[0].data()[0] - want).abs() < 1e-15);

        let mut bad = AdamState::new(&one_param(vec![0.0]));
        assert!(optimizer_step(p.tensors_mut(), &g, &cfg, &mut bad).is_err());
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let cfg = TrainConfig {
            steps: 0,
            context_len: 10,
            ..TrainConfig::default()
        };
        let (m, rows) = train(&tiny(), &cfg, TrainData::Passkey { vocab: 16 }, None).unwrap();
        assert!(rows.is_empty());
        assert_eq!(m.params(), MemMamba::new(tiny()).unwrap().params());
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let cfg = TrainConfig {
            steps: 3,
            context_len: 10,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let data = TrainData::Copy { payload_len: 2, vocab: 16 };
        let mut log = Vec::new();
        let (a, ra) = train(&tiny(), &cfg, data, Some(&mut log)).unwrap();
        let (b, rb) = train(&tiny(), &cfg, data, None).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.params(), b.params());
        assert_eq!(String::from_utf8(log).unwrap(), log_csv(&ra));
    }

    #[test]
    fn divergence_reports_the_step() {
        let cfg = TrainConfig {
            steps: 3,
            context_len: 10,
            ..TrainConfig::default()
        };
        let mut m = MemMamba::new(tiny()).unwrap();
        let id = m.params().id("out").unwrap();
        m.tensors_mut()[id.0].data_mut()[0] = f64::NAN;
        let err = train_from(m, &cfg, TrainData::Passkey { vocab: 16 }, None).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 0, .. }), "{err}");
    }

    #[test]
    fn corpus_perplexity_limits() {
        let m = MemMamba::new(ModelConfig { vocab: 256, ..tiny() }).unwrap();
        let mut zeroed = m.clone();
        let id = zeroed.params().id("out").unwrap();
        zeroed.tensors_mut()[id.0] = Tensor::zeros(&[256, 8]);
        let toks: Vec<usize> = (0..300).map(|i| (i * 37) % 256).collect();
        assert!((perplexity(&zeroed, &toks, 50).unwrap() - 256.0).abs() < 1e-9);
        assert!(perplexity(&m, &toks, 50).unwrap().is_finite());
        assert!(perplexity(&m, &[1], 50).is_err());
    }

    #[test]
    fn gradient_check_on_every_fusion_method() {
        for fusion in FusionMethod::ALL {
            let cfg = ModelConfig {
                fusion,
                tau1: 0.3,
                tau2: 0.3,
                pool_policy: PoolPolicy::Priority,
                ..tiny()
            };
            let m = MemMamba::new(cfg).unwrap();
            let toks: Vec<usize> = (0..12).map(|i| (i * 5 + 3) % 16).collect();
            let targets: Vec<(usize, usize)> = (0..11).map(|i| (i, toks[i + 1])).collect();
            let r = gradient_check(&m, &toks, &targets, FD_STEP).unwrap();
            assert_eq!(r.checked, m.params().numel());
            assert!(r.max_rel_err < 1e-4, "{fusion:?}: {:?}", r.worst);
        }
    }
}
