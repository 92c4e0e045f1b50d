//! Memory-fidelity metrics over layer traces.
//!
//! ETMF measures how well each position's output distribution, mapped back
//! through the embedding table, reconstructs the input token. ECLMF measures
//! how linearly recoverable layer `l + G` is from layer `l`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, param_err, Result};
use crate::memmamba::LayerTrace;
use crate::numerics::{cosine_similarity, matvec_into, ridge_fit, softmax_into};
use crate::tensor::Tensor;

pub const ECLMF_EPS: f64 = 1e-6;
pub const DEFAULT_LAMBDA: f64 = 1e-4;
pub const DEFAULT_DELTAS: [usize; 3] = [8, 16, 32];
pub const DEFAULT_GAPS: [usize; 3] = [2, 5, 10];

fn check_tables(trace: &LayerTrace, embedding: &Tensor, w_out: &Tensor) -> Result<()> {
    let (v, d) = embedding.dims2()?;
    if w_out.shape() != [v, d] || trace.width() != d {
        return Err(dim_err(format!(
            "embedding {:?}, output {:?} and trace width {} disagree",
            embedding.shape(),
            w_out.shape(),
            trace.width()
        )));
    }
    if let Some(&t) = trace.tokens.iter().find(|&&t| t >= v) {
        return Err(dim_err(format!("token {t} outside embedding table of {v}")));
    }
    if trace.tokens.len() != trace.seq_len() {
        return Err(dim_err("trace tokens and hidden states disagree in length"));
    }
    Ok(())
}

/// Output-distribution-weighted embedding `Σ_v p(v)·E[v]` at every position
/// of the top layer.
fn reconstructions(trace: &LayerTrace, embedding: &Tensor, w_out: &Tensor, temperature: f64) -> Vec<Vec<f64>> {
    let (v, d) = (embedding.rows(), embedding.cols());
    let top = trace.layers();
    let mut logits = vec![0.0; v];
    let mut p = vec![0.0; v];
    (0..trace.seq_len())
        .map(|j| {
            matvec_into(w_out.data(), v, d, trace.h(top, j), &mut logits);
            softmax_into(&logits, temperature, &mut p);
            let mut out = vec![0.0; d];
            for (pv, row) in p.iter().zip(embedding.data().chunks(d)) {
                for (o, &e) in out.iter_mut().zip(row) {
                    *o += pv * e;
                }
            }
            out
        })
        .collect()
}

/// Mean cosine between each input embedding and the reconstruction `delta`
/// positions later, over every trace.
pub fn etmf_delta(traces: &[LayerTrace], embedding: &Tensor, w_out: &Tensor, temperature: f64, delta: usize) -> Result<f64> {
    if traces.is_empty() {
        return Err(param_err("no traces"));
    }
    if !(temperature > 0.0) {
        return Err(param_err("temperature must be positive"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for trace in traces {
        check_tables(trace, embedding, w_out)?;
        let n = trace.seq_len();
        if n <= delta {
            return Err(param_err(format!("sequence of {n} tokens is too short for delta {delta}")));
        }
        let rec = reconstructions(trace, embedding, w_out, temperature);
        for i in 0..n - delta {
            sum += cosine_similarity(embedding.row(trace.tokens[i]), &rec[i + delta])?;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

pub fn etmf(traces: &[LayerTrace], embedding: &Tensor, w_out: &Tensor, temperature: f64) -> Result<f64> {
    etmf_delta(traces, embedding, w_out, temperature, 0)
}

fn stack_layer(traces: &[LayerTrace], l: usize) -> Result<Tensor> {
    let d = traces[0].width();
    let mut data = Vec::new();
    let mut rows = 0;
    for t in traces {
        if t.width() != d {
            return Err(dim_err("traces have different widths"));
        }
        for j in 0..t.seq_len() {
            data.extend_from_slice(t.h(l, j));
        }
        rows += t.seq_len();
    }
    Tensor::matrix(rows, d, data)
}

/// Score `1 − ‖Y − XW‖_F / (‖X‖_F + ε)` of the ridge map from layer `l`
/// to layer `l + gap`, averaged over every valid `l`.
pub fn eclmf(traces: &[LayerTrace], gap: usize, lambda: f64) -> Result<f64> {
    let Some(first) = traces.first() else {
        return Err(param_err("no traces"));
    };
    let layers = first.layers();
    if gap == 0 || layers <= gap {
        return Err(param_err(format!("gap {gap} needs more than {layers} layers")));
    }
    if traces.iter().any(|t| t.layers() != layers) {
        return Err(dim_err("traces have different depths"));
    }
    let scores: Vec<f64> = (1..=layers - gap)
        .map(|l| {
            let x = stack_layer(traces, l)?;
            let y = stack_layer(traces, l + gap)?;
            Ok(eclmf_pair(&x, &y, lambda)?)
        })
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// The reconstruction score for one `(X, Y)` pair.
pub fn eclmf_pair(x: &Tensor, y: &Tensor, lambda: f64) -> Result<f64> {
    let fit = ridge_fit(x, y, lambda)?;
    Ok(1.0 - fit.residual_fro / (x.norm() + ECLMF_EPS))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FidelitySettings {
    pub temperature: f64,
    pub lambda: f64,
    pub deltas: Vec<usize>,
    pub gaps: Vec<usize>,
}

impl Default for FidelitySettings {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            lambda: DEFAULT_LAMBDA,
            deltas: DEFAULT_DELTAS.to_vec(),
            gaps: DEFAULT_GAPS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub etmf: f64,
    pub etmf_delta: BTreeMap<usize, f64>,
    /// Gaps that do not fit the model depth are left out.
    pub eclmf: BTreeMap<usize, f64>,
    pub sample_count: usize,
}

impl FidelityReport {
    pub fn compute(traces: &[LayerTrace], embedding: &Tensor, w_out: &Tensor, s: &FidelitySettings) -> Result<Self> {
        let etmf = etmf(traces, embedding, w_out, s.temperature)?;
        let mut deltas = BTreeMap::new();
        for &d in &s.deltas {
            deltas.insert(d, etmf_delta(traces, embedding, w_out, s.temperature, d)?);
        }
        let layers = traces[0].layers();
        let mut gaps = BTreeMap::new();
        for &g in s.gaps.iter().filter(|&&g| g > 0 && g < layers) {
            gaps.insert(g, eclmf(traces, g, s.lambda)?);
        }
        Ok(Self {
            etmf,
            etmf_delta: deltas,
            eclmf: gaps,
            sample_count: traces.len(),
        })
    }

    /// Mean over the gaps present, or `None` if the model is too shallow.
    pub fn mean_eclmf(&self) -> Option<f64> {
        (!self.eclmf.is_empty()).then(|| self.eclmf.values().sum::<f64>() / self.eclmf.len() as f64)
    }

    /// Rows of `model_id,metric,delta_or_gap,value`, without a header.
    pub fn csv_rows(&self, model_id: &str) -> Vec<String> {
        let mut rows = vec![format!("{model_id},etmf,0,{:e}", self.etmf)];
        for (d, v) in &self.etmf_delta {
            rows.push(format!("{model_id},etmf_delta,{d},{v:e}"));
        }
        for (g, v) in &self.eclmf {
            rows.push(format!("{model_id},eclmf,{g},{v:e}"));
        }
        rows
    }
}

pub const CSV_HEADER: &str = "model_id,metric,delta_or_gap,value";
