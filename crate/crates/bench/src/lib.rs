//! Forward-pass latency scaling for MemMamba against a quadratic
//! self-attention layer of matched width.

use std::hint::black_box;
use std::io::Write;
use std::time::{Duration, Instant};

use memmamba::numerics::softmax_into;
use memmamba::{seed, Error, MemMamba, ModelConfig, Result};
use rand::Rng;

pub const CSV_HEADER: &str = "model_id,seq_len,wall_ms_median,peak_state_bytes";
pub const LONG_CSV_HEADER: &str = "model_id,seq_len,metric,value";

/// Shortest interval a single timed sample may cover. Below this the
/// sample repeats the forward pass until it is long enough.
pub const MIN_SAMPLE: Duration = Duration::from_millis(2);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    MemMamba,
    QuadraticBaseline,
}

impl ModelKind {
    pub fn id(self) -> &'static str {
        match self {
            ModelKind::MemMamba => "memmamba",
            ModelKind::QuadraticBaseline => "quadratic_baseline",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub model_id: String,
    pub seq_len: usize,
    /// Median milliseconds per forward pass.
    pub wall_ms: f64,
    pub peak_state_bytes: usize,
    pub samples: usize,
    /// Forward passes per timed sample; above 1 when the pass alone was
    /// too short to time.
    pub repeats: usize,
}

#[derive(Clone, Debug)]
pub struct BenchSettings {
    pub model: ModelConfig,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                layers: 4,
                d_model: 32,
                d_state: 16,
                d_sum: 32,
                d_attn: 16,
                pool_capacity: 16,
                period: 2,
                lookback: 2,
                tau1: 0.3,
                tau2: 0.0,
                ..ModelConfig::default()
            },
            warmup: 1,
            seed: 123,
        }
    }
}

/// One causal softmax attention layer over learned-free random projections.
/// Every position scores against its whole prefix, so the cost is
/// `O(n^2 d)` and the key/value cache grows with `n`.
pub struct QuadraticBaseline {
    d: usize,
    embed: Vec<f64>,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
}

impl QuadraticBaseline {
    pub fn new(d: usize, vocab: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, "baseline");
        let scale = 1.0 / (d as f64).sqrt();
        let mut draw = |len: usize, s: f64| (0..len).map(|_| rng.gen_range(-1.0..1.0) * s).collect::<Vec<f64>>();
        Self {
            d,
            embed: draw(vocab * d, 1.0),
            wq: draw(d * d, scale),
            wk: draw(d * d, scale),
            wv: draw(d * d, scale),
        }
    }

    fn project(w: &[f64], x: &[f64], out: &mut [f64]) {
        let d = x.len();
        for (o, row) in out.iter_mut().zip(w.chunks_exact(d)) {
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    /// Returns the attended outputs (`n x d`, row-major) and the bytes held
    /// in the key/value cache at the end of the pass.
    pub fn forward(&self, tokens: &[usize]) -> (Vec<f64>, usize) {
        let (n, d) = (tokens.len(), self.d);
        let vocab = self.embed.len() / d;
        let mut keys = vec![0.0; n * d];
        let mut values = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        let mut q = vec![0.0; d];
        let mut scores = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        let scale = 1.0 / (d as f64).sqrt();
        for (i, &tok) in tokens.iter().enumerate() {
            let x = &self.embed[(tok % vocab) * d..][..d];
            Self::project(&self.wq, x, &mut q);
            Self::project(&self.wk, x, &mut keys[i * d..(i + 1) * d]);
            Self::project(&self.wv, x, &mut values[i * d..(i + 1) * d]);
            scores.clear();
            scores.extend(keys[..(i + 1) * d].chunks_exact(d).map(|k| scale * k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>()));
            weights.resize(i + 1, 0.0);
            softmax_into(&scores, 1.0, &mut weights);
            let o = &mut out[i * d..(i + 1) * d];
            for (w, v) in weights.iter().zip(values.chunks_exact(d)) {
                for (oj, vj) in o.iter_mut().zip(v) {
                    *oj += w * vj;
                }
            }
        }
        (out, 2 * n * d * std::mem::size_of::<f64>())
    }
}

enum Runner {
    MemMamba(MemMamba),
    Baseline(QuadraticBaseline),
}

impl Runner {
    fn run(&self, tokens: &[usize]) -> Result<usize> {
        match self {
            Runner::MemMamba(model) => {
                let mut session = model.session();
                for &t in tokens {
                    black_box(session.step(t)?);
                }
                Ok(session.peak_state_bytes())
            }
            Runner::Baseline(b) => {
                let (out, bytes) = b.forward(tokens);
                black_box(out);
                Ok(bytes)
            }
        }
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

pub fn benchmark_forward(kind: ModelKind, lengths: &[usize], samples: usize) -> Result<Vec<BenchRecord>> {
    benchmark_forward_with(kind, lengths, samples, &BenchSettings::default())
}

pub fn benchmark_forward_with(
    kind: ModelKind,
    lengths: &[usize],
    samples: usize,
    settings: &BenchSettings,
) -> Result<Vec<BenchRecord>> {
    if samples == 0 {
        return Err(Error::Parameter("samples must be at least 1".into()));
    }
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(Error::Parameter("lengths must be non-empty and positive".into()));
    }
    if lengths.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Parameter("lengths must be sorted ascending".into()));
    }
    let cfg = &settings.model;
    let runner = match kind {
        ModelKind::MemMamba => Runner::MemMamba(MemMamba::new(cfg.clone())?),
        ModelKind::QuadraticBaseline => Runner::Baseline(QuadraticBaseline::new(cfg.d_model, cfg.vocab, settings.seed)),
    };
    let mut rng = seed::rng(settings.seed, "bench");
    let mut records = Vec::with_capacity(lengths.len());
    for &n in lengths {
        let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(0..cfg.vocab)).collect();
        for _ in 0..settings.warmup {
            runner.run(&tokens)?;
        }
        let start = Instant::now();
        let peak = runner.run(&tokens)?;
        let probe = start.elapsed();
        let repeats = if probe >= MIN_SAMPLE {
            1
        } else {
            (MIN_SAMPLE.as_secs_f64() / probe.as_secs_f64().max(1e-9)).ceil() as usize
        };
        let mut times = Vec::with_capacity(samples);
        for _ in 0..samples {
            let start = Instant::now();
            for _ in 0..repeats {
                runner.run(&tokens)?;
            }
            times.push(start.elapsed().as_secs_f64() * 1e3 / repeats as f64);
        }
        records.push(BenchRecord {
            model_id: kind.id().to_string(),
            seq_len: n,
            wall_ms: median(&mut times),
            peak_state_bytes: peak,
            samples,
            repeats,
        });
    }
    Ok(records)
}

/// Least-squares slope of `ln(wall_ms)` against `ln(seq_len)`.
pub fn fit_scaling_exponent(records: &[BenchRecord]) -> Result<f64> {
    let mut lengths: Vec<usize> = records.iter().map(|r| r.seq_len).collect();
    lengths.sort_unstable();
    lengths.dedup();
    if lengths.len() < 4 {
        return Err(Error::Parameter(format!("need at least 4 distinct lengths, got {}", lengths.len())));
    }
    if records.iter().any(|r| !(r.wall_ms > 0.0) || !r.wall_ms.is_finite()) {
        return Err(Error::Parameter("wall_ms must be positive and finite".into()));
    }
    let pts: Vec<(f64, f64)> = records.iter().map(|r| ((r.seq_len as f64).ln(), r.wall_ms.ln())).collect();
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

pub fn write_csv<W: Write>(mut w: W, records: &[BenchRecord]) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{},{},{:.6},{}", r.model_id, r.seq_len, r.wall_ms, r.peak_state_bytes)?;
    }
    Ok(())
}

/// One row per (record, metric), the shape plotting tools expect.
pub fn write_long_csv<W: Write>(mut w: W, records: &[BenchRecord]) -> std::io::Result<()> {
    writeln!(w, "{LONG_CSV_HEADER}")?;
    for r in records {
        let id = (&r.model_id, r.seq_len);
        writeln!(w, "{},{},wall_ms_median,{:.6}", id.0, id.1, r.wall_ms)?;
        writeln!(w, "{},{},peak_state_bytes,{}", id.0, id.1, r.peak_state_bytes)?;
        writeln!(w, "{},{},samples,{}", id.0, id.1, r.samples)?;
        writeln!(w, "{},{},repeats,{}", id.0, id.1, r.repeats)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planted(f: impl Fn(f64) -> f64) -> Vec<BenchRecord> {
        [256, 512, 1024, 2048, 4096]
            .into_iter()
            .map(|n| BenchRecord {
                model_id: "planted".into(),
                seq_len: n,
                wall_ms: f(n as f64),
                peak_state_bytes: 0,
                samples: 1,
                repeats: 1,
            })
            .collect()
    }

    #[test]
    fn planted_linear_exponent() {
        let e = fit_scaling_exponent(&planted(|n| 3e-4 * n)).unwrap();
        assert!((e - 1.0).abs() < 1e-6, "{e}");
    }

    #[test]
    fn planted_quadratic_exponent() {
        let e = fit_scaling_exponent(&planted(|n| 7e-8 * n * n)).unwrap();
        assert!((e - 2.0).abs() < 1e-6, "{e}");
    }

    #[test]
    fn too_few_lengths_rejected() {
        let mut r = planted(|n| n);
        r.truncate(3);
        assert!(matches!(fit_scaling_exponent(&r), Err(Error::Parameter(_))));
    }

    #[test]
    fn unsorted_lengths_rejected() {
        let r = benchmark_forward(ModelKind::QuadraticBaseline, &[64, 32], 1);
        assert!(matches!(r, Err(Error::Parameter(_))));
    }

    #[test]
    fn baseline_rows_are_convex_combinations() {
        let b = QuadraticBaseline::new(4, 8, 1);
        let (out, bytes) = b.forward(&[3]);
        let mut v = vec![0.0; 4];
        QuadraticBaseline::project(&b.wv, &b.embed[12..16], &mut v);
        for (o, e) in out.iter().zip(&v) {
            assert!((o - e).abs() < 1e-12);
        }
        assert_eq!(bytes, 2 * 4 * 8);
    }

    #[test]
    fn short_passes_are_repeated() {
        let r = benchmark_forward(ModelKind::QuadraticBaseline, &[4], 3).unwrap();
        assert!(r[0].repeats > 1);
        assert!(r[0].wall_ms > 0.0);
    }

    #[test]
    fn csv_layouts() {
        let r = planted(|n| n);
        let mut a = Vec::new();
        write_csv(&mut a, &r).unwrap();
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), 6);
        let mut b = Vec::new();
        write_long_csv(&mut b, &r).unwrap();
        assert_eq!(String::from_utf8(b).unwrap().lines().count(), 1 + 4 * 5);
    }
}
