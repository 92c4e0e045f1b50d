use std::fs;
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use memmamba::fidelity::{self, FidelityReport};
use memmamba::tasks::{self, PASSKEY_CSV_HEADER};
use memmamba::training::{self, TrainData};
use memmamba::{checkpoint, seed, theory, FusionMethod, MemMamba, ModelConfig, Pooling};
use memmamba_bench::{benchmark_forward_with, BenchSettings, ModelKind};
use serde::Serialize;

use crate::config::{RunConfig, TaskKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepAxis {
    Fusion,
    Pooling,
    PoolCapacity,
    Window,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Fusion => "fusion",
            SweepAxis::Pooling => "pooling",
            SweepAxis::PoolCapacity => "pool_capacity",
            SweepAxis::Window => "window",
        }
    }
}

/// Raised when an evaluation command has no checkpoint to read.
#[derive(Debug, thiserror::Error)]
#[error("missing checkpoint: {0}")]
pub struct MissingCheckpoint(pub String);

/// Raised after `theory-check` writes its CSV if any bound failed.
#[derive(Debug, thiserror::Error)]
#[error("{0} of {1} bound checks failed")]
pub struct BoundsFailed(pub usize, pub usize);

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const RUN_MANIFEST: &str = "manifest.json";

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    revision: String,
    outputs: &'a [String],
    created_unix: u64,
    config: &'a RunConfig,
}

/// `git describe` of the source tree when available, else the crate version.
pub fn revision() -> String {
    let version = env!("CARGO_PKG_VERSION");
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--abbrev=12"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| format!("{version}+{}", s.trim()))
        .unwrap_or_else(|| version.to_string())
}

fn write_manifest(cfg: &RunConfig, command: &str, outputs: &[String]) -> anyhow::Result<()> {
    let m = RunManifest {
        command,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        revision: revision(),
        outputs,
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        config: cfg,
    };
    fs::write(cfg.out_dir.join(RUN_MANIFEST), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

fn write_output(cfg: &RunConfig, name: &str, body: &str, outputs: &mut Vec<String>) -> anyhow::Result<()> {
    let path = cfg.out_dir.join(name);
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    outputs.push(name.to_string());
    Ok(())
}

/// Byte tokens of the configured corpus, generating the synthetic one from
/// the root seed when no file is given.
pub fn corpus(cfg: &RunConfig) -> anyhow::Result<Vec<usize>> {
    Ok(match &cfg.task.corpus {
        Some(p) => tasks::load_corpus(p)?,
        None => tasks::synthetic_corpus(cfg.task.synthetic_bytes, seed::derive(cfg.seed, "corpus"))
            .bytes()
            .map(usize::from)
            .collect(),
    })
}

fn held_out(cfg: &RunConfig, tokens: &[usize]) -> anyhow::Result<Vec<usize>> {
    let (_, held) = tasks::split_corpus(tokens, cfg.task.held_out)?;
    Ok(held[..held.len().min(cfg.eval.max_tokens)].to_vec())
}

fn train_model(cfg: &RunConfig, model_cfg: &ModelConfig, tokens: &[usize]) -> anyhow::Result<(MemMamba, Vec<training::LogRow>)> {
    let vocab = model_cfg.vocab;
    let data = match cfg.task.kind {
        TaskKind::Lm => TrainData::Corpus(tasks::split_corpus(tokens, cfg.task.held_out)?.0),
        TaskKind::Passkey => TrainData::Passkey { vocab },
        TaskKind::Copy => TrainData::Copy {
            payload_len: cfg.task.payload_len,
            vocab,
        },
    };
    Ok(training::train(model_cfg, &cfg.train, data, None)?)
}

fn load_model(cfg: &RunConfig) -> anyhow::Result<MemMamba> {
    let dir = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| MissingCheckpoint("set `checkpoint` in the config or with --set checkpoint=<dir>".into()))?;
    if !dir.join(checkpoint::MANIFEST_FILE).is_file() {
        return Err(MissingCheckpoint(format!("no {} in {}", checkpoint::MANIFEST_FILE, dir.display())).into());
    }
    Ok(checkpoint::load(dir)?.0)
}

fn train(cfg: &RunConfig, outputs: &mut Vec<String>) -> anyhow::Result<()> {
    let tokens = if cfg.task.kind == TaskKind::Lm { corpus(cfg)? } else { Vec::new() };
    let (model, rows) = train_model(cfg, &cfg.model_config(), &tokens)?;
    let dir = cfg.out_dir.join(CHECKPOINT_DIR);
    checkpoint::save(&model, rows.len(), &dir)?;
    outputs.push(format!("{CHECKPOINT_DIR}/"));
    write_output(cfg, "train_log.csv", &training::log_csv(&rows), outputs)
}

fn eval_ppl(cfg: &RunConfig, outputs: &mut Vec<String>) -> anyhow::Result<()> {
    let model = load_model(cfg)?;
    let held = held_out(cfg, &corpus(cfg)?)?;
    let mut csv = String::from("model_id,context_len,ppl\n");
    for &m in &cfg.eval.context_multipliers {
        let ctx = m * cfg.train.context_len;
        let ppl = training::perplexity(&model, &held, ctx)?;
        csv.push_str(&format!("{},{ctx},{ppl}\n", cfg.model_id));
    }
    write_output(cfg, "ppl.csv", &csv, outputs)
}

fn passkey(cfg: &RunConfig, outputs: &mut Vec<String>) -> anyhow::Result<()> {
    let model = load_model(cfg)?;
    let vocab = model.config().vocab;
    let results = tasks::eval_passkey(&model, &cfg.eval.passkey_lengths, cfg.eval.per_length, vocab, cfg.seed)?;
    let csv = format!("{PASSKEY_CSV_HEADER}\n{}", tasks::passkey_csv_rows(&cfg.model_id, &results));
    write_output(cfg, "passkey.csv", &csv, outputs)
}

/// Fidelity of `model` over the first full-length held-out windows.
pub fn fidelity_report(cfg: &RunConfig, model: &MemMamba, held: &[usize]) -> anyhow::Result<FidelityReport> {
    let len = cfg.eval.fidelity_context_multiplier * cfg.train.context_len;
    let traces = held
        .chunks_exact(len)
        .take(cfg.eval.fidelity_sequences)
        .map(|w| Ok(model.forward(w)?.1))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if traces.is_empty() {
        bail!("held-out split has no window of {len} tokens");
    }
    Ok(FidelityReport::compute(&traces, model.embedding(), model.w_out(), &cfg.fidelity)?)
}

fn fidelity(cfg: &RunConfig, outputs: &mut Vec<String>) -> anyhow::Result<()> {
    let model = load_model(cfg)?;
    let held = held_out(cfg, &corpus(cfg)?)?;
    let report = fidelity_report(cfg, &model, &held)?;
    let mut csv = format!("{}\n", fidelity::CSV_HEADER);
    for row in report.csv_rows(&cfg.model_id) {
        csv.push_str(&row);
        csv.push('\n');
    }
    write_output(cfg, "fidelity.csv", &csv, outputs)
}

fn theory_check(cfg: &RunConfig, outputs: &mut Vec<String>) -> anyhow::Result<()> {
    let mut checks = theory::bound_suite(&cfg.theory)?;
    checks.extend(theory::worked_examples()?);
    write_output(cfg, "theory.csv", &theory::to_csv(&checks), outputs)?;
    let failed = checks.iter().filter(|c| !c.holds).count();
    if failed > 0 {
        return Err(BoundsFailed(failed, checks.len()).into());
    }
    Ok(())
}

fn bench(cfg: &RunConfig, outputs: &mut Vec<String>) -> anyhow::Result<()> {
    let settings = BenchSettings {
        model: cfg.model_config(),
        warmup: 1,
        seed: cfg.seed,
    };
    let mut records = Vec::new();
    for kind in [ModelKind::MemMamba, ModelKind::QuadraticBaseline] {
        records.extend(benchmark_forward_with(kind, &cfg.bench.lengths, cfg.bench.samples, &settings)?);
    }
    let mut wide = Vec::new();
    memmamba_bench::write_csv(&mut wide, &records)?;
    let mut long = Vec::new();
    memmamba_bench::write_long_csv(&mut long, &records)?;
    write_output(cfg, "bench.csv", &String::from_utf8(wide)?, outputs)?;
    write_output(cfg, "bench_long.csv", &String::from_utf8(long)?, outputs)
}

/// Model variants along `axis`, each labelled with its value.
pub fn sweep_points(cfg: &RunConfig, axis: SweepAxis) -> Vec<(String, ModelConfig)> {
    let base = cfg.model_config();
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut m = base.clone();
        f(&mut m);
        m
    };
    match axis {
        SweepAxis::Fusion => FusionMethod::ALL
            .iter()
            .map(|&f| (f.name().to_string(), with(&|m| m.fusion = f)))
            .collect(),
        SweepAxis::Pooling => [Pooling::Max, Pooling::Mean]
            .iter()
            .map(|&p| (p.name().to_string(), with(&|m| m.pooling = p)))
            .collect(),
        SweepAxis::PoolCapacity => cfg
            .sweep
            .pool_capacity
            .iter()
            .map(|&c| (c.to_string(), with(&|m| m.pool_capacity = c)))
            .collect(),
        SweepAxis::Window => cfg.sweep.window.iter().map(|&w| (w.to_string(), with(&|m| m.window = w))).collect(),
    }
}

fn sweep(cfg: &RunConfig, axis: SweepAxis, outputs: &mut Vec<String>) -> anyhow::Result<()> {
    if cfg.task.kind != TaskKind::Lm {
        bail!("sweep reports held-out perplexity and needs task.kind = \"lm\"");
    }
    let tokens = corpus(cfg)?;
    let held = held_out(cfg, &tokens)?;
    let mut csv = String::from("axis,value,ppl\n");
    for (label, model_cfg) in sweep_points(cfg, axis) {
        model_cfg.validate()?;
        let (model, _) = train_model(cfg, &model_cfg, &tokens)?;
        let ppl = training::perplexity(&model, &held, cfg.train.context_len)?;
        csv.push_str(&format!("{},{label},{ppl}\n", axis.name()));
    }
    write_output(cfg, &format!("sweep_{}.csv", axis.name()), &csv, outputs)
}

pub enum Action {
    Train,
    EvalPpl,
    Passkey,
    Fidelity,
    TheoryCheck,
    Bench,
    Sweep(SweepAxis),
}

impl Action {
    pub fn name(&self) -> String {
        match self {
            Action::Train => "train".into(),
            Action::EvalPpl => "eval-ppl".into(),
            Action::Passkey => "passkey".into(),
            Action::Fidelity => "fidelity".into(),
            Action::TheoryCheck => "theory-check".into(),
            Action::Bench => "bench".into(),
            Action::Sweep(a) => format!("sweep --axis {}", a.name()),
        }
    }
}

/// Runs one command and writes the run manifest next to its outputs, also
/// when the command fails after producing some of them.
pub fn run(action: &Action, cfg: &RunConfig) -> anyhow::Result<Vec<String>> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let mut outputs = Vec::new();
    let result = match action {
        Action::Train => train(cfg, &mut outputs),
        Action::EvalPpl => eval_ppl(cfg, &mut outputs),
        Action::Passkey => passkey(cfg, &mut outputs),
        Action::Fidelity => fidelity(cfg, &mut outputs),
        Action::TheoryCheck => theory_check(cfg, &mut outputs),
        Action::Bench => bench(cfg, &mut outputs),
        Action::Sweep(axis) => sweep(cfg, *axis, &mut outputs),
    };
    write_manifest(cfg, &action.name(), &outputs)?;
    result.map(|_| outputs)
}
