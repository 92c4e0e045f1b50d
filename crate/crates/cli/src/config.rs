use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use memmamba::fidelity::FidelitySettings;
use memmamba::theory::SuiteSettings;
use memmamba::training::TrainConfig;
use memmamba::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Overrides `out_dir` when set.
pub const OUT_ENV: &str = "MEMMAMBA_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Next-token prediction on a byte corpus.
    Lm,
    Passkey,
    Copy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Byte corpus; a synthetic one is generated when absent.
    pub corpus: Option<PathBuf>,
    pub synthetic_bytes: usize,
    pub held_out: f64,
    pub payload_len: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::Lm,
            corpus: None,
            synthetic_bytes: 200_000,
            held_out: 0.1,
            payload_len: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Perplexity is reported at each multiple of the training context.
    pub context_multipliers: Vec<usize>,
    /// Held-out tokens used for perplexity, from the start of the split.
    pub max_tokens: usize,
    pub passkey_lengths: Vec<usize>,
    pub per_length: usize,
    /// Held-out sequences traced for fidelity metrics.
    pub fidelity_sequences: usize,
    pub fidelity_context_multiplier: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            context_multipliers: vec![1, 4],
            max_tokens: 8192,
            passkey_lengths: vec![64, 256, 512, 1024],
            per_length: 50,
            fidelity_sequences: 8,
            fidelity_context_multiplier: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub samples: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![256, 512, 1024, 2048, 4096, 8192],
            samples: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub pool_capacity: Vec<usize>,
    pub window: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            pool_capacity: vec![4, 8, 16, 32],
            window: vec![1, 2, 4, 8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed. Replaces `model.seed` and `train.seed`; evaluation draws
    /// from its own named stream.
    pub seed: u64,
    /// Label written in the `model_id` column of metric CSVs.
    pub model_id: String,
    /// Train and evaluate with every memory path switched off.
    pub ablate: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskConfig,
    pub eval: EvalConfig,
    pub fidelity: FidelitySettings,
    pub theory: SuiteSettings,
    pub bench: BenchConfig,
    pub sweep: SweepConfig,
    /// Checkpoint directory read by the evaluation commands.
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 123,
            model_id: "memmamba".into(),
            ablate: false,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            task: TaskConfig::default(),
            eval: EvalConfig::default(),
            fidelity: FidelitySettings::default(),
            theory: SuiteSettings::default(),
            bench: BenchConfig::default(),
            sweep: SweepConfig::default(),
            checkpoint: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `key=value`
    /// overrides, then validates. Errors name the offending key path.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: RunConfig = serde_path_to_error::deserialize(doc)
            .map_err(|e| anyhow::anyhow!("invalid config at `{}`: {}", e.path(), e.inner()))?;
        if let Ok(root) = std::env::var(OUT_ENV) {
            if !root.is_empty() {
                cfg.out_dir = PathBuf::from(root);
            }
        }
        cfg.model.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.model.validate().context("invalid config at `model`")?;
        cfg.train.validate().context("invalid config at `train`")?;
        if !(0.0..1.0).contains(&cfg.task.held_out) {
            bail!("invalid config at `task.held_out`: must lie in [0, 1)");
        }
        Ok(cfg)
    }

    /// Model configuration after the ablation switch.
    pub fn model_config(&self) -> ModelConfig {
        if self.ablate {
            self.model.ablated()
        } else {
            self.model.clone()
        }
    }

    /// SHA-256 of the resolved configuration, excluding the output root so
    /// that moving a run does not change its identity.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("out_dir");
        }
        format!("{:x}", Sha256::digest(v.to_string().as_bytes()))
    }
}

/// Sets a dotted key such as `model.tau1=0.3`. The value is read as JSON
/// when it parses and as a plain string otherwise.
pub fn apply_override(doc: &mut Value, arg: &str) -> anyhow::Result<()> {
    let (key, raw) = arg.split_once('=').with_context(|| format!("override `{arg}` is not key=value"))?;
    if key.is_empty() {
        bail!("override `{arg}` has an empty key");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            bail!("override `{key}`: `{}` is not an object", parts[..i].join("."));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}
