use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMethod {
    Gated,
    Residual,
    Elementwise,
    Conv1d,
    Weighted,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 5] = [
        FusionMethod::Gated,
        FusionMethod::Residual,
        FusionMethod::Elementwise,
        FusionMethod::Conv1d,
        FusionMethod::Weighted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMethod::Gated => "gated",
            FusionMethod::Residual => "residual",
            FusionMethod::Elementwise => "elementwise",
            FusionMethod::Conv1d => "conv1d",
            FusionMethod::Weighted => "weighted",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolPolicy {
    Fifo,
    Priority,
}

/// How the note block reduces its window of recent inputs before projecting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    Mean,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::Max => "max",
            Pooling::Mean => "mean",
        }
    }
}

/// Architecture hyperparameters. Layers are numbered from 1.
///
/// Thresholds may lie outside `[0, 1]`: a negative value fires on every
/// step and a value above 1 never fires.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub d_sum: usize,
    pub d_attn: usize,
    pub pool_capacity: usize,
    pub pool_policy: PoolPolicy,
    pub tau1: f64,
    pub tau2: f64,
    pub period: usize,
    pub lookback: usize,
    pub fusion: FusionMethod,
    pub alpha: f64,
    pub pooling: Pooling,
    pub window: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d_model: 128,
            d_state: 16,
            d_sum: 64,
            d_attn: 32,
            pool_capacity: 50,
            pool_policy: PoolPolicy::Fifo,
            tau1: 0.5,
            tau2: 0.5,
            period: 4,
            lookback: 3,
            fusion: FusionMethod::Weighted,
            alpha: 0.8,
            pooling: Pooling::Max,
            window: 1,
            vocab: 256,
            seed: 123,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("d_state", self.d_state),
            ("d_sum", self.d_sum),
            ("d_attn", self.d_attn),
            ("pool_capacity", self.pool_capacity),
            ("period", self.period),
            ("lookback", self.lookback),
            ("window", self.window),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(param_err(format!("{name} must be at least 1")));
            }
        }
        if self.vocab < 2 {
            return Err(param_err("vocab must be at least 2"));
        }
        if !self.tau1.is_finite() || !self.tau2.is_finite() {
            return Err(param_err("thresholds must be finite"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(param_err("alpha must be finite and non-negative"));
        }
        Ok(())
    }

    /// Same architecture with every memory path switched off: thresholds
    /// that never fire and a cross-layer period longer than the stack.
    pub fn ablated(&self) -> Self {
        Self {
            tau1: 1.1,
            tau2: 1.1,
            period: self.layers + 1,
            ..self.clone()
        }
    }

    pub fn has_layer_attention(&self, l: usize) -> bool {
        l % self.period == 0
    }

    /// Source layers for cross-layer attention at layer `l`.
    pub fn lookback_layers(&self, l: usize) -> std::ops::Range<usize> {
        l.saturating_sub(self.lookback).max(1)..l
    }
}
