//! The MemMamba block stack.
//!
//! Each layer keeps a bounded pool of note summaries. A token whose
//! importance exceeds `tau1` is summarized into the pool; when the previous
//! output's importance exceeds `tau2` the layer attends over its pool
//! (cross-token attention). Every `period`-th layer also attends over the
//! pools of the `lookback` layers below it (cross-layer attention). Both
//! contexts are fused into the token before the SSM update.
//!
//! Layers are numbered from 1 and processed in time-major order, so at step
//! `t` the cross-layer read sees lower pools after their step-`t` insertion.

mod blocks;
mod config;
mod model;
mod pool;

pub use blocks::{
    cross_layer_attention, cross_token_attention, fuse, state_importance, summarize, token_importance, AttnWeights,
    FusionParams, Scorer,
};
pub use config::{FusionMethod, ModelConfig, PoolPolicy, Pooling};
pub use model::{
    param_shapes, ForwardOutput, GateDecision, GateRecord, LayerTrace, MemMamba, Session, StepRecord,
};
pub use pool::{InsertOutcome, Scored, StatePool, StateSummary};

#[cfg(test)]
mod tests;
