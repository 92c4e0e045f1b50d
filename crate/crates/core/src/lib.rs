//! MemMamba: a selective state-space language model augmented with a
//! bounded pool of note summaries, cross-token and cross-layer attention,
//! plus the fidelity metrics, bound checks, synthetic tasks and training
//! loop used to study it at small scale.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod fidelity;
pub mod memmamba;
pub mod numerics;
pub mod seed;
pub mod ssm;
pub mod tasks;
pub mod tensor;
pub mod theory;
pub mod training;

pub use autodiff::{EvalGraph, Gradients, Graph, ParamId, ParamStore, Tape};
pub use error::{Error, Result};
pub use memmamba::{FusionMethod, LayerTrace, MemMamba, ModelConfig, PoolPolicy, Pooling};
pub use ssm::{ScanState, SsmParams};
pub use tensor::Tensor;
