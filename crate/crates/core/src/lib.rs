//! Mixed-precision LLM inference that lowers per-layer weight precision
//! during decoding when the model's own output entropy says it can afford to.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`]: dense f32 tensors and the few kernels the model needs.
//! - [`quant`]: per-row round-to-nearest quantization and 4-bit packing.
//! - [`analyzer`]: KL sensitivity of each layer and the switch plan built from it.
//! - [`model`]: a small decoder-only transformer with multi-precision linear layers.
//! - [`scheduler`]: perplexity entropy and the sliding-window switch trigger.
//! - [`engine`]: greedy generation, per-token traces and traffic reports.
//! - [`metrics`]: perplexity, ROUGE-L and token agreement.

pub mod analyzer;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod precision;
pub mod quant;
pub mod scheduler;
pub mod tensor;
pub mod tokenizer;

pub use analyzer::{analyze_model, build_switch_plan, LayerKlReport, PlanEntry, SwitchPlan};
pub use engine::{
    generate, generate_static, DecodeTrace, Generation, GenerationConfig, TraceRecord,
};
pub use error::{FlexQuantError, Result};
pub use model::{Model, ModelConfig};
pub use precision::Precision;
pub use quant::{dequantize, quantize, QuantMode, QuantizedTensor};
pub use scheduler::{ppl_entropy, SchedulerConfig, SchedulerState, ThresholdMode};
pub use tensor::Tensor;
