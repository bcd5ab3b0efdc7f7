//! Small pre-norm decoder with dense or dynamically sparse attention.

mod forward;
mod generate;
mod infer;
mod model;

pub use forward::{
    forward_dense, forward_graph, forward_graph_tapped, log_probs_graph, sequence_log_probs, AttentionMode, AttentionTaps,
};
pub use generate::{generate, GenerationConfig, GenerationResult};
pub use infer::{
    decode_inclusive_ratio, decode_step, efficiency_proxies, prefill_sparse, prefill_with_cache, token_ratio, CacheMode,
    EfficiencyProxies, LayerBudgets, LayerCache, Prefill, ProbeMode, PrunedKVCache,
};
pub use model::{Model, ModelDims, ParamVars, Slot};
