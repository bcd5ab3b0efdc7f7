//! Token-importance scoring, budget determination, retained-set
//! construction and attention restricted to the retained tokens.

mod attention;
mod importance;
mod selection;
pub mod sharpness;
mod variant;

pub use attention::{causal_attention, causal_attention_weights, dense_causal_attention, sparse_attention_output};
pub use importance::{accumulated_scores, determine_budget, normalized_scores, ImportanceProfile};
pub use selection::{select_important, select_threshold, select_topk_fraction, SelectionPolicy, TokenSelection};
pub use sharpness::{block_sharpness_graph, block_sharpness_loss, SharpnessProbe};
pub use variant::{grid, SelectionMode, VariantConfig};
