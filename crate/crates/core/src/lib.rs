//! Dynamic top-p sparse attention with KV-cache pruning inside a small
//! decoder-only language model, trained with grouped rollouts whose reward
//! couples answer correctness with the fraction of tokens retained.

pub mod error;
pub mod numcore;
pub mod grpo;
pub mod harness;
pub mod microlm;
pub mod rollout;
pub mod sparse_attn;

pub use error::{Error, Result};
