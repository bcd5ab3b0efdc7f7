//! Clipped-surrogate policy optimization anchored to a dense reference, and
//! the loop that trains a model to keep fewer tokens.

mod loss;
mod optim;
mod trainer;

pub use loss::{
    clip_active, clipped_surrogate, grpo_batch_loss, kl_estimate, kl_token, reference_log_probs, GrpoLossTerms, LossSettings,
};
pub use optim::{clip_grad_norm, Adam};
pub use trainer::{
    evaluate_policy, read_trace, sparsity_forcing_loop, write_trace, EvalPoint, ForcingOutcome, LoopOutputs, StepMetrics,
    Trainer, TrainerConfig, TRACE_HEADER,
};
