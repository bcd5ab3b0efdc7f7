//! Baseline that trains for block-sharp attention instead of forcing
//! sparsity through rewards.

use crate::error::{Error, Result};
use crate::grpo::{evaluate_policy, EvalPoint};
use crate::microlm::{Model, ProbeMode};
use crate::rollout::Sample;
use crate::sparse_attn::SelectionPolicy;

use super::pretrain::{pretrain_supervised, PretrainConfig, PretrainReport};
use super::task::END;

/// Fraction of salient tokens kept when evaluating the baseline.
pub const BASELINE_KEEP: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct BaselineReport {
    pub train: PretrainReport,
    /// Held-out greedy evaluation under top-k-fraction selection.
    pub eval: EvalPoint,
}

/// Supervised training plus `weight` times the sharpness loss over blocks of
/// `block` keys, then evaluation keeping the top quarter of tokens. Weight 0
/// is exactly [`pretrain_supervised`].
pub fn train_sharpness_baseline(
    model: Model,
    train: &[Sample],
    held_out: &[Sample],
    cfg: &PretrainConfig,
    block: usize,
    weight: f64,
) -> Result<BaselineReport> {
    if block == 0 {
        return Err(Error::domain("sharpness block size must be positive"));
    }
    if !(weight >= 0.0 && weight.is_finite()) {
        return Err(Error::domain(format!("sharpness weight must be finite and non-negative, got {weight}")));
    }
    let cfg = PretrainConfig { sharpness: (weight > 0.0).then_some((block, weight)), ..cfg.clone() };
    let report = pretrain_supervised(model, train, held_out, &cfg)?;
    let max_len = held_out.iter().map(|s| s.gold.len()).max().unwrap_or(1);
    let eval = if held_out.is_empty() {
        EvalPoint { accuracy: f64::NAN, mean_tau: f64::NAN, flop_proxy: f64::NAN, mem_proxy: f64::NAN }
    } else {
        evaluate_policy(&report.model, held_out, SelectionPolicy::TopKFraction(BASELINE_KEEP), ProbeMode::All, max_len, END)?
    };
    Ok(BaselineReport { train: report, eval })
}
