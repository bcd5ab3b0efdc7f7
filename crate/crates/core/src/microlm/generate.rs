use super::infer::{decode_step, prefill_with_cache, CacheMode, LayerBudgets, ProbeMode};
use super::model::Model;
use crate::error::{Error, Result};
use crate::numcore::{categorical_sample, kernels, SplitRng};
use crate::sparse_attn::{SelectionPolicy, TokenSelection};

/// Sampling settings for [`generate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationConfig {
    pub policy: SelectionPolicy,
    pub probe: ProbeMode,
    pub cache: CacheMode,
    pub max_len: usize,
    /// 0 selects greedy decoding.
    pub temperature: f64,
    pub stop_token: Option<usize>,
}

impl GenerationConfig {
    pub fn new(policy: SelectionPolicy, max_len: usize, temperature: f64, stop_token: Option<usize>) -> Self {
        GenerationConfig { policy, probe: ProbeMode::All, cache: CacheMode::Pruned, max_len, temperature, stop_token }
    }
}

#[derive(Clone, Debug)]
pub struct GenerationResult {
    pub response: Vec<usize>,
    /// Untempered log-probability of each sampled token.
    pub log_probs: Vec<f64>,
    pub token_ratio: f64,
    pub budgets: LayerBudgets,
    pub selections: Vec<TokenSelection>,
    pub policy: SelectionPolicy,
}

impl GenerationResult {
    pub fn stopped(&self, stop_token: usize) -> bool {
        self.response.last() == Some(&stop_token)
    }
}

/// Sparse prefill of `prompt`, then sampling one token at a time until the
/// stop token or `max_len` tokens.
pub fn generate(model: &Model, prompt: &[usize], cfg: &GenerationConfig, rng: &mut SplitRng) -> Result<GenerationResult> {
    if cfg.max_len == 0 {
        return Err(Error::domain("max_len must be at least 1"));
    }
    let pre = prefill_with_cache(model, prompt, cfg.policy, cfg.probe, cfg.cache)?;
    let mut cache = pre.cache;
    let mut logits = pre.logits;
    let mut response = Vec::with_capacity(cfg.max_len);
    let mut log_probs = Vec::with_capacity(cfg.max_len);
    loop {
        let mut probs = logits.clone();
        if !kernels::softmax_in_place(&mut probs) {
            return Err(Error::DegenerateRow { row: 0 });
        }
        let tok = categorical_sample(&probs, cfg.temperature, rng)?;
        log_probs.push(kernels::log_softmax_at(&logits, tok));
        response.push(tok);
        if Some(tok) == cfg.stop_token || response.len() == cfg.max_len {
            break;
        }
        logits = decode_step(model, tok, &mut cache)?;
    }
    Ok(GenerationResult {
        response,
        log_probs,
        token_ratio: pre.budgets.token_ratio(),
        budgets: pre.budgets,
        selections: pre.selections,
        policy: cfg.policy,
    })
}
