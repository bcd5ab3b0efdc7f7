//! Supervised training on answer tokens, optionally with the block
//! sharpness regularizer.

use crate::error::{Error, Result};
use crate::grpo::{clip_grad_norm, evaluate_policy, Adam};
use crate::microlm::{forward_graph, forward_graph_tapped, Model, ParamVars, ProbeMode};
use crate::numcore::{Graph, SplitRng, Tensor, Var};
use crate::rollout::Sample;
use crate::sparse_attn::{block_sharpness_graph, SelectionPolicy};

use super::task::END;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// `(block size, weight)` of the sharpness term; `None` disables it.
    pub sharpness: Option<(usize, f64)>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 2000, batch: 16, lr: 1e-3, seed: 0, grad_clip: Some(1.0), sharpness: None }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub model: Model,
    /// Mean answer cross-entropy per step.
    pub losses: Vec<f64>,
    /// Mean sharpness loss per step (empty without the regularizer).
    pub sharpness: Vec<f64>,
    /// Greedy dense accuracy on the held-out samples (NaN without any).
    pub accuracy: f64,
}

/// Records the answer cross-entropy of one sample; with `block`, also the
/// sharpness loss summed over layers (mean over heads).
pub fn sample_loss_graph(g: &mut Graph, pv: &ParamVars, model: &Model, s: &Sample, block: Option<usize>) -> Result<(Var, Option<Var>)> {
    let dims = model.dims();
    let mut tokens = s.prompt.clone();
    tokens.extend_from_slice(&s.gold[..s.gold.len() - 1]);
    let rows: Vec<usize> = (s.prompt.len() - 1..tokens.len()).collect();
    let mut sharp = None;
    let logits = match block {
        None => forward_graph(g, pv, dims, &tokens, tokens.len(), None, &rows)?,
        Some(b) => {
            let mut taps = Vec::new();
            let logits = forward_graph_tapped(g, pv, dims, &tokens, &rows, &mut taps)?;
            let mut total: Option<Var> = None;
            for (q, k) in taps {
                let (_, l) = block_sharpness_graph(g, q, k, b)?;
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l)?,
                });
            }
            let total = total.expect("at least one head");
            sharp = Some(g.scale(total, 1.0 / dims.heads as f64));
            logits
        }
    };
    let lp = g.log_softmax_pick(logits, &s.gold)?;
    let mean = g.mean(lp);
    Ok((g.scale(mean, -1.0), sharp))
}

/// Trains `model` with dense attention on randomly drawn batches of `train`
/// and reports held-out greedy accuracy.
pub fn pretrain_supervised(model: Model, train: &[Sample], held_out: &[Sample], cfg: &PretrainConfig) -> Result<PretrainReport> {
    if train.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    if cfg.batch == 0 {
        return Err(Error::domain("batch size must be positive"));
    }
    let mut model = model;
    let mut opt = Adam::new(cfg.lr);
    let mut rng = SplitRng::new(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut sharpness = Vec::new();
    let block = cfg.sharpness.map(|(b, _)| b);
    let weight = cfg.sharpness.map_or(0.0, |(_, w)| w);
    for step in 0..cfg.steps {
        let mut grads: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        let (mut ce_sum, mut sharp_sum) = (0.0, 0.0);
        for _ in 0..cfg.batch {
            let s = &train[rng.below(train.len())];
            let mut g = Graph::new();
            let pv = model.register(&mut g);
            let (ce, sharp) = sample_loss_graph(&mut g, &pv, &model, s, block).map_err(|e| match e {
                // non-finite weights make every softmax row degenerate
                Error::DegenerateRow { .. } => Error::Training(format!("non-finite activations at step {step}")),
                e => e,
            })?;
            ce_sum += g.value(ce).item();
            let total = match sharp {
                Some(sv) => {
                    sharp_sum += g.value(sv).item();
                    let w = g.scale(sv, weight);
                    g.add(ce, w)?
                }
                None => ce,
            };
            let loss = g.scale(total, 1.0 / cfg.batch as f64);
            let back = g.backward(loss)?;
            for (acc, v) in grads.iter_mut().zip(&pv.vars) {
                if let Some(t) = back.get(*v) {
                    acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
                }
            }
        }
        let ce = ce_sum / cfg.batch as f64;
        if !ce.is_finite() {
            return Err(Error::Training(format!("loss diverged at step {step}")));
        }
        losses.push(ce);
        if block.is_some() {
            sharpness.push(sharp_sum / cfg.batch as f64);
        }
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        opt.step(model.params_mut(), &grads)?;
    }
    let accuracy = if held_out.is_empty() { f64::NAN } else { dense_accuracy(&model, held_out)? };
    Ok(PretrainReport { model, losses, sharpness, accuracy })
}

/// Greedy accuracy with full attention.
pub fn dense_accuracy(model: &Model, samples: &[Sample]) -> Result<f64> {
    let max_len = samples.iter().map(|s| s.gold.len()).max().unwrap_or(1);
    Ok(evaluate_policy(model, samples, SelectionPolicy::TopP(1.0), ProbeMode::All, max_len, END)?.accuracy)
}
