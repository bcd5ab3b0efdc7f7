use crate::error::{Error, Result};
use crate::microlm::{decode_step, log_probs_graph, prefill_sparse, Model, ProbeMode};
use crate::numcore::{kernels, Graph, Tensor};
use crate::rollout::RolloutGroup;
use crate::sparse_attn::SelectionPolicy;

/// `min(ρ·A, clip(ρ, 1−ε, 1+ε)·A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// True when the clipped branch is the smaller one (and differs).
pub fn clip_active(ratio: f64, advantage: f64, eps: f64) -> bool {
    ratio.clamp(1.0 - eps, 1.0 + eps) * advantage < ratio * advantage
}

/// `r − ln r − 1` with `r = π_ref / π_θ` at one token.
pub fn kl_token(policy_lp: f64, reference_lp: f64) -> f64 {
    let d = reference_lp - policy_lp;
    d.exp() - d - 1.0
}

/// Token-mean of [`kl_token`].
pub fn kl_estimate(policy_lp: &[f64], reference_lp: &[f64]) -> f64 {
    policy_lp.iter().zip(reference_lp).map(|(&p, &r)| kl_token(p, r)).sum::<f64>() / policy_lp.len().max(1) as f64
}

/// Teacher-forced dense log-probabilities of several responses to one
/// prompt, sharing a single prefill.
pub fn reference_log_probs(reference: &Model, prompt: &[usize], responses: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
    let pre = prefill_sparse(reference, prompt, SelectionPolicy::TopP(1.0), ProbeMode::All)?;
    responses
        .iter()
        .map(|resp| {
            let mut cache = pre.cache.clone();
            let mut logits = pre.logits.clone();
            let mut out = Vec::with_capacity(resp.len());
            for (i, &tok) in resp.iter().enumerate() {
                if tok >= logits.len() {
                    return Err(Error::Index { index: tok, len: logits.len() });
                }
                out.push(kernels::log_softmax_at(&logits, tok));
                if i + 1 < resp.len() {
                    logits = decode_step(reference, tok, &mut cache)?;
                }
            }
            Ok(out)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub clip_eps: f64,
    pub kl_beta: f64,
    /// Re-derive selections from the current parameters instead of reusing
    /// the ones recorded at sampling time.
    pub rederive: Option<ProbeMode>,
}

impl LossSettings {
    pub fn new(clip_eps: f64, kl_beta: f64) -> Self {
        LossSettings { clip_eps, kl_beta, rederive: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GrpoLossTerms {
    /// Per rollout, per token importance ratios `π_θ / π_θ_old`.
    pub ratios: Vec<Vec<f64>>,
    /// Per rollout, per token: whether the clipped branch was taken.
    pub clipped: Vec<Vec<bool>>,
    /// Mean over rollouts of the token-mean surrogate.
    pub surrogate: f64,
    /// Mean over rollouts of the token-mean KL estimate.
    pub kl: f64,
    /// `surrogate − β·kl`, to be maximized.
    pub objective: f64,
}

/// The GRPO objective over every rollout in `groups`, with per-rollout
/// reference log-probabilities in the same order. Returns the terms and the
/// gradients of the loss `−objective` with respect to every parameter.
pub fn grpo_batch_loss(
    model: &Model,
    groups: &[RolloutGroup],
    reference_lp: &[Vec<f64>],
    settings: &LossSettings,
) -> Result<(GrpoLossTerms, Vec<Tensor>)> {
    let total: usize = groups.iter().map(|g| g.records.len()).sum();
    if total == 0 {
        return Err(Error::contract("no rollouts to score"));
    }
    if reference_lp.len() != total {
        return Err(Error::contract(format!("{} reference sequences for {total} rollouts", reference_lp.len())));
    }
    let dims = *model.dims();
    let eps = settings.clip_eps;
    let mut grads: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut terms = GrpoLossTerms::default();
    let mut k = 0;
    for group in groups {
        for rec in &group.records {
            let ref_lp = &reference_lp[k];
            k += 1;
            let m = rec.response.len();
            if rec.old_log_probs.len() != m || ref_lp.len() != m {
                return Err(Error::contract("log-probability count differs from response length"));
            }
            let rederived;
            let selections = match settings.rederive {
                Some(probe) => {
                    rederived = prefill_sparse(model, &group.prompt, rec.policy, probe)?.selections;
                    &rederived
                }
                None => &rec.selections,
            };
            if selections.len() != dims.layers {
                return Err(Error::contract(format!("rollout carries {} selections for {} layers", selections.len(), dims.layers)));
            }

            let mut g = Graph::new();
            let pv = model.register(&mut g);
            let lp = log_probs_graph(&mut g, &pv, &dims, &group.prompt, &rec.response, Some(selections))?;
            let old = g.constant(Tensor::vector(rec.old_log_probs.clone()));
            let reference = g.constant(Tensor::vector(ref_lp.clone()));
            // importance ratio and clipped surrogate
            let log_ratio = g.sub(lp, old)?;
            let ratio = g.exp(log_ratio);
            let plain = g.scale(ratio, rec.advantage);
            let clipped = g.clamp(ratio, 1.0 - eps, 1.0 + eps);
            let clipped = g.scale(clipped, rec.advantage);
            let surr = g.minimum(plain, clipped)?;
            // r − ln r − 1 with ln r = ref − lp
            let log_r = g.sub(reference, lp)?;
            let r = g.exp(log_r);
            let kl = g.sub(r, log_r)?;
            let kl = g.add_scalar(kl, -1.0);
            let weighted_kl = g.scale(kl, settings.kl_beta);
            let per_token = g.sub(surr, weighted_kl)?;
            let objective = g.mean(per_token);
            let loss = g.scale(objective, -1.0 / total as f64);

            let ratios: Vec<f64> = g.value(ratio).data().to_vec();
            terms.clipped.push(ratios.iter().map(|&q| clip_active(q, rec.advantage, eps)).collect());
            terms.ratios.push(ratios);
            let surr_mean = g.value(surr).data().iter().sum::<f64>() / m as f64;
            let kl_mean = g.value(kl).data().iter().sum::<f64>() / m as f64;
            terms.surrogate += surr_mean / total as f64;
            terms.kl += kl_mean / total as f64;
            terms.objective += g.value(objective).item() / total as f64;

            let back = g.backward(loss)?;
            for (acc, v) in grads.iter_mut().zip(&pv.vars) {
                if let Some(t) = back.get(*v) {
                    acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
    Ok((terms, grads))
}
