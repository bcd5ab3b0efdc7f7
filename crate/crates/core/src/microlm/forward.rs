//! Differentiable forward pass recorded on a [`Graph`].
//!
//! Each layer may restrict the prompt tokens it attends over to a retained
//! set. Retained prompt rows and every response row act as both queries and
//! keys; the final prompt row always acts as a query (it produces the first
//! answer token) but is only a key when retained. Rows that are neither
//! skip the attention sublayer and pass through the residual stream.
//!
//! Only rows that can influence the requested logits are evaluated.

use std::rc::Rc;

use super::infer::{prefill_sparse, ProbeMode};
use super::model::{Model, ModelDims, ParamVars, Slot};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::sparse_attn::{SelectionPolicy, TokenSelection};

/// How the prompt is attended while scoring a response.
#[derive(Clone, Copy, Debug)]
pub enum AttentionMode<'a> {
    Dense,
    /// Derive fresh selections with a prefill under `policy`.
    Sparse(SelectionPolicy, ProbeMode),
    /// Reuse per-layer selections recorded earlier.
    Frozen(&'a [TokenSelection]),
}

pub(crate) fn check_tokens(dims: &ModelDims, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::domain("empty token sequence"));
    }
    if tokens.len() > dims.max_seq {
        return Err(Error::domain(format!("sequence of {} exceeds max_seq {}", tokens.len(), dims.max_seq)));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= dims.vocab) {
        return Err(Error::Index { index: t, len: dims.vocab });
    }
    Ok(())
}

fn union(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) if x == y => {
                i += 1;
                j += 1;
                x
            }
            (Some(&x), Some(&y)) if x < y => {
                i += 1;
                x
            }
            (Some(_), Some(&y)) => {
                j += 1;
                y
            }
            (Some(&x), None) => {
                i += 1;
                x
            }
            (None, Some(&y)) => {
                j += 1;
                y
            }
            (None, None) => unreachable!(),
        };
        out.push(next);
    }
    out
}

fn intersect(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().copied().filter(|x| b.binary_search(x).is_ok()).collect()
}

/// Positions of `subset` inside the sorted `rows`.
fn local(rows: &[usize], subset: &[usize]) -> Rc<Vec<usize>> {
    Rc::new(subset.iter().map(|p| rows.binary_search(p).expect("subset of rows")).collect())
}

fn gather_if_needed(g: &mut Graph, src: Var, rows: &[usize], subset: &[usize]) -> Result<Var> {
    if rows == subset {
        Ok(src)
    } else {
        g.gather_rows(src, local(rows, subset))
    }
}

/// Records the forward pass and returns logits for `logit_rows`
/// (`|logit_rows|×V`). `retention[j]` restricts the prompt tokens layer `j`
/// attends over; `None` is dense causal attention.
pub fn forward_graph(
    g: &mut Graph,
    pv: &ParamVars,
    dims: &ModelDims,
    tokens: &[usize],
    prompt_len: usize,
    retention: Option<&[TokenSelection]>,
    logit_rows: &[usize],
) -> Result<Var> {
    forward_inner(g, pv, dims, tokens, prompt_len, retention, logit_rows, None)
}

/// Per-layer, per-head query and key projections (`ℓ×d` each) of a dense
/// forward, in layer-major order.
pub type AttentionTaps = Vec<(Var, Var)>;

/// Dense forward over every row that also records each head's queries and
/// keys, for regularizers on the attention maps.
pub fn forward_graph_tapped(
    g: &mut Graph,
    pv: &ParamVars,
    dims: &ModelDims,
    tokens: &[usize],
    logit_rows: &[usize],
    taps: &mut AttentionTaps,
) -> Result<Var> {
    forward_inner(g, pv, dims, tokens, tokens.len(), None, logit_rows, Some(taps))
}

#[allow(clippy::too_many_arguments)]
fn forward_inner(
    g: &mut Graph,
    pv: &ParamVars,
    dims: &ModelDims,
    tokens: &[usize],
    prompt_len: usize,
    retention: Option<&[TokenSelection]>,
    logit_rows: &[usize],
    mut taps: Option<&mut AttentionTaps>,
) -> Result<Var> {
    check_tokens(dims, tokens)?;
    let n = tokens.len();
    if prompt_len == 0 || prompt_len > n {
        return Err(Error::contract(format!("prompt length {prompt_len} invalid for {n} tokens")));
    }
    if let Some(sel) = retention {
        if sel.len() != dims.layers {
            return Err(Error::contract(format!("{} selections for {} layers", sel.len(), dims.layers)));
        }
        if let Some(s) = sel.iter().find(|s| s.len() != prompt_len) {
            return Err(Error::contract(format!("selection covers {} tokens, prompt has {prompt_len}", s.len())));
        }
    }
    let mut wanted = logit_rows.to_vec();
    if taps.is_some() {
        // every row's queries are tapped
        wanted.extend(0..n);
    }
    wanted.sort_unstable();
    wanted.dedup();
    if wanted.is_empty() || wanted.last().is_some_and(|&r| r >= n) {
        return Err(Error::contract("logit rows must be non-empty and inside the sequence"));
    }

    let layers = dims.layers;
    let response: Vec<usize> = (prompt_len..n).collect();
    let mut keys = Vec::with_capacity(layers);
    let mut queries = Vec::with_capacity(layers);
    for j in 0..layers {
        let prompt_keys: Vec<usize> = match retention {
            Some(sel) => sel[j].retained().to_vec(),
            None => (0..prompt_len).collect(),
        };
        let k = union(&prompt_keys, &response);
        queries.push(union(&k, &[prompt_len - 1]));
        keys.push(k);
    }
    // needed[j]: rows whose input to layer j must be computed
    let mut needed = vec![Vec::new(); layers + 1];
    needed[layers] = wanted.clone();
    for j in (0..layers).rev() {
        needed[j] = union(&keys[j], &needed[j + 1]);
    }

    let rows0 = &needed[0];
    let tok_ids: Vec<usize> = rows0.iter().map(|&p| tokens[p]).collect();
    let te = g.gather_rows(pv.tok_emb(), Rc::new(tok_ids))?;
    let pe = g.gather_rows(pv.pos_emb(), Rc::new(rows0.clone()))?;
    let prev_ids: Vec<usize> = rows0.iter().map(|&p| if p == 0 { dims.vocab } else { tokens[p - 1] }).collect();
    let pr = g.gather_rows(pv.prev_emb(), Rc::new(prev_ids))?;
    let te = g.add(te, pe)?;
    let mut h = g.add(te, pr)?;

    let (heads, dh) = (dims.heads, dims.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    for j in 0..layers {
        let rows = &needed[j];
        let outs = &needed[j + 1];
        let aq = intersect(outs, &queries[j]);

        let x = g.layer_norm(h, pv.layer(j, Slot::Ln1Gain), pv.layer(j, Slot::Ln1Bias))?;
        let mut h_out = gather_if_needed(g, h, rows, outs)?;
        if !aq.is_empty() {
            let kx = gather_if_needed(g, x, rows, &keys[j])?;
            let k = g.matmul(kx, pv.layer(j, Slot::Wk))?;
            let v = g.matmul(kx, pv.layer(j, Slot::Wv))?;
            let qx = gather_if_needed(g, x, rows, &aq)?;
            let q = g.matmul(qx, pv.layer(j, Slot::Wq))?;
            let mut head_out = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = g.slice_cols(q, hd * dh, dh)?;
                let kh = g.slice_cols(k, hd * dh, dh)?;
                let vh = g.slice_cols(v, hd * dh, dh)?;
                let s = g.matmul_nt(qh, kh)?;
                let s = g.scale(s, scale);
                let p = g.causal_softmax(s, &aq, &keys[j])?;
                if let Some(t) = taps.as_deref_mut() {
                    t.push((qh, kh));
                }
                head_out.push(g.matmul(p, vh)?);
            }
            let o = if heads == 1 { head_out[0] } else { g.concat_cols(&head_out)? };
            let a = g.matmul(o, pv.layer(j, Slot::Wo))?;
            let a = if aq.len() == outs.len() { a } else { g.scatter_rows(a, local(outs, &aq), outs.len())? };
            h_out = g.add(h_out, a)?;
        }
        let y = g.layer_norm(h_out, pv.layer(j, Slot::Ln2Gain), pv.layer(j, Slot::Ln2Bias))?;
        let y = g.matmul(y, pv.layer(j, Slot::W1))?;
        let y = g.add_row(y, pv.layer(j, Slot::B1))?;
        let y = g.gelu(y);
        let y = g.matmul(y, pv.layer(j, Slot::W2))?;
        let y = g.add_row(y, pv.layer(j, Slot::B2))?;
        h = g.add(h_out, y)?;
    }
    let hf = g.layer_norm(h, pv.ln_f_gain(), pv.ln_f_bias())?;
    let logits = g.matmul(hf, pv.w_out())?;
    // rows come out sorted; restore the caller's order
    if wanted.as_slice() == logit_rows {
        Ok(logits)
    } else {
        g.gather_rows(logits, local(&wanted, logit_rows))
    }
}

/// Standard causal forward over the whole sequence: `ℓ×V` logits.
pub fn forward_dense(model: &Model, tokens: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let pv = model.register_frozen(&mut g);
    let rows: Vec<usize> = (0..tokens.len()).collect();
    let logits = forward_graph(&mut g, &pv, model.dims(), tokens, tokens.len().max(1), None, &rows)?;
    Ok(g.value(logits).clone())
}

/// Records teacher-forced log-probabilities of `response` after `prompt`
/// (one entry per response token).
pub fn log_probs_graph(
    g: &mut Graph,
    pv: &ParamVars,
    dims: &ModelDims,
    prompt: &[usize],
    response: &[usize],
    retention: Option<&[TokenSelection]>,
) -> Result<Var> {
    if response.is_empty() {
        return Err(Error::contract("response must be non-empty"));
    }
    if prompt.is_empty() {
        return Err(Error::contract("prompt must be non-empty"));
    }
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(&response[..response.len() - 1]);
    let rows: Vec<usize> = (prompt.len() - 1..tokens.len()).collect();
    let logits = forward_graph(g, pv, dims, &tokens, prompt.len(), retention, &rows)?;
    g.log_softmax_pick(logits, response)
}

/// Teacher-forced log-probabilities of each response token.
pub fn sequence_log_probs(model: &Model, prompt: &[usize], response: &[usize], mode: AttentionMode<'_>) -> Result<Vec<f64>> {
    let derived;
    let retention = match mode {
        AttentionMode::Dense => None,
        AttentionMode::Frozen(sel) => Some(sel),
        AttentionMode::Sparse(policy, probe) => {
            derived = prefill_sparse(model, prompt, policy, probe)?.selections;
            Some(derived.as_slice())
        }
    };
    let mut g = Graph::new();
    let pv = model.register_frozen(&mut g);
    let lp = log_probs_graph(&mut g, &pv, model.dims(), prompt, response, retention)?;
    Ok(g.value(lp).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn union_and_intersect() {
        assert_eq!(union(&[1, 3, 5], &[2, 3, 9]), vec![1, 2, 3, 5, 9]);
        assert_eq!(union(&[], &[4]), vec![4]);
        assert_eq!(intersect(&[1, 2, 3, 7], &[2, 7, 8]), vec![2, 7]);
    }

    #[test]
    fn overlength_and_bad_tokens_are_rejected() {
        let dims = ModelDims { layers: 1, heads: 1, d_model: 4, vocab: 5, max_seq: 4, d_ff: 4 };
        let m = Model::init(dims, 0).unwrap();
        assert!(matches!(forward_dense(&m, &[1, 2, 3, 4, 0]), Err(Error::Domain(_))));
        assert!(matches!(forward_dense(&m, &[1, 7]), Err(Error::Index { .. })));
    }
}
