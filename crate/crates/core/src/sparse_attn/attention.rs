use super::selection::TokenSelection;
use crate::error::{Error, Result};
use crate::numcore::{kernels, Tensor};

/// Causal attention weights (`|q|×|k|`, row-major) between explicit query
/// and key rows of width `d`. Query `i` sees key `j` iff
/// `k_pos[j] <= q_pos[i]`.
pub fn causal_attention_weights(q: &[f64], q_pos: &[usize], k: &[f64], k_pos: &[usize], d: usize) -> Result<Vec<f64>> {
    let (nq, nk) = (q_pos.len(), k_pos.len());
    if q.len() != nq * d || k.len() != nk * d {
        return Err(Error::dim("causal attention: buffers do not match positions and width"));
    }
    let mut scores = kernels::matmul_nt(q, nq, d, k, nk);
    let scale = 1.0 / (d as f64).sqrt();
    for (i, row) in scores.chunks_mut(nk).enumerate() {
        for (s, &kp) in row.iter_mut().zip(k_pos) {
            *s = if kp <= q_pos[i] { *s * scale } else { f64::NEG_INFINITY };
        }
        if !kernels::softmax_in_place(row) {
            return Err(Error::DegenerateRow { row: i });
        }
    }
    Ok(scores)
}

/// Causal scaled dot-product attention between explicit query and key rows.
/// Returns the output (`|q|×d`) and the attention weights.
pub fn causal_attention(
    q: &[f64],
    q_pos: &[usize],
    k: &[f64],
    v: &[f64],
    k_pos: &[usize],
    d: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if v.len() != k_pos.len() * d {
        return Err(Error::dim("causal attention: value buffer does not match the keys"));
    }
    let weights = causal_attention_weights(q, q_pos, k, k_pos, d)?;
    let out = kernels::matmul(&weights, q_pos.len(), k_pos.len(), v, d);
    Ok((out, weights))
}

fn gather(t: &Tensor, rows: &[usize]) -> Vec<f64> {
    rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect()
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize)> {
    let s = q.shape();
    if s.len() != 2 || k.shape() != s || v.shape() != s {
        return Err(Error::dim(format!(
            "Q, K, V must share one ℓ×d shape, got {:?}, {:?}, {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok((s[0], s[1]))
}

/// Dense causal attention over all `ℓ` tokens.
pub fn dense_causal_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (len, d) = check_qkv(q, k, v)?;
    let pos: Vec<usize> = (0..len).collect();
    let (out, _) = causal_attention(q.data(), &pos, k.data(), v.data(), &pos, d)?;
    Tensor::new(&[len, d], out)
}

/// Attention restricted to the retained tokens: the rows `Q[T]`, `K[T]`,
/// `V[T]` are gathered and attend causally by original position.
/// Output has one row per retained token.
pub fn sparse_attention_output(q: &Tensor, k: &Tensor, v: &Tensor, sel: &TokenSelection) -> Result<Tensor> {
    let (len, d) = check_qkv(q, k, v)?;
    if sel.is_empty() {
        return Err(Error::DegenerateSelection);
    }
    if sel.len() != len {
        return Err(Error::dim(format!("selection covers {} tokens, sequence has {len}", sel.len())));
    }
    let t = sel.retained();
    let (out, _) = causal_attention(&gather(q, t), t, &gather(k, t), &gather(v, t), t, d)?;
    Tensor::new(&[t.len(), d], out)
}
