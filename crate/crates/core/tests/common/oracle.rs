//! Loop-level reference implementation of the decoder, written without the
//! crate's kernels or graph.

use sparsity_forcing::microlm::{Model, Slot};
use sparsity_forcing::sparse_attn::{determine_budget, select_important, ImportanceProfile};
use sparsity_forcing::numcore::Tensor;

fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (k, n) = (w.rows(), w.cols());
    let mut out = vec![0.0; n];
    for i in 0..k {
        for j in 0..n {
            out[j] += x[i] * w.get(i, j);
        }
    }
    out
}

fn norm(x: &[f64], g: &Tensor, b: &Tensor) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let r = 1.0 / (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) * r * g.data()[i] + b.data()[i]).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn mlp(model: &Model, j: usize, h: &mut [f64]) {
    let x = norm(h, model.layer(j, Slot::Ln2Gain), model.layer(j, Slot::Ln2Bias));
    let mut y = vec_mat(&x, model.layer(j, Slot::W1));
    for (v, b) in y.iter_mut().zip(model.layer(j, Slot::B1).data()) {
        *v = gelu(*v + b);
    }
    let y = vec_mat(&y, model.layer(j, Slot::W2));
    for ((o, v), b) in h.iter_mut().zip(&y).zip(model.layer(j, Slot::B2).data()) {
        *o += v + b;
    }
}

/// Per-head softmax attention of query row `q` over `keys` (rows of `k`/`v`).
fn attend_row(q: &[f64], k: &[Vec<f64>], v: &[Vec<f64>], keys: &[usize], heads: usize) -> Vec<f64> {
    let width = q.len();
    let dh = width / heads;
    let mut out = vec![0.0; width];
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        let s: Vec<f64> = keys
            .iter()
            .map(|&t| q[r.clone()].iter().zip(&k[t][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
        for (i, &t) in keys.iter().enumerate() {
            let w = (s[i] - m).exp() / z;
            for c in r.clone() {
                out[c] += w * v[t][c];
            }
        }
    }
    out
}

/// Head-averaged dense causal map over `rows` hidden queries.
fn dense_map(q: &[Vec<f64>], k: &[Vec<f64>], heads: usize) -> Tensor {
    let n = q.len();
    let width = q[0].len();
    let dh = width / heads;
    let mut map = vec![0.0; n * n];
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        for i in 0..n {
            let s: Vec<f64> = (0..=i)
                .map(|t| q[i][r.clone()].iter().zip(&k[t][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            for t in 0..=i {
                map[i * n + t] += (s[t] - m).exp() / z / heads as f64;
            }
        }
    }
    Tensor::new(&[n, n], map).unwrap()
}

/// How the oracle chooses each layer's retained prompt tokens.
pub enum Retention<'a> {
    Dense,
    Given(&'a [Vec<usize>]),
    /// Derive from the layer's full prompt map at threshold `p`.
    TopP(f64),
}

/// Runs `tokens` (prompt of `prompt_len` followed by decoded tokens) from
/// scratch. Layer `j` attends keys `T_j ∪ decoded` for queries
/// `T_j ∪ {last prompt row} ∪ decoded`; other rows only pass through the MLP.
/// Returns all-row logits and the retained sets used.
pub fn recompute(model: &Model, tokens: &[usize], prompt_len: usize, retention: Retention<'_>) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
    let dims = *model.dims();
    let n = tokens.len();
    let mut h: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| {
            let prev = model.prev_emb().row(if p == 0 { dims.vocab } else { tokens[p - 1] });
            (0..dims.d_model).map(|i| model.tok_emb().row(t)[i] + model.pos_emb().row(p)[i] + prev[i]).collect()
        })
        .collect();
    let mut used = Vec::new();
    for j in 0..dims.layers {
        let x: Vec<Vec<f64>> = h.iter().map(|r| norm(r, model.layer(j, Slot::Ln1Gain), model.layer(j, Slot::Ln1Bias))).collect();
        let q: Vec<Vec<f64>> = x.iter().map(|r| vec_mat(r, model.layer(j, Slot::Wq))).collect();
        let k: Vec<Vec<f64>> = x.iter().map(|r| vec_mat(r, model.layer(j, Slot::Wk))).collect();
        let v: Vec<Vec<f64>> = x.iter().map(|r| vec_mat(r, model.layer(j, Slot::Wv))).collect();
        let retained: Vec<usize> = match &retention {
            Retention::Dense => (0..prompt_len).collect(),
            Retention::Given(sel) => sel[j].clone(),
            Retention::TopP(p) => {
                let map = dense_map(&q[..prompt_len], &k[..prompt_len], dims.heads);
                let profile = ImportanceProfile::from_map(&map).unwrap();
                let b = determine_budget(&profile.accumulated, *p, prompt_len).unwrap();
                select_important(&profile.normalized, b).unwrap().retained().to_vec()
            }
        };
        let mut keys = retained.clone();
        keys.extend(prompt_len..n);
        let mut next = h.clone();
        for i in 0..n {
            let is_query = i >= prompt_len || i == prompt_len - 1 || retained.contains(&i);
            if is_query {
                let visible: Vec<usize> = keys.iter().copied().filter(|&t| t <= i).collect();
                let o = attend_row(&q[i], &k, &v, &visible, dims.heads);
                let a = vec_mat(&o, model.layer(j, Slot::Wo));
                for (hv, av) in next[i].iter_mut().zip(&a) {
                    *hv += av;
                }
            }
            mlp(model, j, &mut next[i]);
        }
        h = next;
        used.push(retained);
    }
    let logits = h
        .iter()
        .map(|r| vec_mat(&norm(r, model.ln_f_gain(), model.ln_f_bias()), model.w_out()))
        .collect();
    (logits, used)
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
