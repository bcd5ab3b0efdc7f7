//! Cached inference: a sparse prefill that prunes each layer's prompt keys,
//! followed by single-token decode steps over the pruned cache.

use std::fmt;
use std::str::FromStr;

use super::forward::check_tokens;
use super::model::{Model, ModelDims, Slot};
use crate::error::{Error, Result};
use crate::numcore::{kernels, Tensor};
use crate::sparse_attn::{causal_attention, causal_attention_weights, ImportanceProfile, SelectionPolicy, TokenSelection};

/// Which prompt rows act as probe queries when scoring token importance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeMode {
    /// Every prompt row.
    All,
    /// Every `s`-th row counted back from the last one.
    Stride(usize),
    /// The last `w` rows (an observation window).
    Tail(usize),
}

impl Default for ProbeMode {
    fn default() -> Self {
        ProbeMode::All
    }
}

impl ProbeMode {
    /// Probe rows for a prompt of length `n`, ascending. Always contains the
    /// last row.
    pub fn rows(&self, n: usize) -> Vec<usize> {
        match *self {
            ProbeMode::All => (0..n).collect(),
            ProbeMode::Stride(s) => {
                let s = s.max(1);
                let mut rows: Vec<usize> = (0..n).rev().step_by(s).collect();
                rows.reverse();
                rows
            }
            ProbeMode::Tail(w) => (n.saturating_sub(w.max(1))..n).collect(),
        }
    }
}

impl fmt::Display for ProbeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbeMode::All => f.write_str("all"),
            ProbeMode::Stride(s) => write!(f, "stride:{s}"),
            ProbeMode::Tail(w) => write!(f, "tail:{w}"),
        }
    }
}

impl FromStr for ProbeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let arg = |v: &str| -> Result<usize> {
            match v.parse::<usize>() {
                Ok(n) if n > 0 => Ok(n),
                _ => Err(Error::parse(format!("bad probe argument {v:?}"))),
            }
        };
        match s.split_once(':') {
            None if s == "all" => Ok(ProbeMode::All),
            Some(("stride", v)) => Ok(ProbeMode::Stride(arg(v)?)),
            Some(("tail", v)) => Ok(ProbeMode::Tail(arg(v)?)),
            _ => Err(Error::parse(format!("unknown probe mode {s:?}"))),
        }
    }
}

/// Whether non-retained prompt keys are dropped or kept and skipped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CacheMode {
    #[default]
    Pruned,
    /// Keeps every prompt key in memory and fetches the retained ones at
    /// each decode step.
    FullDynamicFetch,
}

/// Keys and values one layer attends over during decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache {
    width: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
    positions: Vec<usize>,
    /// Indices of stored rows that decoding attends over.
    active: Vec<usize>,
}

impl LayerCache {
    fn new(width: usize) -> Self {
        LayerCache { width, keys: Vec::new(), values: Vec::new(), positions: Vec::new(), active: Vec::new() }
    }

    fn push(&mut self, key: &[f64], value: &[f64], pos: usize, active: bool) {
        if active {
            self.active.push(self.positions.len());
        }
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.positions.push(pos);
    }

    /// Rows attended over: retained prompt tokens plus decoded tokens.
    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    /// Rows physically held, including inactive ones in full-cache mode.
    pub fn stored_rows(&self) -> usize {
        self.positions.len()
    }

    /// Original positions of the attended rows, strictly increasing.
    pub fn positions(&self) -> Vec<usize> {
        self.active.iter().map(|&i| self.positions[i]).collect()
    }

    fn gather(&self, buf: &[f64], head: usize, dh: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.active.len() * dh);
        for &i in &self.active {
            let at = i * self.width + head * dh;
            out.extend_from_slice(&buf[at..at + dh]);
        }
        out
    }
}

/// Per-layer key/value cache built by a sparse prefill.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunedKVCache {
    pub layers: Vec<LayerCache>,
    pub mode: CacheMode,
    prompt_len: usize,
    decoded: usize,
    /// Most recent token, fed to the next step's previous-token embedding.
    last_token: usize,
}

impl PrunedKVCache {
    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    /// Tokens appended by decode steps.
    pub fn decoded(&self) -> usize {
        self.decoded
    }

    /// Position the next decoded token occupies.
    pub fn next_position(&self) -> usize {
        self.prompt_len + self.decoded
    }
}

/// Prompt budgets chosen at each layer during a prefill.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerBudgets {
    pub budgets: Vec<usize>,
    pub prompt_len: usize,
    pub policy: SelectionPolicy,
}

impl LayerBudgets {
    pub fn new(budgets: Vec<usize>, prompt_len: usize, policy: SelectionPolicy) -> Result<Self> {
        if budgets.is_empty() || budgets.iter().any(|&b| b == 0 || b > prompt_len) {
            return Err(Error::domain(format!("budgets {budgets:?} must lie in [1, {prompt_len}]")));
        }
        Ok(LayerBudgets { budgets, prompt_len, policy })
    }

    pub fn token_ratio(&self) -> f64 {
        token_ratio(self)
    }
}

/// Mean over layers of `b_j / ℓ`.
pub fn token_ratio(budgets: &LayerBudgets) -> f64 {
    let l = budgets.prompt_len as f64;
    budgets.budgets.iter().map(|&b| b as f64 / l).sum::<f64>() / budgets.budgets.len() as f64
}

/// Like [`token_ratio`] but counting decoded tokens on both sides:
/// mean over layers of `(b_j + t) / (ℓ + t)`.
pub fn decode_inclusive_ratio(budgets: &LayerBudgets, decoded: usize) -> f64 {
    let l = (budgets.prompt_len + decoded) as f64;
    budgets.budgets.iter().map(|&b| (b + decoded) as f64 / l).sum::<f64>() / budgets.budgets.len() as f64
}

/// Attention cost proxies for one generation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EfficiencyProxies {
    /// Multiply-adds of the attention score and value products.
    pub flops: f64,
    /// Scalars held in the key/value cache after decoding.
    pub memory: f64,
}

/// `head_dim` is the per-head width `d`. Prefill costs `Σ_j 2·d·H·b_j²`;
/// decode step `t` (1-based) costs `Σ_j 2·d·H·(b_j + t)`; memory is
/// `Σ_j 2·(b_j + decoded)·d·H`.
pub fn efficiency_proxies(budgets: &LayerBudgets, decoded: usize, head_dim: usize, heads: usize) -> EfficiencyProxies {
    let dh = (head_dim * heads) as f64;
    let mut flops = 0.0;
    let mut memory = 0.0;
    for &b in &budgets.budgets {
        let b = b as f64;
        flops += 2.0 * dh * b * b;
        flops += (1..=decoded).map(|t| 2.0 * dh * (b + t as f64)).sum::<f64>();
        memory += 2.0 * (b + decoded as f64) * dh;
    }
    EfficiencyProxies { flops, memory }
}

/// Output of [`prefill_sparse`].
#[derive(Clone, Debug)]
pub struct Prefill {
    /// Next-token logits at the last prompt position.
    pub logits: Vec<f64>,
    pub cache: PrunedKVCache,
    pub budgets: LayerBudgets,
    pub selections: Vec<TokenSelection>,
}

fn rows_of(buf: &[f64], width: usize, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend_from_slice(&buf[r * width..(r + 1) * width]);
    }
    out
}

fn head_cols(buf: &[f64], width: usize, head: usize, dh: usize) -> Vec<f64> {
    buf.chunks(width).flat_map(|row| row[head * dh..(head + 1) * dh].iter().copied()).collect()
}

fn layer_norm(x: &[f64], gain: &Tensor, bias: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    kernels::layer_norm(x, gain.numel(), gain.data(), bias.data(), &mut out);
    out
}

fn linear(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (k, n) = (w.rows(), w.cols());
    kernels::matmul(x, x.len() / k, k, w.data(), n)
}

/// `h += W2·gelu(W1·LN2(h) + b1) + b2`, row-wise.
fn mlp_in_place(model: &Model, j: usize, h: &mut [f64]) {
    let x = layer_norm(h, model.layer(j, Slot::Ln2Gain), model.layer(j, Slot::Ln2Bias));
    let mut y = linear(&x, model.layer(j, Slot::W1));
    let b1 = model.layer(j, Slot::B1).data();
    for row in y.chunks_mut(b1.len()) {
        for (v, b) in row.iter_mut().zip(b1) {
            *v = kernels::gelu(*v + b);
        }
    }
    let y = linear(&y, model.layer(j, Slot::W2));
    let b2 = model.layer(j, Slot::B2).data();
    for (row, out) in y.chunks(b2.len()).zip(h.chunks_mut(b2.len())) {
        for ((o, v), b) in out.iter_mut().zip(row).zip(b2) {
            *o += v + b;
        }
    }
}

fn head_logits(model: &Model, h: &[f64]) -> Vec<f64> {
    let x = layer_norm(h, model.ln_f_gain(), model.ln_f_bias());
    linear(&x, model.w_out())
}

/// Head-averaged causal attention of the probe rows over all `n` keys.
fn probe_map(q: &[f64], k: &[f64], probe: &[usize], n: usize, dims: &ModelDims) -> Result<Tensor> {
    let (width, heads, dh) = (dims.d_model, dims.heads, dims.head_dim());
    let qp = rows_of(q, width, probe);
    let pos: Vec<usize> = (0..n).collect();
    let mut map = vec![0.0; probe.len() * n];
    for hd in 0..heads {
        let w = causal_attention_weights(&head_cols(&qp, width, hd, dh), probe, &head_cols(k, width, hd, dh), &pos, dh)?;
        for (m, v) in map.iter_mut().zip(&w) {
            *m += v / heads as f64;
        }
    }
    Tensor::new(&[probe.len(), n], map)
}

/// Multi-head attention of `queries` over `keys` (both original positions
/// into the row buffers `q`, `k`, `v`). Returns the `|queries|×width`
/// concatenated head outputs.
fn attend(q: &[f64], k: &[f64], v: &[f64], queries: &[usize], keys: &[usize], dims: &ModelDims) -> Result<Vec<f64>> {
    let (width, heads, dh) = (dims.d_model, dims.heads, dims.head_dim());
    let (qs, ks, vs) = (rows_of(q, width, queries), rows_of(k, width, keys), rows_of(v, width, keys));
    let mut out = vec![0.0; queries.len() * width];
    for hd in 0..heads {
        let (o, _) = causal_attention(
            &head_cols(&qs, width, hd, dh),
            queries,
            &head_cols(&ks, width, hd, dh),
            &head_cols(&vs, width, hd, dh),
            keys,
            dh,
        )?;
        for (row, src) in out.chunks_mut(width).zip(o.chunks(dh)) {
            row[hd * dh..(hd + 1) * dh].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Sparse prefill with the default pruned cache.
pub fn prefill_sparse(model: &Model, tokens: &[usize], policy: SelectionPolicy, probe: ProbeMode) -> Result<Prefill> {
    prefill_with_cache(model, tokens, policy, probe, CacheMode::Pruned)
}

/// Runs the prompt through every layer. At layer `j` the probe rows'
/// head-averaged attention ranks the prompt tokens, `policy` picks the
/// retained set `T_j`, and attention runs with keys `T_j` for queries
/// `T_j ∪ {last}`; other rows keep their residual. The cache stores the
/// keys and values of `T_j` (or of all rows, in full-cache mode).
pub fn prefill_with_cache(
    model: &Model,
    tokens: &[usize],
    policy: SelectionPolicy,
    probe: ProbeMode,
    mode: CacheMode,
) -> Result<Prefill> {
    policy.validate()?;
    let dims = *model.dims();
    check_tokens(&dims, tokens)?;
    let n = tokens.len();
    let width = dims.d_model;
    let last = n - 1;

    let mut h = Vec::with_capacity(n * width);
    for (p, &t) in tokens.iter().enumerate() {
        h.extend(model.embed(p.checked_sub(1).map(|q| tokens[q]), t, p));
    }

    let probe_rows = probe.rows(n);
    let mut selections = Vec::with_capacity(dims.layers);
    let mut layers = Vec::with_capacity(dims.layers);
    for j in 0..dims.layers {
        let x = layer_norm(&h, model.layer(j, Slot::Ln1Gain), model.layer(j, Slot::Ln1Bias));
        let q = linear(&x, model.layer(j, Slot::Wq));
        let k = linear(&x, model.layer(j, Slot::Wk));
        let v = linear(&x, model.layer(j, Slot::Wv));

        let sel = if policy.is_dense() {
            TokenSelection::full(n)
        } else {
            let map = probe_map(&q, &k, &probe_rows, n, &dims)?;
            policy.select(&ImportanceProfile::from_probe(&map)?)?
        };
        let keys = sel.retained();
        let mut queries = keys.to_vec();
        if queries.last() != Some(&last) {
            queries.push(last);
        }
        let o = attend(&q, &k, &v, &queries, keys, &dims)?;
        let a = linear(&o, model.layer(j, Slot::Wo));
        for (&r, row) in queries.iter().zip(a.chunks(width)) {
            for (hv, av) in h[r * width..(r + 1) * width].iter_mut().zip(row) {
                *hv += av;
            }
        }

        let mut cache = LayerCache::new(width);
        for p in 0..n {
            let retained = sel.contains(p);
            if retained || mode == CacheMode::FullDynamicFetch {
                cache.push(&k[p * width..(p + 1) * width], &v[p * width..(p + 1) * width], p, retained);
            }
        }
        layers.push(cache);
        selections.push(sel);

        if j + 1 == dims.layers {
            // only the last row feeds the logits
            h.drain(..last * width);
        }
        mlp_in_place(model, j, &mut h);
    }
    let logits = head_logits(model, &h);
    let budgets = LayerBudgets::new(selections.iter().map(TokenSelection::budget).collect(), n, policy)?;
    Ok(Prefill { logits, cache: PrunedKVCache { layers, mode, prompt_len: n, decoded: 0, last_token: tokens[last] }, budgets, selections })
}

/// Feeds one token at the cache's next position, appends its keys and
/// values to every layer, and returns the next-token logits.
pub fn decode_step(model: &Model, token: usize, cache: &mut PrunedKVCache) -> Result<Vec<f64>> {
    let dims = *model.dims();
    let width = dims.d_model;
    if cache.layers.len() != dims.layers || cache.layers.iter().any(|c| c.width != width) {
        return Err(Error::contract(format!(
            "cache has {} layers of width {:?}, model expects {} of width {width}",
            cache.layers.len(),
            cache.layers.first().map(|c| c.width),
            dims.layers
        )));
    }
    let pos = cache.next_position();
    if pos >= dims.max_seq {
        return Err(Error::domain(format!("position {pos} exceeds max_seq {}", dims.max_seq)));
    }
    if token >= dims.vocab {
        return Err(Error::Index { index: token, len: dims.vocab });
    }
    let (heads, dh) = (dims.heads, dims.head_dim());
    let mut h = model.embed(Some(cache.last_token), token, pos);
    cache.last_token = token;
    for j in 0..dims.layers {
        let x = layer_norm(&h, model.layer(j, Slot::Ln1Gain), model.layer(j, Slot::Ln1Bias));
        let q = linear(&x, model.layer(j, Slot::Wq));
        let k = linear(&x, model.layer(j, Slot::Wk));
        let v = linear(&x, model.layer(j, Slot::Wv));
        let layer = &mut cache.layers[j];
        layer.push(&k, &v, pos, true);
        let key_pos = layer.positions();
        let mut o = vec![0.0; width];
        for hd in 0..heads {
            let (out, _) = causal_attention(
                &q[hd * dh..(hd + 1) * dh],
                &[pos],
                &layer.gather(&layer.keys, hd, dh),
                &layer.gather(&layer.values, hd, dh),
                &key_pos,
                dh,
            )?;
            o[hd * dh..(hd + 1) * dh].copy_from_slice(&out);
        }
        let a = linear(&o, model.layer(j, Slot::Wo));
        for (hv, av) in h.iter_mut().zip(&a) {
            *hv += av;
        }
        mlp_in_place(model, j, &mut h);
    }
    cache.decoded += 1;
    Ok(head_logits(model, &h))
}
