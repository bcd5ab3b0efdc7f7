use super::graph::{check_mask, Graph};
use super::kernels;
use super::rng::SplitRng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul(va, vb)?;
    Ok(g.value(out).clone())
}

/// Row-wise softmax with an optional additive `0` / `-inf` mask.
pub fn softmax_rows(m: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    if m.shape().len() != 2 {
        return Err(Error::dim(format!("softmax_rows expects a matrix, got {:?}", m.shape())));
    }
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut data = m.data().to_vec();
    if let Some(mask) = mask {
        check_mask(mask, rows, cols)?;
        for (v, mv) in data.iter_mut().zip(mask.data()) {
            *v += mv;
        }
    }
    for (r, row) in data.chunks_mut(cols).enumerate() {
        if !kernels::softmax_in_place(row) {
            return Err(Error::DegenerateRow { row: r });
        }
    }
    Ok(Tensor::from_parts(vec![rows, cols], data))
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::Index { index: target, len: logits.len() });
    }
    Ok(-kernels::log_softmax_at(logits, target))
}

/// Draws an index from `probs` sharpened or flattened by `temperature`
/// (`p_i^(1/T)`, renormalized). Temperature 0 is argmax with the lowest
/// index winning ties.
pub fn categorical_sample(probs: &[f64], temperature: f64, rng: &mut SplitRng) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::domain("empty distribution"));
    }
    if let Some(p) = probs.iter().find(|p| !(**p >= 0.0)) {
        return Err(Error::domain(format!("negative or NaN probability {p}")));
    }
    if !(temperature >= 0.0) {
        return Err(Error::domain(format!("temperature {temperature} must be >= 0")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!("probabilities sum to {total}")));
    }
    if temperature == 0.0 {
        return Ok(argmax(probs));
    }
    let weights: Vec<f64> = if temperature == 1.0 {
        probs.to_vec()
    } else {
        let inv = 1.0 / temperature;
        probs.iter().map(|&p| if p > 0.0 { p.powf(inv) } else { 0.0 }).collect()
    };
    let z: f64 = weights.iter().sum();
    if !(z > 0.0 && z.is_finite()) {
        return Ok(argmax(probs));
    }
    let u = rng.uniform() * z;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
        }
        acc += w;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(last_positive)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
