use super::importance::{determine_budget, ImportanceProfile};
use crate::error::{Error, Result};

/// The set of tokens one layer keeps for attention.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSelection {
    retained: Vec<usize>,
    len: usize,
    threshold_p: Option<f64>,
}

impl TokenSelection {
    /// `retained` must be strictly increasing, non-empty and below `len`.
    pub fn new(retained: Vec<usize>, len: usize, threshold_p: Option<f64>) -> Result<Self> {
        if retained.is_empty() {
            return Err(Error::DegenerateSelection);
        }
        if !retained.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::contract("retained indices must be strictly increasing"));
        }
        if let Some(&last) = retained.last() {
            if last >= len {
                return Err(Error::Index { index: last, len });
            }
        }
        Ok(TokenSelection { retained, len, threshold_p })
    }

    pub fn full(len: usize) -> Self {
        TokenSelection { retained: (0..len).collect(), len, threshold_p: Some(1.0) }
    }

    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    /// `b = |T|`.
    pub fn budget(&self) -> usize {
        self.retained.len()
    }

    /// Sequence length the selection refers to.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    pub fn threshold_p(&self) -> Option<f64> {
        self.threshold_p
    }

    pub fn is_full(&self) -> bool {
        self.retained.len() == self.len
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.retained.binary_search(&pos).is_ok()
    }

    /// Binary key indicator over the sequence.
    pub fn key_mask(&self) -> Vec<u8> {
        let mut m = vec![0u8; self.len];
        for &i in &self.retained {
            m[i] = 1;
        }
        m
    }

    /// Queries and keys share one indicator.
    pub fn query_mask(&self) -> Vec<u8> {
        self.key_mask()
    }

    /// `‖M_Q‖₀ + ‖M_K‖₀` for masks broadcast over a head width `d`;
    /// dividing by `d` gives `2·b`.
    pub fn mask_zero_norm(&self, d: usize) -> usize {
        let ones = |m: Vec<u8>| m.iter().filter(|&&v| v == 1).count() * d;
        ones(self.query_mask()) + ones(self.key_mask())
    }
}

/// Indices of the `budget` largest scores (lowest index wins ties),
/// returned in ascending order.
pub fn select_important(scores: &[f64], budget: usize) -> Result<TokenSelection> {
    select_ranked(scores, budget, None)
}

fn select_ranked(scores: &[f64], budget: usize, threshold_p: Option<f64>) -> Result<TokenSelection> {
    let len = scores.len();
    if budget == 0 || budget > len {
        return Err(Error::domain(format!("budget {budget} outside [1, {len}]")));
    }
    let mut order: Vec<usize> = (0..len).collect();
    // stable sort keeps lower indices first among equal scores
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut retained = order[..budget].to_vec();
    retained.sort_unstable();
    TokenSelection::new(retained, len, threshold_p)
}

/// Retains `ceil(k_fraction · ℓ)` of the most salient tokens.
pub fn select_topk_fraction(scores: &[f64], k_fraction: f64) -> Result<TokenSelection> {
    if !(k_fraction > 0.0 && k_fraction <= 1.0) {
        return Err(Error::domain(format!("k fraction {k_fraction} outside (0, 1]")));
    }
    let budget = ((k_fraction * scores.len() as f64).ceil() as usize).clamp(1, scores.len().max(1));
    select_ranked(scores, budget, None)
}

/// Retains every token scoring strictly above `threshold`; if none does,
/// keeps the single highest-scoring token.
pub fn select_threshold(scores: &[f64], threshold: f64) -> Result<TokenSelection> {
    if !(threshold > 0.0) {
        return Err(Error::domain(format!("score threshold {threshold} must be positive")));
    }
    if scores.is_empty() {
        return Err(Error::DegenerateSelection);
    }
    let retained: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] > threshold).collect();
    if retained.is_empty() {
        return TokenSelection::new(vec![crate::numcore::argmax(scores)], scores.len(), None);
    }
    TokenSelection::new(retained, scores.len(), None)
}

/// How a layer turns its importance profile into a retained set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SelectionPolicy {
    /// Minimal budget covering fraction `p` of the attention mass, filled
    /// with the highest normalized scores.
    TopP(f64),
    TopKFraction(f64),
    ScoreThreshold(f64),
}

impl SelectionPolicy {
    pub fn select(&self, profile: &ImportanceProfile) -> Result<TokenSelection> {
        match *self {
            SelectionPolicy::TopP(p) => {
                let budget = determine_budget(&profile.accumulated, p, profile.probe_rows)?;
                select_ranked(&profile.normalized, budget, Some(p))
            }
            SelectionPolicy::TopKFraction(k) => select_topk_fraction(&profile.normalized, k),
            SelectionPolicy::ScoreThreshold(t) => select_threshold(&profile.normalized, t),
        }
    }

    /// True when the policy keeps every token regardless of the scores.
    pub fn is_dense(&self) -> bool {
        match *self {
            SelectionPolicy::TopP(p) => p >= 1.0,
            SelectionPolicy::TopKFraction(k) => k >= 1.0,
            SelectionPolicy::ScoreThreshold(_) => false,
        }
    }

    pub fn knob(&self) -> f64 {
        match *self {
            SelectionPolicy::TopP(v) | SelectionPolicy::TopKFraction(v) | SelectionPolicy::ScoreThreshold(v) => v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SelectionPolicy::TopP(p) if !(0.0..=1.0).contains(&p) => {
                Err(Error::domain(format!("retention threshold {p} outside [0, 1]")))
            }
            SelectionPolicy::TopKFraction(k) if !(k > 0.0 && k <= 1.0) => {
                Err(Error::domain(format!("k fraction {k} outside (0, 1]")))
            }
            SelectionPolicy::ScoreThreshold(t) if !(t > 0.0) => {
                Err(Error::domain(format!("score threshold {t} must be positive")))
            }
            _ => Ok(()),
        }
    }
}
