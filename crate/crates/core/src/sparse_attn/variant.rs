use std::fmt;
use std::str::FromStr;

use super::selection::SelectionPolicy;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionMode {
    TopP,
    TopKFraction,
    ScoreThreshold,
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMode::TopP => "top_p",
            SelectionMode::TopKFraction => "top_k_fraction",
            SelectionMode::ScoreThreshold => "score_threshold",
        })
    }
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top_p" => Ok(SelectionMode::TopP),
            "top_k_fraction" | "top_k" => Ok(SelectionMode::TopKFraction),
            "score_threshold" | "threshold" => Ok(SelectionMode::ScoreThreshold),
            other => Err(Error::parse(format!("unknown selection mode {other:?}"))),
        }
    }
}

/// Inclusive arithmetic grid `start, start+step, ..., end`.
pub fn grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    let n = ((end - start) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| round12(start + i as f64 * step)).collect()
}

fn round12(v: f64) -> f64 {
    (v * 1e12).round() / 1e12
}

/// Which selection rule to train and evaluate with, and the knob values
/// each rule draws from during rollouts.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantConfig {
    pub mode: SelectionMode,
    pub top_p_grid: Vec<f64>,
    pub k_fraction_grid: Vec<f64>,
    pub threshold_grid: Vec<f64>,
    pub eval_top_p: f64,
    pub eval_k_fraction: f64,
    pub eval_threshold: f64,
}

impl Default for VariantConfig {
    fn default() -> Self {
        VariantConfig {
            mode: SelectionMode::TopP,
            top_p_grid: grid(0.94, 0.975, 0.005),
            k_fraction_grid: grid(0.25, 0.50, 0.05),
            threshold_grid: grid(1e-3, 1e-2, 0.002),
            eval_top_p: 0.975,
            eval_k_fraction: 0.25,
            eval_threshold: 1e-3,
        }
    }
}

impl VariantConfig {
    pub fn with_mode(mode: SelectionMode) -> Self {
        VariantConfig { mode, ..Default::default() }
    }

    /// Knob values rollouts sample from.
    pub fn rollout_grid(&self) -> &[f64] {
        match self.mode {
            SelectionMode::TopP => &self.top_p_grid,
            SelectionMode::TopKFraction => &self.k_fraction_grid,
            SelectionMode::ScoreThreshold => &self.threshold_grid,
        }
    }

    pub fn policy(&self, knob: f64) -> SelectionPolicy {
        match self.mode {
            SelectionMode::TopP => SelectionPolicy::TopP(knob),
            SelectionMode::TopKFraction => SelectionPolicy::TopKFraction(knob),
            SelectionMode::ScoreThreshold => SelectionPolicy::ScoreThreshold(knob),
        }
    }

    pub fn eval_policy(&self) -> SelectionPolicy {
        match self.mode {
            SelectionMode::TopP => SelectionPolicy::TopP(self.eval_top_p),
            SelectionMode::TopKFraction => SelectionPolicy::TopKFraction(self.eval_k_fraction),
            SelectionMode::ScoreThreshold => SelectionPolicy::ScoreThreshold(self.eval_threshold),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |g: &[f64]| g.iter().all(|&v| v > 0.0 && v <= 1.0);
        if self.top_p_grid.is_empty() || !in_unit(&self.top_p_grid) {
            return Err(Error::domain("top-p grid must be non-empty and inside (0, 1]"));
        }
        if self.k_fraction_grid.is_empty() || !in_unit(&self.k_fraction_grid) {
            return Err(Error::domain("k-fraction grid must be non-empty and inside (0, 1]"));
        }
        if self.threshold_grid.is_empty() || self.threshold_grid.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::domain("score thresholds must be positive"));
        }
        self.eval_policy().validate()
    }
}
