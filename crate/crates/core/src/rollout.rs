//! Grouped rollouts under randomly drawn retention thresholds, the
//! group-gated joint reward, and advantage normalization.

use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use crate::error::{Error, Result};
use crate::microlm::{generate, CacheMode, GenerationConfig, Model, ProbeMode};
use crate::numcore::SplitRng;
use crate::sparse_attn::{SelectionPolicy, TokenSelection, VariantConfig};

/// A prompt with its reference answer (answer tokens then the terminator).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub prompt: Vec<usize>,
    pub gold: Vec<usize>,
}

/// How a rollout's selection knob is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KnobSampling {
    /// Uniformly from the variant's discrete grid.
    #[default]
    Grid,
    /// Uniformly from `(0, 1)`; only meaningful for top-p.
    Continuous,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutConfig {
    pub group_size: usize,
    pub variant: VariantConfig,
    pub knob_sampling: KnobSampling,
    pub temperature: f64,
    pub max_len: usize,
    pub stop_token: usize,
    pub probe: ProbeMode,
    pub cache: CacheMode,
}

impl RolloutConfig {
    pub fn new(max_len: usize, stop_token: usize) -> Self {
        RolloutConfig {
            group_size: 8,
            variant: VariantConfig::default(),
            knob_sampling: KnobSampling::Grid,
            temperature: 1.0,
            max_len,
            stop_token,
            probe: ProbeMode::All,
            cache: CacheMode::Pruned,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::domain(format!("group size {} must be at least 2", self.group_size)));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::domain("temperature must be non-negative"));
        }
        self.variant.validate()
    }

    fn draw_policy(&self, rng: &mut SplitRng) -> SelectionPolicy {
        match self.knob_sampling {
            KnobSampling::Grid => {
                let grid = self.variant.rollout_grid();
                self.variant.policy(grid[rng.below(grid.len())])
            }
            KnobSampling::Continuous => self.variant.policy(rng.uniform()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutRecord {
    pub prompt_id: usize,
    pub response: Vec<usize>,
    /// Selection rule with the knob value this rollout sampled.
    pub policy: SelectionPolicy,
    pub token_ratio: f64,
    pub selections: Vec<TokenSelection>,
    /// Log-probabilities under the sampling policy.
    pub old_log_probs: Vec<f64>,
    pub correct: bool,
    pub reward: f64,
    pub advantage: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub prompt: Vec<usize>,
    pub records: Vec<RolloutRecord>,
    /// True when at least one record is correct.
    pub gate: bool,
    pub seed: u64,
}

impl RolloutGroup {
    pub fn accuracy(&self) -> f64 {
        self.records.iter().filter(|r| r.correct).count() as f64 / self.records.len() as f64
    }

    pub fn mean_ratio(&self) -> f64 {
        self.records.iter().map(|r| r.token_ratio).sum::<f64>() / self.records.len() as f64
    }

    pub fn mean_reward(&self) -> f64 {
        self.records.iter().map(|r| r.reward).sum::<f64>() / self.records.len() as f64
    }
}

/// Answer span: tokens before the first `end`, or `None` without one.
fn answer_span(tokens: &[usize], end: usize) -> Option<&[usize]> {
    tokens.iter().position(|&t| t == end).map(|i| &tokens[..i])
}

/// Exact match of the answer spans of `response` and `gold`. A response
/// without the terminator is incorrect.
pub fn judge_correct(response: &[usize], gold: &[usize], end: usize) -> bool {
    match (answer_span(response, end), answer_span(gold, end)) {
        (Some(r), Some(g)) => r == g,
        (Some(r), None) => r == gold,
        (None, _) => false,
    }
}

/// Gate `C` and rewards `r_i = correct_i + C·(1 − τ_i)`.
pub fn compute_rewards(correct: &[bool], ratios: &[f64]) -> (bool, Vec<f64>) {
    let gate = correct.iter().any(|&c| c);
    let c = if gate { 1.0 } else { 0.0 };
    let rewards = correct.iter().zip(ratios).map(|(&ok, &tau)| if ok { 1.0 } else { 0.0 } + c * (1.0 - tau)).collect();
    (gate, rewards)
}

/// `(r_i − mean) / std` with the population standard deviation; all zeros
/// when the spread is below `1e-8`.
pub fn compute_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    if std < 1e-8 {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Samples `group_size` rollouts for one prompt, each under a freshly drawn
/// knob, then fills in rewards and advantages.
pub fn sample_group(
    model: &Model,
    prompt_id: usize,
    prompt: &[usize],
    gold: &[usize],
    cfg: &RolloutConfig,
    seed: u64,
) -> Result<RolloutGroup> {
    cfg.validate()?;
    let base = SplitRng::new(seed);
    let mut records = Vec::with_capacity(cfg.group_size);
    for n in 0..cfg.group_size {
        let mut rng = base.split(n as u64);
        let policy = cfg.draw_policy(&mut rng);
        let gen_cfg = GenerationConfig {
            policy,
            probe: cfg.probe,
            cache: cfg.cache,
            max_len: cfg.max_len,
            temperature: cfg.temperature,
            stop_token: Some(cfg.stop_token),
        };
        let out = generate(model, prompt, &gen_cfg, &mut rng).map_err(|e| Error::Rollout { index: n, source: Box::new(e) })?;
        records.push(RolloutRecord {
            prompt_id,
            correct: judge_correct(&out.response, gold, cfg.stop_token),
            response: out.response,
            policy,
            token_ratio: out.token_ratio,
            selections: out.selections,
            old_log_probs: out.log_probs,
            reward: 0.0,
            advantage: 0.0,
        });
    }
    let correct: Vec<bool> = records.iter().map(|r| r.correct).collect();
    let ratios: Vec<f64> = records.iter().map(|r| r.token_ratio).collect();
    let (gate, rewards) = compute_rewards(&correct, &ratios);
    for ((rec, r), a) in records.iter_mut().zip(&rewards).zip(compute_advantages(&rewards)) {
        rec.reward = *r;
        rec.advantage = a;
    }
    Ok(RolloutGroup { prompt: prompt.to_vec(), records, gate, seed })
}

/// One line of the rollout log.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutLogEntry {
    pub step: u64,
    pub prompt_id: usize,
    pub knob: f64,
    pub token_ratio: f64,
    pub correct: bool,
    pub reward: f64,
    pub advantage: f64,
    pub response: Vec<usize>,
}

impl RolloutLogEntry {
    pub fn from_record(step: u64, r: &RolloutRecord) -> Self {
        RolloutLogEntry {
            step,
            prompt_id: r.prompt_id,
            knob: r.policy.knob(),
            token_ratio: r.token_ratio,
            correct: r.correct,
            reward: r.reward,
            advantage: r.advantage,
            response: r.response.clone(),
        }
    }

    pub fn to_line(&self) -> String {
        let mut s = format!(
            "step={} prompt={} knob={} tau={} correct={} reward={} advantage={} response=",
            self.step,
            self.prompt_id,
            self.knob,
            self.token_ratio,
            u8::from(self.correct),
            self.reward,
            self.advantage
        );
        for (i, t) in self.response.iter().enumerate() {
            let _ = write!(s, "{}{t}", if i > 0 { "," } else { "" });
        }
        s
    }

    pub fn parse(line: &str) -> Result<Self> {
        let mut e = RolloutLogEntry {
            step: 0,
            prompt_id: 0,
            knob: 0.0,
            token_ratio: 0.0,
            correct: false,
            reward: 0.0,
            advantage: 0.0,
            response: Vec::new(),
        };
        let bad = |f: &str| Error::parse(format!("bad rollout log field {f:?}"));
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| bad(field))?;
            match k {
                "step" => e.step = v.parse().map_err(|_| bad(field))?,
                "prompt" => e.prompt_id = v.parse().map_err(|_| bad(field))?,
                "knob" => e.knob = v.parse().map_err(|_| bad(field))?,
                "tau" => e.token_ratio = v.parse().map_err(|_| bad(field))?,
                "correct" => e.correct = v == "1",
                "reward" => e.reward = v.parse().map_err(|_| bad(field))?,
                "advantage" => e.advantage = v.parse().map_err(|_| bad(field))?,
                "response" if v.is_empty() => {}
                "response" => {
                    e.response = v.split(',').map(|t| t.parse().map_err(|_| bad(field))).collect::<Result<_>>()?;
                }
                _ => return Err(bad(field)),
            }
        }
        Ok(e)
    }
}

pub fn write_rollout_log<W: Write>(out: &mut W, step: u64, groups: &[RolloutGroup]) -> io::Result<()> {
    for g in groups {
        for r in &g.records {
            writeln!(out, "{}", RolloutLogEntry::from_record(step, r).to_line())?;
        }
    }
    Ok(())
}

pub fn read_rollout_log<R: BufRead>(input: R) -> Result<Vec<RolloutLogEntry>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(RolloutLogEntry::parse(&line)?);
        }
    }
    Ok(out)
}
