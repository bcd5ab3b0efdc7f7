//! Flat `key = value` run configuration shared by every CLI subcommand.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::grpo::TrainerConfig;
use crate::microlm::{CacheMode, ModelDims, ProbeMode};
use crate::rollout::{KnobSampling, RolloutConfig};

use super::pretrain::PretrainConfig;
use super::task::{TaskConfig, END};

/// Overrides the default output directory.
pub const OUT_DIR_ENV: &str = "SPARSITY_FORCING_OUT";
pub const DEFAULT_OUT_DIR: &str = "runs";

/// Values of `p` swept by default.
pub const DEFAULT_SWEEP: [f64; 6] = [0.80, 0.85, 0.90, 0.94, 0.975, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub task: TaskConfig,
    /// Samples generated by gen-data.
    pub samples: usize,
    /// Fraction of samples held out for evaluation.
    pub holdout: f64,
    pub model: ModelDims,
    pub model_seed: u64,
    pub pretrain: PretrainConfig,
    pub trainer: TrainerConfig,
    /// Held-out samples used by periodic evaluation and sweeps.
    pub eval_samples: usize,
    pub sweep: Vec<f64>,
    pub sharp_block: usize,
    pub sharp_weight: f64,
}

pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_DIR), PathBuf::from)
}

impl Default for RunConfig {
    fn default() -> Self {
        let task = TaskConfig::default();
        let rollout = RolloutConfig::new(2, END);
        RunConfig {
            out_dir: default_out_dir(),
            samples: 20000,
            holdout: 0.1,
            model: ModelDims::desk(task.vocab, task.max_seq()),
            model_seed: 0,
            pretrain: PretrainConfig::default(),
            trainer: TrainerConfig { eval_every: 50, ..TrainerConfig::new(rollout) },
            eval_samples: 100,
            sweep: DEFAULT_SWEEP.to_vec(),
            sharp_block: 16,
            sharp_weight: 0.1,
            task,
        }
    }
}

fn list(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |x| x.to_string())
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::parse(format!("bad value {v:?} for {key}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|x| num(key, x.trim())).collect()
}

fn parse_opt(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn flag(key: &str, v: &str) -> Result<bool> {
    num(key, v)
}

impl RunConfig {
    /// One `key = value` line per field, in a fixed order.
    pub fn to_text(&self) -> String {
        let (t, m, p, tr) = (&self.task, &self.model, &self.pretrain, &self.trainer);
        let r = &tr.rollout;
        let v = &r.variant;
        let knob = match r.knob_sampling {
            KnobSampling::Grid => "grid",
            KnobSampling::Continuous => "continuous",
        };
        let cache = match r.cache {
            CacheMode::Pruned => "pruned",
            CacheMode::FullDynamicFetch => "full_dynamic_fetch",
        };
        let entries: Vec<(&str, String)> = vec![
            ("out_dir", self.out_dir.display().to_string()),
            ("task.vocab", t.vocab.to_string()),
            ("task.seq_len", t.seq_len.to_string()),
            ("task.pairs", t.pairs.to_string()),
            ("task.keys", t.keys.to_string()),
            ("task.values", t.values.to_string()),
            ("task.filler_density", t.filler_density.to_string()),
            ("task.seed", t.seed.to_string()),
            ("data.samples", self.samples.to_string()),
            ("data.holdout", self.holdout.to_string()),
            ("model.layers", m.layers.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.d_model", m.d_model.to_string()),
            ("model.d_ff", m.d_ff.to_string()),
            ("model.vocab", m.vocab.to_string()),
            ("model.max_seq", m.max_seq.to_string()),
            ("model.seed", self.model_seed.to_string()),
            ("pretrain.steps", p.steps.to_string()),
            ("pretrain.batch", p.batch.to_string()),
            ("pretrain.lr", p.lr.to_string()),
            ("pretrain.seed", p.seed.to_string()),
            ("pretrain.grad_clip", opt(p.grad_clip)),
            ("force.steps", tr.steps.to_string()),
            ("force.lr", tr.lr.to_string()),
            ("force.clip_eps", tr.clip_eps.to_string()),
            ("force.kl_beta", tr.kl_beta.to_string()),
            ("force.batch_prompts", tr.batch_prompts.to_string()),
            ("force.epochs", tr.epochs.to_string()),
            ("force.seed", tr.seed.to_string()),
            ("force.grad_clip", opt(tr.grad_clip)),
            ("force.rederive_selections", tr.rederive_selections.to_string()),
            ("force.eval_every", tr.eval_every.to_string()),
            ("force.checkpoint_every", tr.checkpoint_every.to_string()),
            ("force.group_size", r.group_size.to_string()),
            ("force.temperature", r.temperature.to_string()),
            ("force.max_len", r.max_len.to_string()),
            ("force.knob_sampling", knob.into()),
            ("force.probe", r.probe.to_string()),
            ("force.cache", cache.into()),
            ("variant.mode", v.mode.to_string()),
            ("variant.top_p_grid", list(&v.top_p_grid)),
            ("variant.k_fraction_grid", list(&v.k_fraction_grid)),
            ("variant.threshold_grid", list(&v.threshold_grid)),
            ("variant.eval_top_p", v.eval_top_p.to_string()),
            ("variant.eval_k_fraction", v.eval_k_fraction.to_string()),
            ("variant.eval_threshold", v.eval_threshold.to_string()),
            ("eval.samples", self.eval_samples.to_string()),
            ("eval.sweep", list(&self.sweep)),
            ("sharp.block", self.sharp_block.to_string()),
            ("sharp.weight", self.sharp_weight.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (t, m, p, tr) = (&mut self.task, &mut self.model, &mut self.pretrain, &mut self.trainer);
        let r = &mut tr.rollout;
        match key {
            "out_dir" => self.out_dir = PathBuf::from(v),
            "task.vocab" => t.vocab = num(key, v)?,
            "task.seq_len" => t.seq_len = num(key, v)?,
            "task.pairs" => t.pairs = num(key, v)?,
            "task.keys" => t.keys = num(key, v)?,
            "task.values" => t.values = num(key, v)?,
            "task.filler_density" => t.filler_density = num(key, v)?,
            "task.seed" => t.seed = num(key, v)?,
            "data.samples" => self.samples = num(key, v)?,
            "data.holdout" => self.holdout = num(key, v)?,
            "model.layers" => m.layers = num(key, v)?,
            "model.heads" => m.heads = num(key, v)?,
            "model.d_model" => m.d_model = num(key, v)?,
            "model.d_ff" => m.d_ff = num(key, v)?,
            "model.vocab" => m.vocab = num(key, v)?,
            "model.max_seq" => m.max_seq = num(key, v)?,
            "model.seed" => self.model_seed = num(key, v)?,
            "pretrain.steps" => p.steps = num(key, v)?,
            "pretrain.batch" => p.batch = num(key, v)?,
            "pretrain.lr" => p.lr = num(key, v)?,
            "pretrain.seed" => p.seed = num(key, v)?,
            "pretrain.grad_clip" => p.grad_clip = parse_opt(key, v)?,
            "force.steps" => tr.steps = num(key, v)?,
            "force.lr" => tr.lr = num(key, v)?,
            "force.clip_eps" => tr.clip_eps = num(key, v)?,
            "force.kl_beta" => tr.kl_beta = num(key, v)?,
            "force.batch_prompts" => tr.batch_prompts = num(key, v)?,
            "force.epochs" => tr.epochs = num(key, v)?,
            "force.seed" => tr.seed = num(key, v)?,
            "force.grad_clip" => tr.grad_clip = parse_opt(key, v)?,
            "force.rederive_selections" => tr.rederive_selections = flag(key, v)?,
            "force.eval_every" => tr.eval_every = num(key, v)?,
            "force.checkpoint_every" => tr.checkpoint_every = num(key, v)?,
            "force.group_size" => r.group_size = num(key, v)?,
            "force.temperature" => r.temperature = num(key, v)?,
            "force.max_len" => r.max_len = num(key, v)?,
            "force.knob_sampling" => {
                r.knob_sampling = match v {
                    "grid" => KnobSampling::Grid,
                    "continuous" => KnobSampling::Continuous,
                    _ => return Err(Error::parse(format!("bad knob sampling {v:?}"))),
                }
            }
            "force.probe" => r.probe = v.parse::<ProbeMode>()?,
            "force.cache" => {
                r.cache = match v {
                    "pruned" => CacheMode::Pruned,
                    "full_dynamic_fetch" => CacheMode::FullDynamicFetch,
                    _ => return Err(Error::parse(format!("bad cache mode {v:?}"))),
                }
            }
            "variant.mode" => r.variant.mode = v.parse()?,
            "variant.top_p_grid" => r.variant.top_p_grid = parse_list(key, v)?,
            "variant.k_fraction_grid" => r.variant.k_fraction_grid = parse_list(key, v)?,
            "variant.threshold_grid" => r.variant.threshold_grid = parse_list(key, v)?,
            "variant.eval_top_p" => r.variant.eval_top_p = num(key, v)?,
            "variant.eval_k_fraction" => r.variant.eval_k_fraction = num(key, v)?,
            "variant.eval_threshold" => r.variant.eval_threshold = num(key, v)?,
            "eval.samples" => self.eval_samples = num(key, v)?,
            "eval.sweep" => self.sweep = parse_list(key, v)?,
            "sharp.block" => self.sharp_block = num(key, v)?,
            "sharp.weight" => self.sharp_weight = num(key, v)?,
            _ => return Err(Error::parse(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults; `#` starts a
    /// comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::parse(format!("expected key = value, got {line:?}")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        if self.model.vocab != self.task.vocab {
            return Err(Error::contract(format!("model vocab {} differs from task vocab {}", self.model.vocab, self.task.vocab)));
        }
        if self.model.max_seq < self.task.max_seq() {
            return Err(Error::contract(format!("model max_seq {} below task length {}", self.model.max_seq, self.task.max_seq())));
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(Error::domain(format!("holdout fraction {} outside (0, 1)", self.holdout)));
        }
        if self.sweep.is_empty() {
            return Err(Error::domain("empty sweep"));
        }
        self.trainer.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.task.filler_density = 0.3;
        cfg.trainer.grad_clip = None;
        cfg.trainer.rollout.probe = ProbeMode::Stride(4);
        cfg.trainer.rollout.cache = CacheMode::FullDynamicFetch;
        cfg.sweep = vec![0.1, 0.975, 1.0];
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn comments_and_unknown_keys() {
        let cfg = RunConfig::from_text("# note\nforce.steps = 7 # trailing\n\n").unwrap();
        assert_eq!(cfg.trainer.steps, 7);
        assert!(RunConfig::from_text("nope = 1").is_err());
        assert!(RunConfig::from_text("force.steps").is_err());
        assert!(RunConfig::from_text("force.steps = x").is_err());
    }

    #[test]
    fn mismatched_vocab_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.model.vocab = 50;
        assert!(cfg.validate().is_err());
    }
}
