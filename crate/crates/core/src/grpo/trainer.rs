use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::loss::{grpo_batch_loss, reference_log_probs, LossSettings};
use super::optim::{clip_grad_norm, Adam};
use crate::error::{Error, Result};
use crate::microlm::{efficiency_proxies, generate, GenerationConfig, Model, ProbeMode};
use crate::numcore::SplitRng;
use crate::rollout::{judge_correct, sample_group, write_rollout_log, RolloutConfig, RolloutGroup, Sample};
use crate::sparse_attn::SelectionPolicy;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub lr: f64,
    pub rollout: RolloutConfig,
    /// Prompts per step; each yields one group.
    pub batch_prompts: usize,
    /// Optimizer steps per sampled batch.
    pub epochs: usize,
    pub steps: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub rederive_selections: bool,
    /// Evaluate every this many steps (0 disables periodic evaluation).
    pub eval_every: usize,
    pub checkpoint_every: usize,
}

impl TrainerConfig {
    pub fn new(rollout: RolloutConfig) -> Self {
        TrainerConfig {
            clip_eps: 0.2,
            kl_beta: 0.04,
            lr: 1e-3,
            rollout,
            batch_prompts: 4,
            epochs: 1,
            steps: 200,
            seed: 0,
            grad_clip: Some(1.0),
            rederive_selections: false,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::domain(format!("clip width {} outside (0, 1)", self.clip_eps)));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(Error::domain("KL weight must be non-negative"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::domain("learning rate must be non-negative"));
        }
        if self.batch_prompts == 0 || self.epochs == 0 {
            return Err(Error::domain("batch size and epochs must be positive"));
        }
        self.rollout.validate()
    }

    fn loss_settings(&self) -> LossSettings {
        LossSettings {
            clip_eps: self.clip_eps,
            kl_beta: self.kl_beta,
            rederive: self.rederive_selections.then_some(self.rollout.probe),
        }
    }
}

/// One row of the metrics trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub mean_tau: f64,
    pub accuracy: f64,
    pub mean_reward: f64,
    pub kl: f64,
    pub loss: f64,
}

pub const TRACE_HEADER: &str = "step,mean_tau,accuracy,mean_reward,kl,loss";

impl StepMetrics {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.mean_tau, self.accuracy, self.mean_reward, self.kl, self.loss)
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(Error::parse(format!("trace row needs 6 fields: {line:?}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::parse(format!("bad number {s:?}")));
        Ok(StepMetrics {
            step: f[0].parse().map_err(|_| Error::parse(format!("bad step {:?}", f[0])))?,
            mean_tau: num(f[1])?,
            accuracy: num(f[2])?,
            mean_reward: num(f[3])?,
            kl: num(f[4])?,
            loss: num(f[5])?,
        })
    }
}

pub fn write_trace(path: impl AsRef<Path>, rows: &[StepMetrics]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.to_csv())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<StepMetrics>> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim) != Some(TRACE_HEADER) {
        return Err(Error::parse("metrics trace lacks its header"));
    }
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            rows.push(StepMetrics::parse_csv(&line)?);
        }
    }
    Ok(rows)
}

/// Greedy evaluation at one selection setting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalPoint {
    pub accuracy: f64,
    pub mean_tau: f64,
    pub flop_proxy: f64,
    pub mem_proxy: f64,
}

/// Greedy-decodes every sample under `policy`; proxies are averaged over
/// samples.
pub fn evaluate_policy(
    model: &Model,
    samples: &[Sample],
    policy: SelectionPolicy,
    probe: ProbeMode,
    max_len: usize,
    end: usize,
) -> Result<EvalPoint> {
    if samples.is_empty() {
        return Err(Error::contract("no samples to evaluate"));
    }
    let dims = model.dims();
    let mut cfg = GenerationConfig::new(policy, max_len, 0.0, Some(end));
    cfg.probe = probe;
    let mut rng = SplitRng::new(0);
    let (mut correct, mut tau, mut flops, mut mem) = (0usize, 0.0, 0.0, 0.0);
    for s in samples {
        let out = generate(model, &s.prompt, &cfg, &mut rng)?;
        correct += usize::from(judge_correct(&out.response, &s.gold, end));
        tau += out.token_ratio;
        let p = efficiency_proxies(&out.budgets, out.response.len().saturating_sub(1), dims.head_dim(), dims.heads);
        flops += p.flops;
        mem += p.memory;
    }
    let n = samples.len() as f64;
    Ok(EvalPoint { accuracy: correct as f64 / n, mean_tau: tau / n, flop_proxy: flops / n, mem_proxy: mem / n })
}

/// Policy, frozen dense reference, and optimizer state.
pub struct Trainer {
    pub policy: Model,
    reference: Model,
    optimizer: Adam,
    pub cfg: TrainerConfig,
    step: u64,
}

impl Trainer {
    /// The reference starts as a copy of `policy` and never changes.
    pub fn new(policy: Model, cfg: TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer { reference: policy.clone(), optimizer: Adam::new(cfg.lr), policy, cfg, step: 0 })
    }

    pub fn reference(&self) -> &Model {
        &self.reference
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Samples one group per prompt in `batch`, then takes `epochs`
    /// optimizer steps on the GRPO loss. Returns the groups with the metrics.
    pub fn train_step(&mut self, batch: &[(usize, &Sample)]) -> Result<(StepMetrics, Vec<RolloutGroup>)> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let step_rng = SplitRng::new(self.cfg.seed).split(self.step);
        let mut groups = Vec::with_capacity(batch.len());
        let mut ref_lp = Vec::new();
        for (i, (id, s)) in batch.iter().enumerate() {
            let seed = step_rng.split(i as u64).seed();
            let group = sample_group(&self.policy, *id, &s.prompt, &s.gold, &self.cfg.rollout, seed)?;
            let responses: Vec<&[usize]> = group.records.iter().map(|r| r.response.as_slice()).collect();
            ref_lp.extend(reference_log_probs(&self.reference, &s.prompt, &responses)?);
            groups.push(group);
        }
        let settings = self.cfg.loss_settings();
        let mut first = None;
        for _ in 0..self.cfg.epochs {
            let (terms, mut grads) = grpo_batch_loss(&self.policy, &groups, &ref_lp, &settings)?;
            if !terms.objective.is_finite() {
                return Err(Error::Training(format!("non-finite objective at step {}", self.step)));
            }
            if let Some(c) = self.cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            self.optimizer.step(self.policy.params_mut(), &grads)?;
            first.get_or_insert(terms);
        }
        let terms = first.expect("at least one epoch");
        let n = groups.len() as f64;
        let metrics = StepMetrics {
            step: self.step,
            mean_tau: groups.iter().map(RolloutGroup::mean_ratio).sum::<f64>() / n,
            accuracy: groups.iter().map(RolloutGroup::accuracy).sum::<f64>() / n,
            mean_reward: groups.iter().map(RolloutGroup::mean_reward).sum::<f64>() / n,
            kl: terms.kl,
            loss: -terms.objective,
        };
        self.step += 1;
        Ok((metrics, groups))
    }
}

/// Where and how often the forcing loop writes artifacts.
#[derive(Clone, Debug, Default)]
pub struct LoopOutputs {
    pub dir: Option<PathBuf>,
    pub rollout_log: bool,
}

#[derive(Clone, Debug)]
pub struct ForcingOutcome {
    pub model: Model,
    pub trace: Vec<StepMetrics>,
    /// `(step, evaluation at the fixed evaluation policy)`; includes step 0
    /// and the final step when periodic evaluation is on.
    pub evals: Vec<(u64, EvalPoint)>,
}

/// Runs the forcing loop from a pretrained model: each step draws a batch of
/// training prompts, samples groups, and updates the policy.
pub fn sparsity_forcing_loop(
    pretrained: Model,
    cfg: &TrainerConfig,
    train: &[Sample],
    eval: &[Sample],
    outputs: &LoopOutputs,
) -> Result<ForcingOutcome> {
    if train.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    let mut trainer = Trainer::new(pretrained, cfg.clone())?;
    let eval_policy = cfg.rollout.variant.eval_policy();
    let evaluate = |m: &Model| evaluate_policy(m, eval, eval_policy, cfg.rollout.probe, cfg.rollout.max_len, cfg.rollout.stop_token);
    let mut log = match (&outputs.dir, outputs.rollout_log) {
        (Some(dir), true) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join("rollouts.log"))?))
        }
        _ => None,
    };
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    if cfg.eval_every > 0 && !eval.is_empty() {
        evals.push((0, evaluate(&trainer.policy)?));
    }
    let mut order = SplitRng::new(cfg.seed).split(u64::MAX);
    for step in 0..cfg.steps {
        let batch: Vec<(usize, &Sample)> = (0..cfg.batch_prompts)
            .map(|_| {
                let i = order.below(train.len());
                (i, &train[i])
            })
            .collect();
        let (metrics, groups) = trainer.train_step(&batch)?;
        if let Some(w) = log.as_mut() {
            write_rollout_log(w, metrics.step, &groups)?;
        }
        trace.push(metrics);
        let done = step + 1;
        if cfg.eval_every > 0 && !eval.is_empty() && (done % cfg.eval_every == 0 || done == cfg.steps) {
            evals.push((done as u64, evaluate(&trainer.policy)?));
        }
        if let Some(dir) = &outputs.dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                fs::create_dir_all(dir)?;
                trainer.policy.save(dir.join(format!("policy_step{done}.ckpt")), done as u64)?;
            }
        }
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    if let Some(dir) = &outputs.dir {
        fs::create_dir_all(dir)?;
        write_trace(dir.join("metrics.csv"), &trace)?;
        trainer.policy.save(dir.join("policy.ckpt"), cfg.steps as u64)?;
    }
    Ok(ForcingOutcome { model: trainer.policy, trace, evals })
}
