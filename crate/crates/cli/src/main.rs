use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use sparsity_forcing::grpo::{sparsity_forcing_loop, LoopOutputs};
use sparsity_forcing::harness::{
    evaluate_sweep, gen_retrieval_task, parse_report_rows, pretrain_supervised, read_dataset, render_sweep_svg, split_holdout,
    train_sharpness_baseline, write_dataset, EvalReport, EvalRow, RunConfig, BASELINE_KEEP,
};
use sparsity_forcing::microlm::Model;
use sparsity_forcing::rollout::Sample;
use sparsity_forcing::sparse_attn::SelectionMode;
use sparsity_forcing::{Error, Result};

/// Experiments with reward-driven attention sparsity on a small decoder.
#[derive(Parser)]
#[command(name = "sflab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the retrieval dataset (train.tsv, test.tsv).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of samples before the held-out split.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Supervised pretraining with dense attention.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run the sparsity forcing loop from a pretrained checkpoint.
    Force {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Pretrained checkpoint (default: <out>/pretrained.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Selection rule: top_p, top_k_fraction or score_threshold.
        #[arg(long)]
        mode: Option<SelectionMode>,
        /// Also write every rollout to rollouts.log.
        #[arg(long)]
        log_rollouts: bool,
    },
    /// Evaluate a checkpoint at several selection settings.
    EvalSweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated knob values (p for top-p).
        #[arg(long, value_delimiter = ',')]
        p: Option<Vec<f64>>,
        #[arg(long)]
        mode: Option<SelectionMode>,
        /// Output CSV (default: <out>/report.csv).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train with the block sharpness regularizer and evaluate at 25% retention.
    BaselineSharpness {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        block: Option<usize>,
        #[arg(long)]
        weight: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Render a sweep report CSV as SVG curves.
    Plot {
        report: PathBuf,
        /// Output SVG (default: report path with .svg).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Run configuration file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct DataArgs {
    /// Directory with train.tsv and test.tsv (default: the output directory).
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_text(&fs::read_to_string(path)?)?;
        }
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Parse(format!("override {kv:?} is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

/// Writes the resolved config next to the run's artifacts and echoes it.
fn log_config(cfg: &RunConfig, command: &str) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let text = cfg.to_text();
    fs::write(cfg.out_dir.join(format!("{command}.cfg")), &text)?;
    eprintln!("# {command}\n{text}");
    Ok(())
}

fn load_data(cfg: &RunConfig, data: &DataArgs) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let dir = data.data.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let train = read_dataset(dir.join("train.tsv"))?;
    let test = read_dataset(dir.join("test.tsv"))?;
    Ok((train, test))
}

fn load_model(cfg: &RunConfig, checkpoint: &Option<PathBuf>, default: &str) -> Result<Model> {
    let path = checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join(default));
    Ok(Model::load(&path)?.0)
}

fn eval_slice<'a>(cfg: &RunConfig, test: &'a [Sample]) -> &'a [Sample] {
    &test[..cfg.eval_samples.min(test.len())]
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, samples } => {
            let mut cfg = common.resolve()?;
            if let Some(s) = common.seed {
                cfg.task.seed = s;
            }
            if let Some(n) = samples {
                cfg.samples = n;
            }
            log_config(&cfg, "gen-data")?;
            let all = gen_retrieval_task(&cfg.task, cfg.samples)?;
            let (train, test) = split_holdout(&all, cfg.holdout, cfg.task.seed);
            write_dataset(cfg.out_dir.join("train.tsv"), &train)?;
            write_dataset(cfg.out_dir.join("test.tsv"), &test)?;
            println!("train={} test={}", train.len(), test.len());
        }
        Command::Pretrain { common, data, steps } => {
            let mut cfg = common.resolve()?;
            if let Some(s) = common.seed {
                cfg.pretrain.seed = s;
                cfg.model_seed = s;
            }
            if let Some(n) = steps {
                cfg.pretrain.steps = n;
            }
            log_config(&cfg, "pretrain")?;
            let (train, test) = load_data(&cfg, &data)?;
            let start = Instant::now();
            let report = pretrain_supervised(Model::init(cfg.model, cfg.model_seed)?, &train, eval_slice(&cfg, &test), &cfg.pretrain)?;
            report.model.save(cfg.out_dir.join("pretrained.ckpt"), cfg.pretrain.steps as u64)?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in report.losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l}\n"));
            }
            fs::write(cfg.out_dir.join("pretrain_loss.csv"), csv)?;
            println!("accuracy={} seconds={:.1}", report.accuracy, start.elapsed().as_secs_f64());
        }
        Command::Force { common, data, checkpoint, steps, mode, log_rollouts } => {
            let mut cfg = common.resolve()?;
            if let Some(s) = common.seed {
                cfg.trainer.seed = s;
            }
            if let Some(n) = steps {
                cfg.trainer.steps = n;
            }
            if let Some(m) = mode {
                cfg.trainer.rollout.variant.mode = m;
            }
            log_config(&cfg, "force")?;
            let (train, test) = load_data(&cfg, &data)?;
            let model = load_model(&cfg, &checkpoint, "pretrained.ckpt")?;
            let outputs = LoopOutputs { dir: Some(cfg.out_dir.clone()), rollout_log: log_rollouts };
            let start = Instant::now();
            let outcome = sparsity_forcing_loop(model, &cfg.trainer, &train, eval_slice(&cfg, &test), &outputs)?;
            let mut csv = String::from("step,accuracy,mean_tau,flop_proxy,mem_proxy\n");
            for (step, e) in &outcome.evals {
                csv.push_str(&format!("{step},{},{},{},{}\n", e.accuracy, e.mean_tau, e.flop_proxy, e.mem_proxy));
                println!("step={step} accuracy={} mean_tau={}", e.accuracy, e.mean_tau);
            }
            fs::write(cfg.out_dir.join("evals.csv"), csv)?;
            println!("steps={} seconds={:.1}", outcome.trace.len(), start.elapsed().as_secs_f64());
        }
        Command::EvalSweep { common, data, checkpoint, p, mode, report } => {
            let mut cfg = common.resolve()?;
            if let Some(p) = p {
                cfg.sweep = p;
            }
            if let Some(m) = mode {
                cfg.trainer.rollout.variant.mode = m;
            }
            log_config(&cfg, "eval-sweep")?;
            let (_, test) = load_data(&cfg, &data)?;
            let model = load_model(&cfg, &checkpoint, "policy.ckpt")?;
            let variant = &cfg.trainer.rollout.variant;
            let policies: Vec<_> = cfg.sweep.iter().map(|&k| variant.policy(k)).collect();
            let rep = evaluate_sweep(&model, eval_slice(&cfg, &test), &policies, cfg.trainer.rollout.probe)?;
            let path = report.unwrap_or_else(|| cfg.out_dir.join("report.csv"));
            rep.write_csv(&path)?;
            println!("variant={} checksum={:016x} rows={} report={}", rep.variant, rep.checksum, rep.rows.len(), path.display());
        }
        Command::BaselineSharpness { common, data, block, weight, steps } => {
            let mut cfg = common.resolve()?;
            if let Some(s) = common.seed {
                cfg.pretrain.seed = s;
                cfg.model_seed = s;
            }
            if let Some(b) = block {
                cfg.sharp_block = b;
            }
            if let Some(w) = weight {
                cfg.sharp_weight = w;
            }
            if let Some(n) = steps {
                cfg.pretrain.steps = n;
            }
            log_config(&cfg, "baseline-sharpness")?;
            let (train, test) = load_data(&cfg, &data)?;
            let init = Model::init(cfg.model, cfg.model_seed)?;
            let rep = train_sharpness_baseline(init, &train, eval_slice(&cfg, &test), &cfg.pretrain, cfg.sharp_block, cfg.sharp_weight)?;
            rep.train.model.save(cfg.out_dir.join("baseline.ckpt"), cfg.pretrain.steps as u64)?;
            let report = EvalReport {
                variant: "top_k_fraction".into(),
                checksum: rep.train.model.checksum(),
                rows: vec![EvalRow { knob: BASELINE_KEEP, point: rep.eval }],
            };
            report.write_csv(cfg.out_dir.join("baseline.csv"))?;
            println!("dense_accuracy={} accuracy={} mean_tau={}", rep.train.accuracy, rep.eval.accuracy, rep.eval.mean_tau);
        }
        Command::Plot { report, out } => {
            let rows = parse_report_rows(std::io::BufReader::new(fs::File::open(&report)?))?;
            let out = out.unwrap_or_else(|| report.with_extension("svg"));
            fs::write(&out, render_sweep_svg(&rows))?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
