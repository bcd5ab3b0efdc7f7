//! Synthetic retrieval task, supervised pretraining, evaluation sweeps, the
//! sharpness baseline, run configuration and plotting.

mod baseline;
mod config;
mod eval;
mod plot;
mod pretrain;
mod task;

pub use baseline::{train_sharpness_baseline, BaselineReport, BASELINE_KEEP};
pub use config::{default_out_dir, RunConfig, DEFAULT_OUT_DIR, DEFAULT_SWEEP, OUT_DIR_ENV};
pub use eval::{evaluate_sweep, parse_report_rows, EvalReport, EvalRow, REPORT_HEADER};
pub use plot::{parse_svg_points, render_sweep_svg};
pub use pretrain::{dense_accuracy, pretrain_supervised, sample_loss_graph, PretrainConfig, PretrainReport};
pub use task::{
    gen_retrieval_task, parse_dataset_line, read_dataset, split_holdout, write_dataset, TaskConfig, ANSWER, BOS, END, PAD, QUERY,
};
