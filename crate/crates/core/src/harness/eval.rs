use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grpo::{evaluate_policy, EvalPoint};
use crate::microlm::{Model, ProbeMode};
use crate::rollout::Sample;
use crate::sparse_attn::SelectionPolicy;

use super::task::END;

pub const REPORT_HEADER: &str = "p,accuracy,mean_tau,flop_proxy,mem_proxy";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRow {
    /// Knob of the selection rule (`p` for top-p).
    pub knob: f64,
    pub point: EvalPoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Selection rule name.
    pub variant: String,
    pub checksum: u64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let p = r.point;
            s.push_str(&format!("{},{},{},{},{}\n", r.knob, p.accuracy, p.mean_tau, p.flop_proxy, p.mem_proxy));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.to_csv().as_bytes())?;
        w.flush()?;
        Ok(())
    }

    /// Rows only; the CSV does not carry the variant or checksum.
    pub fn read_rows(path: impl AsRef<Path>) -> Result<Vec<EvalRow>> {
        parse_report_rows(BufReader::new(File::open(path)?))
    }

    /// True when mean τ never decreases as the knob grows.
    pub fn tau_monotone(&self) -> bool {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| a.knob.total_cmp(&b.knob));
        rows.windows(2).all(|w| w[0].point.mean_tau <= w[1].point.mean_tau)
    }
}

pub fn parse_report_rows<R: BufRead>(input: R) -> Result<Vec<EvalRow>> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim) != Some(REPORT_HEADER) {
        return Err(Error::parse("report lacks its header"));
    }
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse().map_err(|_| Error::parse(format!("bad report field {f:?}"))))
            .collect::<Result<_>>()?;
        if v.len() != 5 {
            return Err(Error::parse(format!("report row needs 5 fields: {line:?}")));
        }
        rows.push(EvalRow { knob: v[0], point: EvalPoint { accuracy: v[1], mean_tau: v[2], flop_proxy: v[3], mem_proxy: v[4] } });
    }
    Ok(rows)
}

/// Greedy evaluation of `model` on `samples` at every policy in `policies`.
pub fn evaluate_sweep(model: &Model, samples: &[Sample], policies: &[SelectionPolicy], probe: ProbeMode) -> Result<EvalReport> {
    let first = policies.first().ok_or_else(|| Error::contract("empty sweep"))?;
    let variant = match first {
        SelectionPolicy::TopP(_) => "top_p",
        SelectionPolicy::TopKFraction(_) => "top_k_fraction",
        SelectionPolicy::ScoreThreshold(_) => "score_threshold",
    };
    let max_len = samples.iter().map(|s| s.gold.len()).max().unwrap_or(1);
    let rows = policies
        .iter()
        .map(|&p| Ok(EvalRow { knob: p.knob(), point: evaluate_policy(model, samples, p, probe, max_len, END)? }))
        .collect::<Result<_>>()?;
    Ok(EvalReport { variant: variant.into(), checksum: model.checksum(), rows })
}
