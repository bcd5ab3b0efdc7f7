//! Keyed retrieval in filler noise: the prompt scatters key/value pairs
//! through filler tokens and ends with a query for one key.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::SplitRng;
use crate::rollout::Sample;

pub const BOS: usize = 0;
pub const QUERY: usize = 1;
pub const ANSWER: usize = 2;
pub const END: usize = 3;
pub const PAD: usize = 4;
const RESERVED: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub vocab: usize,
    /// Prompt length in tokens.
    pub seq_len: usize,
    pub pairs: usize,
    pub keys: usize,
    pub values: usize,
    /// Fraction of free body slots holding filler tokens; the rest are PAD.
    pub filler_density: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig { vocab: 64, seq_len: 256, pairs: 4, keys: 16, values: 16, filler_density: 1.0, seed: 0 }
    }
}

impl TaskConfig {
    pub fn key_range(&self) -> std::ops::Range<usize> {
        RESERVED..RESERVED + self.keys
    }

    pub fn value_range(&self) -> std::ops::Range<usize> {
        RESERVED + self.keys..RESERVED + self.keys + self.values
    }

    pub fn filler_range(&self) -> std::ops::Range<usize> {
        RESERVED + self.keys + self.values..self.vocab
    }

    /// Longest token sequence a model needs: prompt, answer and terminator.
    pub fn max_seq(&self) -> usize {
        self.seq_len + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs == 0 || self.keys < self.pairs || self.values == 0 {
            return Err(Error::Capacity(format!(
                "need at least one pair and as many keys as pairs ({} pairs, {} keys, {} values)",
                self.pairs, self.keys, self.values
            )));
        }
        if self.filler_range().is_empty() {
            return Err(Error::Capacity(format!("vocabulary {} leaves no filler tokens", self.vocab)));
        }
        if self.seq_len < 4 + 2 * self.pairs {
            return Err(Error::Capacity(format!("length {} cannot hold {} pairs and the query", self.seq_len, self.pairs)));
        }
        if !(0.0..=1.0).contains(&self.filler_density) {
            return Err(Error::domain("filler density must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Tokens the answer depends on or that frame it: BOS, the pairs and
    /// the query scaffold.
    pub fn essential_tokens(&self) -> usize {
        1 + 2 * self.pairs + 3
    }
}

/// Draws `count` samples. Each prompt is `BOS body QUERY key ANSWER` of
/// exactly `seq_len` tokens; the gold answer is `value END`.
pub fn gen_retrieval_task(cfg: &TaskConfig, count: usize) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let rng = SplitRng::new(cfg.seed);
    (0..count).map(|i| sample_one(cfg, &mut rng.split(i as u64))).collect()
}

fn sample_one(cfg: &TaskConfig, rng: &mut SplitRng) -> Result<Sample> {
    let body = cfg.seq_len - 4;
    let free = body - 2 * cfg.pairs;
    // choose pair slots: place `pairs` markers among `free` fillers
    let mut slots: Vec<bool> = (0..free + cfg.pairs).map(|i| i < cfg.pairs).collect();
    rng.shuffle(&mut slots);
    let mut keys: Vec<usize> = cfg.key_range().collect();
    rng.shuffle(&mut keys);
    let fillers = cfg.filler_range();

    let mut prompt = Vec::with_capacity(cfg.seq_len);
    prompt.push(BOS);
    let mut pairs = Vec::with_capacity(cfg.pairs);
    for is_pair in slots {
        if is_pair {
            let (k, v) = (keys[pairs.len()], cfg.value_range().start + rng.below(cfg.values));
            prompt.extend([k, v]);
            pairs.push((k, v));
        } else if rng.uniform() < cfg.filler_density {
            prompt.push(fillers.start + rng.below(fillers.len()));
        } else {
            prompt.push(PAD);
        }
    }
    let (key, value) = pairs[rng.below(pairs.len())];
    prompt.extend([QUERY, key, ANSWER]);
    debug_assert_eq!(prompt.len(), cfg.seq_len);
    Ok(Sample { prompt, gold: vec![value, END] })
}

/// Splits off the last `fraction` of a seeded shuffle as held-out data.
pub fn split_holdout(samples: &[Sample], fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    SplitRng::new(seed).shuffle(&mut idx);
    let held = ((samples.len() as f64) * fraction).round() as usize;
    let cut = samples.len() - held;
    let train = idx[..cut].iter().map(|&i| samples[i].clone()).collect();
    let test = idx[cut..].iter().map(|&i| samples[i].clone()).collect();
    (train, test)
}

fn join(tokens: &[usize]) -> String {
    tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn write_dataset(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        writeln!(w, "{}\t{}", join(&s.prompt), join(&s.gold))?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_dataset_line(line: &str) -> Result<Sample> {
    let (p, g) = line.split_once('\t').ok_or_else(|| Error::parse("dataset line lacks a tab"))?;
    let ids = |s: &str| -> Result<Vec<usize>> {
        s.split_whitespace().map(|t| t.parse().map_err(|_| Error::parse(format!("bad token id {t:?}")))).collect()
    };
    let sample = Sample { prompt: ids(p)?, gold: ids(g)? };
    if sample.prompt.is_empty() || sample.gold.is_empty() {
        return Err(Error::parse("empty prompt or answer"));
    }
    Ok(sample)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(parse_dataset_line(&line)?);
        }
    }
    Ok(out)
}
