use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Column statistics of an attention map used to rank tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceProfile {
    /// `a_j`: total attention mass token `j` receives.
    pub accumulated: Vec<f64>,
    /// Number of queries that put non-zero mass on token `j`.
    pub nnz: Vec<usize>,
    /// `a_j / nnz_j`, or 0 for a column nobody attends to.
    pub normalized: Vec<f64>,
    /// Number of query rows the map was built from (its total mass when
    /// rows are stochastic).
    pub probe_rows: usize,
}

impl ImportanceProfile {
    /// Builds the profile from a `rows×len` map whose rows are the probed
    /// queries and whose columns are all tokens.
    pub fn from_probe(map: &Tensor) -> Result<Self> {
        if map.shape().len() != 2 {
            return Err(Error::dim(format!("attention map must be 2-D, got {:?}", map.shape())));
        }
        let (rows, len) = (map.shape()[0], map.shape()[1]);
        let mut accumulated = vec![0.0; len];
        let mut nnz = vec![0usize; len];
        for row in map.data().chunks(len) {
            for (j, &v) in row.iter().enumerate() {
                accumulated[j] += v;
                if v != 0.0 {
                    nnz[j] += 1;
                }
            }
        }
        let normalized = accumulated
            .iter()
            .zip(&nnz)
            .map(|(&a, &n)| if n > 0 { a / n as f64 } else { 0.0 })
            .collect();
        Ok(ImportanceProfile { accumulated, nnz, normalized, probe_rows: rows })
    }

    pub fn from_map(attn: &Tensor) -> Result<Self> {
        square_len(attn)?;
        Self::from_probe(attn)
    }

    pub fn len(&self) -> usize {
        self.accumulated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accumulated.is_empty()
    }
}

fn square_len(attn: &Tensor) -> Result<usize> {
    match attn.shape() {
        [r, c] if r == c => Ok(*r),
        s => Err(Error::dim(format!("attention map must be square, got {s:?}"))),
    }
}

/// Column sums `a_j = Σ_c A[c, j]` of a square attention map.
pub fn accumulated_scores(attn: &Tensor) -> Result<Vec<f64>> {
    Ok(ImportanceProfile::from_map(attn)?.accumulated)
}

/// Column sums divided by the number of non-zero entries in each column.
pub fn normalized_scores(attn: &Tensor) -> Result<Vec<f64>> {
    Ok(ImportanceProfile::from_map(attn)?.normalized)
}

/// Smallest `k` such that the `k` largest accumulated scores cover
/// `p · probe_rows` of the attention mass.
///
/// Always at least 1; falls back to the full length when rounding keeps the
/// target out of reach. `p = 1` retains every token.
pub fn determine_budget(scores: &[f64], p: f64, probe_rows: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::domain(format!("retention threshold {p} outside [0, 1]")));
    }
    let len = scores.len();
    if len == 0 {
        return Err(Error::domain("cannot budget an empty sequence"));
    }
    if p >= 1.0 {
        return Ok(len);
    }
    let target = p * probe_rows as f64;
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    for (k, v) in sorted.iter().enumerate() {
        acc += v;
        if acc >= target {
            return Ok(k + 1);
        }
    }
    Ok(len)
}
