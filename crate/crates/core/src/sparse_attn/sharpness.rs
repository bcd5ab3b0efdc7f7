//! Block-pooled attention sharpness regularizer used as a baseline.

use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};

/// Default block size at desk scale.
pub const DEFAULT_BLOCK_SIZE: usize = 16;

#[derive(Clone, Debug)]
pub struct SharpnessProbe {
    pub block_size: usize,
    /// Row-stochastic `nb×nb` block attention map.
    pub pooled_map: Tensor,
    /// `-mean_i max_j pooled_map[i, j]`, in `[-1, -B/ℓ]`.
    pub loss: f64,
}

/// `nb×len` averaging matrix; the last block averages whatever rows remain
/// when `block` does not divide `len`.
pub fn pool_matrix(len: usize, block: usize) -> Result<Tensor> {
    if block == 0 || block > len {
        return Err(Error::domain(format!("block size {block} invalid for length {len}")));
    }
    let nb = len.div_ceil(block);
    let mut data = vec![0.0; nb * len];
    for b in 0..nb {
        let lo = b * block;
        let hi = ((b + 1) * block).min(len);
        let w = 1.0 / (hi - lo) as f64;
        for c in lo..hi {
            data[b * len + c] = w;
        }
    }
    Tensor::new(&[nb, len], data)
}

/// Records the pooled map and the sharpness loss for `ℓ×d` queries and keys
/// on `g`. Returns `(pooled_map, loss)`.
pub fn block_sharpness_graph(g: &mut Graph, q: Var, k: Var, block: usize) -> Result<(Var, Var)> {
    let (len, d) = match g.value(q).shape() {
        [l, d] => (*l, *d),
        s => return Err(Error::dim(format!("queries must be ℓ×d, got {s:?}"))),
    };
    if g.value(k).shape() != [len, d] {
        return Err(Error::dim("keys must match the query shape"));
    }
    let pool = g.constant(pool_matrix(len, block)?);
    let qp = g.matmul(pool, q)?;
    let kp = g.matmul(pool, k)?;
    let scores = g.matmul_nt(qp, kp)?;
    let scores = g.scale(scores, 1.0 / d as f64);
    let nb = g.value(scores).rows();
    let pos: Vec<usize> = (0..nb).collect();
    let map = g.causal_softmax(scores, &pos, &pos)?;
    let peaks = g.row_max(map)?;
    let mean = g.mean(peaks);
    Ok((map, g.neg(mean)))
}

pub fn block_sharpness_loss(q: &Tensor, k: &Tensor, block: usize) -> Result<SharpnessProbe> {
    let mut g = Graph::new();
    let (vq, vk) = (g.constant(q.clone()), g.constant(k.clone()));
    let (map, loss) = block_sharpness_graph(&mut g, vq, vk, block)?;
    Ok(SharpnessProbe { block_size: block, pooled_map: g.value(map).clone(), loss: g.value(loss).item() })
}
