//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, which is already a topological
//! order, so the backward sweep is a single reverse scan over the tape.

use std::rc::Rc;

use super::kernels::{self, gemm};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, bt: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { a: usize, bias: usize },
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Gelu(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, stats: Vec<(f64, f64)> },
    Softmax(usize),
    GatherRows { src: usize, idx: Rc<Vec<usize>> },
    ScatterRows { src: usize, idx: Rc<Vec<usize>> },
    SliceCols { src: usize, start: usize },
    ConcatCols(Vec<usize>),
    LogSoftmaxPick { logits: usize, targets: Vec<usize> },
    Sum(usize),
    Mean(usize),
    Clamp { a: usize, lo: f64, hi: f64 },
    Minimum(usize, usize),
    RowMax { a: usize, arg: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    needs_grad: bool,
}

/// A differentiable computation recorded as it is evaluated.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<(usize, Tensor)>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient for a trainable leaf; zeros when the leaf did not
    /// participate in the root. `None` for non-trainable nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves
            .binary_search_by_key(&v.0, |(id, _)| *id)
            .ok()
            .map(|i| &self.leaves[i].1)
    }

    /// Node ids in the order the backward sweep processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false, false)
    }

    fn push(&mut self, value: Tensor, op: Op, trainable: bool, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, trainable, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.push(value, op, false, needs_grad)
    }

    fn mat_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.nodes[v.0].value.shape();
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(Error::dim(format!("{what}: expected a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim(format!("matmul: inner extents {k} and {k2} differ")));
        }
        let out = kernels::matmul(self.value(a).data(), m, k, self.value(b).data(), n);
        Ok(self.derived(Tensor::from_parts(vec![m, n], out), Op::MatMul { a: a.0, b: b.0, bt: false }, &[a.0, b.0]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul_nt")?;
        let (n, k2) = self.mat_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim(format!("matmul_nt: inner extents {k} and {k2} differ")));
        }
        let out = kernels::matmul_nt(self.value(a).data(), m, k, self.value(b).data(), n);
        Ok(self.derived(Tensor::from_parts(vec![m, n], out), Op::MatMul { a: a.0, b: b.0, bt: true }, &[a.0, b.0]))
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.derived(t, op, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "minimum", f64::min, Op::Minimum(a.0, b.0))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.mat_dims(a, "add_row")?;
        if self.value(bias).numel() != n {
            return Err(Error::dim(format!("add_row: bias of {} for width {n}", self.value(bias).numel())));
        }
        let b = self.value(bias).data().to_vec();
        let ta = self.value(a);
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.derived(t, Op::AddRow { a: a.0, bias: bias.0 }, &[a.0, bias.0]))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect());
        self.derived(t, op, &[a.0])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a.0, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a.0))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, kernels::gelu, Op::Gelu(a.0))
    }

    /// Elementwise clamp into `[lo, hi]`; the gradient is zero where the
    /// input lies outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp { a: a.0, lo, hi })
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "layer_norm")?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::dim("layer_norm: gain/bias width mismatch"));
        }
        let mut out = vec![0.0; m * n];
        let stats = kernels::layer_norm(
            self.value(x).data(),
            n,
            self.value(gain).data(),
            self.value(bias).data(),
            &mut out,
        );
        Ok(self.derived(
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, stats },
            &[x.0, gain.0, bias.0],
        ))
    }

    /// Row-wise softmax with an optional additive mask of `0` / `-inf`
    /// entries (same shape as `x`).
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "softmax_rows")?;
        let mut data = self.value(x).data().to_vec();
        if let Some(mask) = mask {
            check_mask(mask, m, n)?;
            for (v, mv) in data.iter_mut().zip(mask.data()) {
                *v += mv;
            }
        }
        for (r, row) in data.chunks_mut(n).enumerate() {
            if !kernels::softmax_in_place(row) {
                return Err(Error::DegenerateRow { row: r });
            }
        }
        Ok(self.derived(Tensor::from_parts(vec![m, n], data), Op::Softmax(x.0), &[x.0]))
    }

    /// Causal softmax over a score matrix whose rows and columns carry
    /// original sequence positions: entry `(i, j)` is kept iff
    /// `key_pos[j] <= query_pos[i]`.
    pub fn causal_softmax(&mut self, x: Var, query_pos: &[usize], key_pos: &[usize]) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "causal_softmax")?;
        if query_pos.len() != m || key_pos.len() != n {
            return Err(Error::dim("causal_softmax: position lists do not match the score matrix"));
        }
        let mut data = self.value(x).data().to_vec();
        for (r, row) in data.chunks_mut(n).enumerate() {
            for (v, &kp) in row.iter_mut().zip(key_pos) {
                if kp > query_pos[r] {
                    *v = f64::NEG_INFINITY;
                }
            }
            if !kernels::softmax_in_place(row) {
                return Err(Error::DegenerateRow { row: r });
            }
        }
        Ok(self.derived(Tensor::from_parts(vec![m, n], data), Op::Softmax(x.0), &[x.0]))
    }

    pub fn gather_rows(&mut self, src: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let (m, n) = self.mat_dims(src, "gather_rows")?;
        let s = self.value(src).data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            if i >= m {
                return Err(Error::Index { index: i, len: m });
            }
            data.extend_from_slice(&s[i * n..(i + 1) * n]);
        }
        if idx.is_empty() {
            return Err(Error::dim("gather_rows: empty index list"));
        }
        let t = Tensor::from_parts(vec![idx.len(), n], data);
        Ok(self.derived(t, Op::GatherRows { src: src.0, idx }, &[src.0]))
    }

    /// Places row `i` of `src` at row `idx[i]` of a zero `rows×n` matrix.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, src: Var, idx: Rc<Vec<usize>>, rows: usize) -> Result<Var> {
        let (m, n) = self.mat_dims(src, "scatter_rows")?;
        if idx.len() != m {
            return Err(Error::dim("scatter_rows: index count differs from source rows"));
        }
        let s = self.value(src).data();
        let mut data = vec![0.0; rows * n];
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(Error::Index { index: i, len: rows });
            }
            data[i * n..(i + 1) * n].copy_from_slice(&s[r * n..(r + 1) * n]);
        }
        let t = Tensor::from_parts(vec![rows, n], data);
        Ok(self.derived(t, Op::ScatterRows { src: src.0, idx }, &[src.0]))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat_dims(src, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::dim(format!("slice_cols: [{start}, {}) outside width {n}", start + len)));
        }
        let s = self.value(src).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&s[r * n + start..r * n + start + len]);
        }
        Ok(self.derived(Tensor::from_parts(vec![m, len], data), Op::SliceCols { src: src.0, start }, &[src.0]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_cols: nothing to concatenate"))?;
        let (m, _) = self.mat_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.mat_dims(p, "concat_cols")?;
            if pm != m {
                return Err(Error::dim("concat_cols: row counts differ"));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.derived(Tensor::from_parts(vec![m, n], data), Op::ConcatCols(ids.clone()), &ids))
    }

    /// `log softmax(logits[i])[targets[i]]` for every row, as a vector.
    pub fn log_softmax_pick(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.mat_dims(logits, "log_softmax_pick")?;
        if targets.len() != m {
            return Err(Error::dim("log_softmax_pick: one target per row required"));
        }
        let l = self.value(logits).data();
        let mut out = Vec::with_capacity(m);
        for (r, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(Error::Index { index: t, len: n });
            }
            out.push(kernels::log_softmax_at(&l[r * n..(r + 1) * n], t));
        }
        Ok(self.derived(
            Tensor::vector(out),
            Op::LogSoftmaxPick { logits: logits.0, targets: targets.to_vec() },
            &[logits.0],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.derived(Tensor::scalar(s), Op::Mean(a.0), &[a.0])
    }

    /// Maximum of every row, as a vector. Ties route the gradient to the
    /// lowest column.
    pub fn row_max(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.mat_dims(a, "row_max")?;
        let mut vals = Vec::new();
        let mut arg = Vec::new();
        for row in self.value(a).data().chunks(n) {
            let (mut bi, mut bv) = (0, row[0]);
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > bv {
                    bi = i;
                    bv = v;
                }
            }
            vals.push(bv);
            arg.push(bi);
        }
        Ok(self.derived(Tensor::vector(vals), Op::RowMax { a: a.0, arg }, &[a.0]))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if !rv.is_scalar() {
            return Err(Error::contract(format!("backward root must be scalar, got shape {:?}", rv.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut leaves = Vec::new();
        let mut visited = Vec::new();
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                if node.trainable {
                    leaves.push((id, Tensor::zeros(node.value.shape())));
                }
                continue;
            };
            visited.push(id);
            if node.trainable {
                leaves.push((id, Tensor::from_parts(node.value.shape().to_vec(), g)));
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        // trainable leaves created after the root never participated
        for (id, node) in self.nodes.iter().enumerate().skip(root.0 + 1) {
            if node.trainable {
                leaves.push((id, Tensor::zeros(node.value.shape())));
            }
        }
        leaves.sort_by_key(|(id, _)| *id);
        Ok(Gradients { leaves, visited })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let nodes = &self.nodes;
        let mut acc = |target: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[target].needs_grad {
                return;
            }
            let buf = grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, bt } => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = out.shape()[1];
                if *bt {
                    // c = a bᵀ, b: n×k
                    acc(*a, &mut |ga| gemm(m, n, k, 1.0, g, false, tb.data(), false, 1.0, ga));
                    acc(*b, &mut |gb| gemm(n, m, k, 1.0, g, true, ta.data(), false, 1.0, gb));
                } else {
                    acc(*a, &mut |ga| gemm(m, n, k, 1.0, g, false, tb.data(), true, 1.0, ga));
                    acc(*b, &mut |gb| gemm(k, m, n, 1.0, ta.data(), true, g, false, 1.0, gb));
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * va[i];
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if va[i] <= vb[i] {
                            ga[i] += g[i];
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        if va[i] > vb[i] {
                            gb[i] += g[i];
                        }
                    }
                });
            }
            Op::AddRow { a, bias } => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*bias, &mut |gb| {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            Op::AddScalar(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Exp(a) => {
                let y = out.data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * y[i];
                    }
                });
            }
            Op::Gelu(a) => {
                let x = nodes[*a].value.data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * kernels::gelu_grad(x[i]);
                    }
                });
            }
            Op::Clamp { a, lo, hi } => {
                let x = nodes[*a].value.data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if x[i] > *lo && x[i] < *hi {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let xv = nodes[*x].value.data();
                let gv = nodes[*gain].value.data();
                let n = gv.len();
                let xhat = |r: usize, c: usize| (xv[r * n + c] - stats[r].0) * stats[r].1;
                acc(*gain, &mut |gg| {
                    for r in 0..stats.len() {
                        for c in 0..n {
                            gg[c] += g[r * n + c] * xhat(r, c);
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dxhat = vec![0.0; n];
                    for (r, &(_, rstd)) in stats.iter().enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..n {
                            dxhat[c] = g[r * n + c] * gv[c];
                            m1 += dxhat[c];
                            m2 += dxhat[c] * xhat(r, c);
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for c in 0..n {
                            gx[r * n + c] += rstd * (dxhat[c] - m1 - xhat(r, c) * m2);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = out.data();
                let n = out.cols();
                acc(*a, &mut |ga| {
                    for (r, yr) in y.chunks(n).enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for c in 0..n {
                            ga[r * n + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::GatherRows { src, idx } => {
                let n = out.cols();
                acc(*src, &mut |gs| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gs[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::ScatterRows { src, idx } => {
                let n = out.cols();
                acc(*src, &mut |gs| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gs[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::SliceCols { src, start } => {
                let w = out.cols();
                let n = nodes[*src].value.cols();
                acc(*src, &mut |gs| {
                    for r in 0..out.rows() {
                        add_into(&mut gs[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = out.cols();
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p].value.cols();
                    acc(p, &mut |gp| {
                        for r in 0..out.rows() {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * n + off..r * n + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::LogSoftmaxPick { logits, targets } => {
                let l = nodes[*logits].value.data();
                let n = nodes[*logits].value.cols();
                acc(*logits, &mut |gl| {
                    let mut p = vec![0.0; n];
                    for (r, &t) in targets.iter().enumerate() {
                        p.copy_from_slice(&l[r * n..(r + 1) * n]);
                        kernels::softmax_in_place(&mut p);
                        for c in 0..n {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            gl[r * n + c] += g[r] * (onehot - p[c]);
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let inv = 1.0 / nodes[*a].value.numel() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] * inv));
            }
            Op::RowMax { a, arg } => {
                let n = nodes[*a].value.cols();
                acc(*a, &mut |ga| {
                    for (r, &c) in arg.iter().enumerate() {
                        ga[r * n + c] += g[r];
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn check_mask(mask: &Tensor, m: usize, n: usize) -> Result<()> {
    if mask.shape() != [m, n] {
        return Err(Error::dim(format!("mask shape {:?} differs from [{m}, {n}]", mask.shape())));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != f64::NEG_INFINITY) {
        return Err(Error::domain("mask entries must be 0 or -inf"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn constant_root_gives_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_visits_each_node_once_in_reverse_order() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let y = g.matmul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let e = g.exp(z);
        let s = g.mean(e);
        let grads = g.backward(s).unwrap();
        let order = grads.visit_order();
        assert!(order.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(order, &[s.index(), e.index(), z.index(), y.index(), x.index()]);
    }

    #[test]
    fn bad_mask_is_a_domain_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2]));
        let mask = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        assert!(matches!(g.softmax_rows(x, Some(&mask)), Err(Error::Domain(_))));
    }
}
