use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::{Checkpoint, Graph, SplitRng, Tensor, Var};

/// Shape of the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub d_ff: usize,
}

impl ModelDims {
    /// Two pre-norm layers, four heads, width 64.
    pub fn desk(vocab: usize, max_seq: usize) -> Self {
        ModelDims { layers: 2, heads: 4, d_model: 64, vocab, max_seq, d_ff: 256 }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let ModelDims { layers, heads, d_model, vocab, max_seq, d_ff } = *self;
        if [layers, heads, d_model, vocab, max_seq, d_ff].contains(&0) {
            return Err(Error::domain(format!("all model dimensions must be positive: {self:?}")));
        }
        if d_model % heads != 0 {
            return Err(Error::domain(format!("d_model {d_model} is not a multiple of {heads} heads")));
        }
        Ok(())
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        let per_layer = 2 * d + 4 * d * d + 2 * d + d * f + f + f * d + d;
        (2 * self.vocab + 1) * d + self.max_seq * d + self.layers * per_layer + 2 * d + d * self.vocab
    }

    pub fn to_header(&self) -> String {
        format!(
            "layers={} heads={} d_model={} vocab={} max_seq={} d_ff={}",
            self.layers, self.heads, self.d_model, self.vocab, self.max_seq, self.d_ff
        )
    }

    pub fn from_header(s: &str) -> Result<Self> {
        let mut dims = ModelDims { layers: 0, heads: 0, d_model: 0, vocab: 0, max_seq: 0, d_ff: 0 };
        for kv in s.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::parse(format!("bad dims entry {kv:?}")))?;
            let v: usize = v.parse().map_err(|_| Error::parse(format!("bad dims value {kv:?}")))?;
            match k {
                "layers" => dims.layers = v,
                "heads" => dims.heads = v,
                "d_model" => dims.d_model = v,
                "vocab" => dims.vocab = v,
                "max_seq" => dims.max_seq = v,
                "d_ff" => dims.d_ff = v,
                _ => return Err(Error::parse(format!("unknown dims key {k:?}"))),
            }
        }
        dims.validate()?;
        Ok(dims)
    }
}

/// Sinusoidal table used to initialize the (learned) position embedding;
/// fixed offsets become linear maps, which makes relative-position heads
/// quick to learn.
fn sinusoid(rows: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; rows * d];
    for p in 0..rows {
        for i in 0..d / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            data[p * d + 2 * i] = (p as f64 * freq).sin();
            data[p * d + 2 * i + 1] = (p as f64 * freq).cos();
        }
    }
    Tensor::new(&[rows, d], data).expect("positive shape")
}

/// Slot of a tensor inside one transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Ln1Gain,
    Ln1Bias,
    Wq,
    Wk,
    Wv,
    Wo,
    Ln2Gain,
    Ln2Bias,
    W1,
    B1,
    W2,
    B2,
}

const PER_LAYER: usize = 12;
/// Token, position and previous-token tables precede the blocks.
const EMBEDS: usize = 3;
const SLOT_NAMES: [&str; PER_LAYER] =
    ["ln1_g", "ln1_b", "w_q", "w_k", "w_v", "w_o", "ln2_g", "ln2_b", "w_1", "b_1", "w_2", "b_2"];

/// Parameters of the decoder, stored as one flat list in a fixed order:
/// token embedding, position embedding, previous-token embedding, per-layer
/// blocks, final norm and the unembedding.
///
/// The input of row `i` is `tok[t_i] + pos[i] + prev[t_{i-1}]`, where row
/// `vocab` of the previous-token table stands in for "no previous token".
/// That term hands layer 0 the bigram context that retrieval needs; without
/// it the small model stalls at picking a random value from the context.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    dims: ModelDims,
    params: Vec<Tensor>,
}

impl Model {
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = SplitRng::new(seed);
        let (d, f, v) = (dims.d_model, dims.d_ff, dims.vocab);
        let mut normal = |shape: &[usize], std: f64| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.normal() * std).collect()).expect("positive shape")
        };
        let resid = 1.0 / ((2 * dims.layers) as f64).sqrt();
        let mut prev = normal(&[v + 1, d], 0.5);
        prev.data_mut()[v * d..].fill(0.0);
        let mut params = vec![normal(&[v, d], 0.5), sinusoid(dims.max_seq, d), prev];
        for _ in 0..dims.layers {
            params.push(Tensor::ones(&[d]));
            params.push(Tensor::zeros(&[d]));
            for _ in 0..3 {
                params.push(normal(&[d, d], 1.0 / (d as f64).sqrt()));
            }
            params.push(normal(&[d, d], resid / (d as f64).sqrt()));
            params.push(Tensor::ones(&[d]));
            params.push(Tensor::zeros(&[d]));
            params.push(normal(&[d, f], 1.0 / (d as f64).sqrt()));
            params.push(Tensor::zeros(&[f]));
            params.push(normal(&[f, d], resid / (f as f64).sqrt()));
            params.push(Tensor::zeros(&[d]));
        }
        params.push(Tensor::ones(&[d]));
        params.push(Tensor::zeros(&[d]));
        params.push(normal(&[d, v], 0.5 / (d as f64).sqrt()));
        Ok(Model { dims, params })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn tok_emb(&self) -> &Tensor {
        &self.params[0]
    }

    pub fn pos_emb(&self) -> &Tensor {
        &self.params[1]
    }

    pub fn prev_emb(&self) -> &Tensor {
        &self.params[2]
    }

    /// Input row for `token` at `pos` following `prev` (None at the start).
    pub fn embed(&self, prev: Option<usize>, token: usize, pos: usize) -> Vec<f64> {
        let p = self.prev_emb().row(prev.unwrap_or(self.dims.vocab));
        let e = self.tok_emb().row(token).iter().zip(self.pos_emb().row(pos));
        e.zip(p).map(|((a, b), c)| a + b + c).collect()
    }

    /// Index into [`Model::params`] of a block tensor.
    pub fn layer_index(layer: usize, slot: Slot) -> usize {
        EMBEDS + layer * PER_LAYER + slot as usize
    }

    pub fn layer(&self, layer: usize, slot: Slot) -> &Tensor {
        &self.params[Self::layer_index(layer, slot)]
    }

    pub(crate) fn final_index(&self) -> usize {
        EMBEDS + self.dims.layers * PER_LAYER
    }

    pub fn ln_f_gain(&self) -> &Tensor {
        &self.params[self.final_index()]
    }

    pub fn ln_f_bias(&self) -> &Tensor {
        &self.params[self.final_index() + 1]
    }

    pub fn w_out(&self) -> &Tensor {
        &self.params[self.final_index() + 2]
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string(), "prev_emb".to_string()];
        for j in 0..self.dims.layers {
            names.extend(SLOT_NAMES.iter().map(|s| format!("l{j}.{s}")));
        }
        names.extend(["ln_f_g", "ln_f_b", "w_out"].map(String::from));
        names
    }

    pub fn checksum(&self) -> u64 {
        self.params.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, t| h.rotate_left(5) ^ t.checksum())
    }

    /// Registers every parameter as a trainable leaf on `g`.
    pub fn register(&self, g: &mut Graph) -> ParamVars {
        ParamVars { vars: self.params.iter().map(|t| g.param(t.clone())).collect(), layers: self.dims.layers }
    }

    /// Registers every parameter as a constant on `g` (no gradients).
    pub fn register_frozen(&self, g: &mut Graph) -> ParamVars {
        ParamVars { vars: self.params.iter().map(|t| g.constant(t.clone())).collect(), layers: self.dims.layers }
    }

    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        Checkpoint {
            header: vec![("dims".into(), self.dims.to_header()), ("step".into(), step.to_string())],
            tensors: self.param_names().into_iter().zip(self.params.iter().cloned()).collect(),
        }
    }

    /// Returns the model and the training step recorded in the header.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, u64)> {
        let dims = ModelDims::from_header(ck.header_value("dims").ok_or_else(|| Error::parse("checkpoint lacks dims"))?)?;
        let step = ck.header_value("step").unwrap_or("0").parse().map_err(|_| Error::parse("bad step in checkpoint"))?;
        let reference = Model::init(dims, 0)?;
        let mut params = Vec::with_capacity(reference.params.len());
        for (name, expected) in reference.param_names().iter().zip(&reference.params) {
            let t = ck.tensor(name).ok_or_else(|| Error::parse(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != expected.shape() {
                return Err(Error::parse(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), expected.shape())));
            }
            params.push(t.clone());
        }
        Ok((Model { dims, params }, step))
    }

    pub fn save(&self, path: impl AsRef<Path>, step: u64) -> Result<()> {
        self.to_checkpoint(step).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, u64)> {
        Model::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Graph handles for every parameter, in [`Model::params`] order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub vars: Vec<Var>,
    layers: usize,
}

impl ParamVars {
    pub fn tok_emb(&self) -> Var {
        self.vars[0]
    }

    pub fn pos_emb(&self) -> Var {
        self.vars[1]
    }

    pub fn prev_emb(&self) -> Var {
        self.vars[2]
    }

    pub fn layer(&self, layer: usize, slot: Slot) -> Var {
        self.vars[Model::layer_index(layer, slot)]
    }

    fn final_index(&self) -> usize {
        EMBEDS + self.layers * PER_LAYER
    }

    pub fn ln_f_gain(&self) -> Var {
        self.vars[self.final_index()]
    }

    pub fn ln_f_bias(&self) -> Var {
        self.vars[self.final_index() + 1]
    }

    pub fn w_out(&self) -> Var {
        self.vars[self.final_index() + 2]
    }
}
