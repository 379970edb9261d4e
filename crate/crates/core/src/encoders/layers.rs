//! Parameter containers and the pre-norm transformer block shared by both towers.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// A set of named parameters that can be copied onto a graph.
///
/// `bind` and `visit` must agree on ordering: [`BoundVars::flat`] lists the
/// bound leaves in exactly the order `visit` reports the tensors.
pub trait Module {
    type Vars: BoundVars;

    fn bind(&self, g: &mut Graph, trainable: bool) -> Self::Vars;
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

pub trait BoundVars {
    fn flat(&self, out: &mut Vec<Var>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Adds the graph gradients of `vars` into the parameter buffers of `module`.
pub fn accumulate_grads<M: Module>(module: &mut M, g: &Graph, vars: &M::Vars) -> Result<()> {
    let mut flat = Vec::new();
    vars.flat(&mut flat);
    let mut idx = 0;
    let mut err = None;
    module.visit_mut("", &mut |name, t| {
        let Some(&v) = flat.get(idx) else {
            err.get_or_insert_with(|| Error::Contract(format!("no bound var for {name}")));
            return;
        };
        idx += 1;
        if let Some(grad) = g.grad(v) {
            if let Err(e) = t.accumulate_grad(grad) {
                err.get_or_insert(e);
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None if idx != flat.len() => Err(Error::Contract("bound var count mismatch".into())),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    /// Gaussian weights with std `1/sqrt(fan_in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(vec![fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng),
            bias: Tensor::zeros(vec![1, fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![fan_in, fan_out]),
            bias: Tensor::zeros(vec![1, fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl LinearVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        g.add_row(y, self.bias)
    }
}

impl Module for Linear {
    type Vars = LinearVars;

    fn bind(&self, g: &mut Graph, trainable: bool) -> LinearVars {
        LinearVars {
            weight: g.param_with(&self.weight, trainable),
            bias: g.param_with(&self.bias, trainable),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl BoundVars for LinearVars {
    fn flat(&self, out: &mut Vec<Var>) {
        out.push(self.weight);
        out.push(self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormVars {
    pub gain: Var,
    pub bias: Var,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Tensor::row(vec![1.0; dim]),
            bias: Tensor::zeros(vec![1, dim]),
        }
    }
}

impl LayerNormVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gain, self.bias)
    }
}

impl Module for LayerNorm {
    type Vars = LayerNormVars;

    fn bind(&self, g: &mut Graph, trainable: bool) -> LayerNormVars {
        LayerNormVars {
            gain: g.param_with(&self.gain, trainable),
            bias: g.param_with(&self.bias, trainable),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl BoundVars for LayerNormVars {
    fn flat(&self, out: &mut Vec<Var>) {
        out.push(self.gain);
        out.push(self.bias);
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    ln1: LayerNormVars,
    query: LinearVars,
    key: LinearVars,
    value: LinearVars,
    out: LinearVars,
    ln2: LayerNormVars,
    fc1: LinearVars,
    fc2: LinearVars,
}

pub const MLP_RATIO: usize = 4;

impl Block {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            query: Linear::init(dim, dim, rng),
            key: Linear::init(dim, dim, rng),
            value: Linear::init(dim, dim, rng),
            out: Linear::init(dim, dim, rng),
            ln2: LayerNorm::new(dim),
            fc1: Linear::init(dim, dim * MLP_RATIO, rng),
            fc2: Linear::init(dim * MLP_RATIO, dim, rng),
        }
    }
}

impl Module for Block {
    type Vars = BlockVars;

    fn bind(&self, g: &mut Graph, trainable: bool) -> BlockVars {
        BlockVars {
            ln1: self.ln1.bind(g, trainable),
            query: self.query.bind(g, trainable),
            key: self.key.bind(g, trainable),
            value: self.value.bind(g, trainable),
            out: self.out.bind(g, trainable),
            ln2: self.ln2.bind(g, trainable),
            fc1: self.fc1.bind(g, trainable),
            fc2: self.fc2.bind(g, trainable),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.out.visit(&join(prefix, "out"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

impl BoundVars for BlockVars {
    fn flat(&self, out: &mut Vec<Var>) {
        self.ln1.flat(out);
        self.query.flat(out);
        self.key.flat(out);
        self.value.flat(out);
        self.out.flat(out);
        self.ln2.flat(out);
        self.fc1.flat(out);
        self.fc2.flat(out);
    }
}

impl BoundVars for Vec<BlockVars> {
    fn flat(&self, out: &mut Vec<Var>) {
        for b in self {
            b.flat(out);
        }
    }
}

/// Additive mask that hides future positions.
pub(crate) fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = -1e9;
        }
    }
    Tensor::matrix(len, len, data).expect("square mask")
}

impl BlockVars {
    /// `x` is `[tokens, dim]`. `mask`, if given, is added to every head's scores.
    pub fn forward(&self, g: &mut Graph, x: Var, heads: usize, mask: Option<Var>) -> Result<Var> {
        let dim = g.value(x).dims2()?.1;
        if heads == 0 || dim % heads != 0 {
            return Err(Error::dim(format!("{dim} channels across {heads} heads")));
        }
        let head_dim = dim / heads;
        let h = self.ln1.forward(g, x)?;
        let q = self.query.forward(g, h)?;
        let k = self.key.forward(g, h)?;
        let v = self.value.forward(g, h)?;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for i in 0..heads {
            let qh = g.slice_cols(q, i * head_dim, head_dim)?;
            let kh = g.slice_cols(k, i * head_dim, head_dim)?;
            let vh = g.slice_cols(v, i * head_dim, head_dim)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let mut scores = g.scale(scores, scale)?;
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let att = g.softmax_rows(scores)?;
            outs.push(g.matmul(att, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        let attn = self.out.forward(g, merged)?;
        let x = g.add(x, attn)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, h)?;
        g.add(x, h)
    }
}
