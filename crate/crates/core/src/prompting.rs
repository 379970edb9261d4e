//! Learnable context tokens, the conditioning meta-network and prompt assembly.

use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::layers::{join, BoundVars, Linear, LinearVars, Module};
use crate::encoders::{DualEncoder, NamedArray, TextVars, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Standard deviation of the Gaussian context initialization.
pub const CONTEXT_INIT_STD: f64 = 0.02;
/// Bottleneck reduction of the meta-network.
pub const META_REDUCTION: usize = 4;

/// Tuning method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Coop,
    Cocoop,
    Kgcoop,
    Promim,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Coop, Method::Cocoop, Method::Kgcoop, Method::Promim];

    /// Whether prompts are conditioned on the image through the meta-network.
    pub fn is_conditional(self) -> bool {
        matches!(self, Method::Cocoop | Method::Promim)
    }

    /// Whether the conditioning image is masked.
    pub fn masks_input(self) -> bool {
        self == Method::Promim
    }

    /// Whether the knowledge-guided term may be active.
    pub fn uses_kg(self) -> bool {
        matches!(self, Method::Kgcoop | Method::Promim)
    }

    pub fn prompt_kind(self) -> PromptKind {
        match self {
            Method::Coop | Method::Kgcoop => PromptKind::Coop,
            Method::Cocoop => PromptKind::Cocoop,
            Method::Promim => PromptKind::Promim,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Coop => "coop",
            Method::Cocoop => "cocoop",
            Method::Kgcoop => "kgcoop",
            Method::Promim => "promim",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::input(format!("unknown method {s:?}")))
    }
}

/// How a prompt set was built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Handcrafted,
    Coop,
    Cocoop,
    Promim,
}

/// `M` learnable vectors `[M, embed_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextTokens {
    pub vectors: Tensor,
}

impl ContextTokens {
    pub fn gaussian<R: Rng + ?Sized>(m: usize, embed_dim: usize, rng: &mut R) -> Result<Self> {
        if m == 0 {
            return Err(Error::input("need at least one context token"));
        }
        Ok(Self {
            vectors: Tensor::randn(vec![m, embed_dim], CONTEXT_INIT_STD, rng)
                .with_requires_grad(true),
        })
    }

    /// Initializes from the embedding rows of the template words before the class name.
    pub fn from_template(encoder: &DualEncoder, m: usize) -> Result<Self> {
        let prefix = encoder.vocab().template_prefix()?;
        if prefix.len() != m {
            return Err(Error::input(format!(
                "template prefix has {} tokens, asked for {m} context tokens",
                prefix.len()
            )));
        }
        let table = &encoder.text.token_embedding;
        let data = prefix
            .iter()
            .flat_map(|&t| table.row_slice(t).to_vec())
            .collect();
        Ok(Self {
            vectors: Tensor::matrix(m, table.shape()[1], data)?.with_requires_grad(true),
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `Linear -> ReLU -> Linear` bottleneck mapping an image embedding to one
/// vector that is added to every context token.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaNet {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct MetaNetVars {
    fc1: LinearVars,
    fc2: LinearVars,
}

impl MetaNet {
    /// The second layer starts at zero, so the initial output is zero for every input.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        embed_dim: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if reduction == 0 || input_dim / reduction == 0 {
            return Err(Error::input(format!(
                "reduction {reduction} leaves no hidden units for input width {input_dim}"
            )));
        }
        let hidden = input_dim / reduction;
        let mut fc1 = Linear::init(input_dim, hidden, rng);
        let mut fc2 = Linear::zeros(hidden, embed_dim);
        fc1.weight.set_requires_grad(true);
        fc1.bias.set_requires_grad(true);
        fc2.weight.set_requires_grad(true);
        fc2.bias.set_requires_grad(true);
        Ok(Self { fc1, fc2 })
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.fc2.out_dim()
    }
}

impl Module for MetaNet {
    type Vars = MetaNetVars;

    fn bind(&self, g: &mut Graph, trainable: bool) -> MetaNetVars {
        MetaNetVars {
            fc1: self.fc1.bind(g, trainable),
            fc2: self.fc2.bind(g, trainable),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

impl BoundVars for MetaNetVars {
    fn flat(&self, out: &mut Vec<Var>) {
        self.fc1.flat(out);
        self.fc2.flat(out);
    }
}

impl MetaNetVars {
    /// Computes the meta-token from a `[1, input_dim]` image embedding.
    pub fn forward(&self, g: &mut Graph, image_embedding: Var) -> Result<Var> {
        let (r, c) = g.value(image_embedding).dims2()?;
        let want = g.value(self.fc1.weight).shape()[0];
        if r != 1 || c != want {
            return Err(Error::dim(format!(
                "meta-net input [{r},{c}], expected [1,{want}]"
            )));
        }
        let h = self.fc1.forward(g, image_embedding)?;
        let h = g.relu(h)?;
        self.fc2.forward(g, h)
    }
}

/// One class prompt: shared soft prefix followed by the class tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEntry {
    pub prefix: Var,
    pub class_tokens: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub kind: PromptKind,
    pub entries: Vec<PromptEntry>,
}

/// Builds one prompt per class from the context tokens and an optional meta-token.
///
/// With `pi` present every context vector becomes `v_m + pi`; without it the
/// context vectors are used as they are.
pub fn assemble_prompts(
    g: &mut Graph,
    kind: PromptKind,
    ctx: Var,
    pi: Option<Var>,
    classes: &[Vec<TokenId>],
) -> Result<PromptSet> {
    let (_, d) = g.value(ctx).dims2()?;
    let prefix = match pi {
        Some(p) => {
            let (pr, pc) = g.value(p).dims2()?;
            if pr != 1 || pc != d {
                return Err(Error::dim(format!(
                    "meta-token [{pr},{pc}] for context width {d}"
                )));
            }
            g.add_row(ctx, p)?
        }
        None => ctx,
    };
    if classes.iter().any(Vec::is_empty) {
        return Err(Error::input("class with no tokens"));
    }
    Ok(PromptSet {
        kind,
        entries: classes
            .iter()
            .map(|c| PromptEntry {
                prefix,
                class_tokens: c.clone(),
            })
            .collect(),
    })
}

/// Class tokens for each class name.
pub fn class_tokens(vocab: &Vocabulary, class_names: &[String]) -> Result<Vec<Vec<TokenId>>> {
    class_names.iter().map(|n| vocab.tokenize(n)).collect()
}

/// The "a photo of a [CLS]" prompts with the template words as a fixed prefix.
pub fn handcrafted_prompts(
    g: &mut Graph,
    text: &TextVars,
    vocab: &Vocabulary,
    class_names: &[String],
) -> Result<PromptSet> {
    let prefix_ids = vocab.template_prefix()?;
    let prefix = g.select_rows(text.token_embedding, &prefix_ids)?;
    let classes = class_tokens(vocab, class_names)?;
    Ok(PromptSet {
        kind: PromptKind::Handcrafted,
        entries: classes
            .into_iter()
            .map(|c| PromptEntry {
                prefix,
                class_tokens: c,
            })
            .collect(),
    })
}

/// Encodes every prompt and returns the L2-normalized `[C, output_dim]` embeddings.
pub fn encode_prompt_set(g: &mut Graph, text: &TextVars, ps: &PromptSet) -> Result<Var> {
    let raw = encode_prompt_set_raw(g, text, ps)?;
    g.l2_normalize_rows(raw)
}

/// Stacked text-encoder outputs before normalization.
pub fn encode_prompt_set_raw(g: &mut Graph, text: &TextVars, ps: &PromptSet) -> Result<Var> {
    if ps.entries.is_empty() {
        return Err(Error::input("empty prompt set"));
    }
    let rows = ps
        .entries
        .iter()
        .map(|e| text.forward_soft(g, e.prefix, &e.class_tokens))
        .collect::<Result<Vec<_>>>()?;
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        g.concat_rows(&rows)
    }
}

/// Hand-crafted-prompt text embeddings of a class list, L2-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceEmbeddings {
    pub class_names: Vec<String>,
    /// `[C, output_dim]`, unit rows.
    pub embeddings: Tensor,
    /// Same rows before normalization.
    pub raw: Tensor,
}

pub fn compute_reference_embeddings(
    encoder: &DualEncoder,
    class_names: &[String],
) -> Result<ReferenceEmbeddings> {
    if class_names.is_empty() {
        return Err(Error::input("no classes"));
    }
    let mut g = Graph::new();
    let text = encoder.text.bind(&mut g, false);
    let rows = class_names
        .iter()
        .map(|n| {
            let toks = encoder.vocab().embed_template(n)?;
            text.forward_tokens(&mut g, &toks)
        })
        .collect::<Result<Vec<_>>>()?;
    let stacked = if rows.len() == 1 {
        rows[0]
    } else {
        g.concat_rows(&rows)?
    };
    let normed = g.l2_normalize_rows(stacked)?;
    Ok(ReferenceEmbeddings {
        class_names: class_names.to_vec(),
        embeddings: g.value(normed).clone(),
        raw: g.value(stacked).clone(),
    })
}

impl ReferenceEmbeddings {
    /// Rows for a subset of the classes, in the order given.
    pub fn select(&self, class_names: &[String], normalized: bool) -> Result<Tensor> {
        let src = if normalized {
            &self.embeddings
        } else {
            &self.raw
        };
        let cols = src.shape()[1];
        let mut data = Vec::with_capacity(class_names.len() * cols);
        for n in class_names {
            let i = self
                .class_names
                .iter()
                .position(|c| c == n)
                .ok_or_else(|| Error::input(format!("no reference embedding for {n:?}")))?;
            data.extend_from_slice(src.row_slice(i));
        }
        Tensor::matrix(class_names.len(), cols, data)
    }
}

/// Trainable prompt state for one method.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptLearner {
    pub method: Method,
    pub ctx: ContextTokens,
    pub meta: Option<MetaNet>,
}

#[derive(Clone, Debug)]
pub struct LearnerVars {
    pub ctx: Var,
    pub meta: Option<MetaNetVars>,
}

impl PromptLearner {
    pub fn new(method: Method, ctx: ContextTokens, meta: Option<MetaNet>) -> Result<Self> {
        if method.is_conditional() != meta.is_some() {
            return Err(Error::input(format!(
                "method {method} {} a meta-network",
                if method.is_conditional() {
                    "needs"
                } else {
                    "takes no"
                }
            )));
        }
        Ok(Self { method, ctx, meta })
    }

    /// Unnormalized class-prompt embeddings `[C, output_dim]`, conditioned on
    /// `condition` (a `[1, output_dim]` image embedding) when the method is conditional.
    pub fn class_embeddings(
        &self,
        g: &mut Graph,
        vars: &LearnerVars,
        text: &TextVars,
        condition: Option<Var>,
        classes: &[Vec<TokenId>],
    ) -> Result<Var> {
        let pi = match (&vars.meta, condition) {
            (Some(meta), Some(c)) => Some(meta.forward(g, c)?),
            (Some(_), None) => {
                return Err(Error::input(format!(
                    "method {} needs a conditioning image embedding",
                    self.method
                )))
            }
            (None, _) => None,
        };
        let ps = assemble_prompts(g, self.method.prompt_kind(), vars.ctx, pi, classes)?;
        encode_prompt_set_raw(g, text, &ps)
    }

    pub fn to_checkpoint(&self, encoder_checksum: &str) -> PromptCheckpoint {
        let mut params = Vec::new();
        self.visit("", &mut |name, t| {
            params.push(NamedArray {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
        });
        PromptCheckpoint {
            format: PROMPT_FORMAT.to_string(),
            version: PROMPT_VERSION,
            method: self.method,
            encoder_checksum: encoder_checksum.to_string(),
            n_ctx: self.ctx.len(),
            params,
        }
    }

    pub fn from_checkpoint(ckpt: PromptCheckpoint) -> Result<Self> {
        if ckpt.format != PROMPT_FORMAT || ckpt.version != PROMPT_VERSION {
            return Err(Error::Checkpoint(format!(
                "expected {PROMPT_FORMAT} v{PROMPT_VERSION}, found {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let find = |name: &str| -> Result<Tensor> {
            let p = ckpt
                .params
                .iter()
                .find(|p| p.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            Ok(Tensor::new(p.shape.clone(), p.data.clone())?.with_requires_grad(true))
        };
        let ctx = ContextTokens {
            vectors: find("ctx")?,
        };
        if ctx.len() != ckpt.n_ctx {
            return Err(Error::Checkpoint("context length mismatch".into()));
        }
        let meta = if ckpt.method.is_conditional() {
            let lin = |p: &str| -> Result<Linear> {
                Ok(Linear {
                    weight: find(&format!("meta.{p}.weight"))?,
                    bias: find(&format!("meta.{p}.bias"))?,
                })
            };
            Some(MetaNet {
                fc1: lin("fc1")?,
                fc2: lin("fc2")?,
            })
        } else {
            None
        };
        let learner = Self::new(ckpt.method, ctx, meta)?;
        let mut expected = 0;
        learner.visit("", &mut |_, _| expected += 1);
        if expected != ckpt.params.len() {
            return Err(Error::Checkpoint(
                "unexpected parameters in prompt checkpoint".into(),
            ));
        }
        Ok(learner)
    }

    pub fn save(&self, path: &Path, encoder_checksum: &str) -> Result<()> {
        std::fs::write(
            path,
            serde_json::to_string(&self.to_checkpoint(encoder_checksum))?,
        )?;
        Ok(())
    }

    /// Loads a checkpoint and returns it with the encoder checksum it was tuned against.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Checkpoint(format!(
                "cannot read prompt checkpoint {}: {e}",
                path.display()
            ))
        })?;
        let ckpt: PromptCheckpoint = serde_json::from_slice(&bytes)?;
        let checksum = ckpt.encoder_checksum.clone();
        Ok((Self::from_checkpoint(ckpt)?, checksum))
    }
}

impl Module for PromptLearner {
    type Vars = LearnerVars;

    fn bind(&self, g: &mut Graph, trainable: bool) -> LearnerVars {
        LearnerVars {
            ctx: g.param_with(&self.ctx.vectors, trainable),
            meta: self.meta.as_ref().map(|m| m.bind(g, trainable)),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "ctx"), &self.ctx.vectors);
        if let Some(m) = &self.meta {
            m.visit(&join(prefix, "meta"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "ctx"), &mut self.ctx.vectors);
        if let Some(m) = &mut self.meta {
            m.visit_mut(&join(prefix, "meta"), f);
        }
    }
}

impl BoundVars for LearnerVars {
    fn flat(&self, out: &mut Vec<Var>) {
        out.push(self.ctx);
        if let Some(m) = &self.meta {
            m.flat(out);
        }
    }
}

pub const PROMPT_FORMAT: &str = "promim-prompt";
pub const PROMPT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptCheckpoint {
    pub format: String,
    pub version: u32,
    pub method: Method,
    pub encoder_checksum: String,
    pub n_ctx: usize,
    pub params: Vec<NamedArray>,
}
