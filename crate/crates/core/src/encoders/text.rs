use rand::Rng;

use super::config::EncoderConfig;
use super::layers::{
    causal_mask, join, Block, BlockVars, BoundVars, LayerNorm, LayerNormVars, Module,
};
use super::vocab::TokenId;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Causal token transformer pooled at the last position.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub token_embedding: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    pub proj: Tensor,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct TextVars {
    pub token_embedding: Var,
    pos_embed: Var,
    blocks: Vec<BlockVars>,
    ln_final: LayerNormVars,
    proj: Var,
    heads: usize,
}

impl TextEncoder {
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        Self {
            token_embedding: Tensor::randn(vec![cfg.text_vocab_size, d], 0.02, rng),
            pos_embed: Tensor::randn(vec![cfg.max_text_len, d], 0.02, rng),
            blocks: (0..cfg.depth).map(|_| Block::init(d, rng)).collect(),
            ln_final: LayerNorm::new(d),
            proj: Tensor::randn(vec![d, cfg.output_dim], 1.0 / (d as f64).sqrt(), rng),
            heads: cfg.heads,
        }
    }
}

impl Module for TextEncoder {
    type Vars = TextVars;

    fn bind(&self, g: &mut Graph, trainable: bool) -> TextVars {
        TextVars {
            token_embedding: g.param_with(&self.token_embedding, trainable),
            pos_embed: g.param_with(&self.pos_embed, trainable),
            blocks: self.blocks.iter().map(|b| b.bind(g, trainable)).collect(),
            ln_final: self.ln_final.bind(g, trainable),
            proj: g.param_with(&self.proj, trainable),
            heads: self.heads,
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "token_embedding"), &self.token_embedding);
        f(&join(prefix, "pos_embed"), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_final.visit(&join(prefix, "ln_final"), f);
        f(&join(prefix, "proj"), &self.proj);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "token_embedding"), &mut self.token_embedding);
        f(&join(prefix, "pos_embed"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_final.visit_mut(&join(prefix, "ln_final"), f);
        f(&join(prefix, "proj"), &mut self.proj);
    }
}

impl BoundVars for TextVars {
    fn flat(&self, out: &mut Vec<Var>) {
        out.push(self.token_embedding);
        out.push(self.pos_embed);
        self.blocks.flat(out);
        self.ln_final.flat(out);
        out.push(self.proj);
    }
}

impl TextVars {
    fn vocab_size(&self, g: &Graph) -> usize {
        g.value(self.token_embedding).shape()[0]
    }

    fn max_len(&self, g: &Graph) -> usize {
        g.value(self.pos_embed).shape()[0]
    }

    fn check_ids(&self, g: &Graph, tokens: &[TokenId]) -> Result<()> {
        let v = self.vocab_size(g);
        if let Some(bad) = tokens.iter().find(|&&t| t >= v) {
            return Err(Error::input(format!(
                "token id {bad} outside a vocabulary of {v}"
            )));
        }
        Ok(())
    }

    /// Token-id input.
    pub fn forward_tokens(&self, g: &mut Graph, tokens: &[TokenId]) -> Result<Var> {
        if tokens.is_empty() || tokens.len() > self.max_len(g) {
            return Err(Error::input(format!(
                "text of {} tokens, allowed 1..={}",
                tokens.len(),
                self.max_len(g)
            )));
        }
        self.check_ids(g, tokens)?;
        let emb = g.select_rows(self.token_embedding, tokens)?;
        self.forward_embedded(g, emb)
    }

    /// Soft-prefix input: the first rows come from `prefix` instead of the
    /// embedding table, followed by the table rows of `class_tokens`.
    pub fn forward_soft(
        &self,
        g: &mut Graph,
        prefix: Var,
        class_tokens: &[TokenId],
    ) -> Result<Var> {
        let (m, d) = g.value(prefix).dims2()?;
        let embed_dim = g.value(self.token_embedding).shape()[1];
        if d != embed_dim {
            return Err(Error::dim(format!(
                "prefix vectors of width {d}, embedding width is {embed_dim}"
            )));
        }
        if class_tokens.is_empty() {
            return Err(Error::input("class token sequence is empty"));
        }
        if m + class_tokens.len() > self.max_len(g) {
            return Err(Error::input(format!(
                "prompt of {} tokens exceeds {}",
                m + class_tokens.len(),
                self.max_len(g)
            )));
        }
        self.check_ids(g, class_tokens)?;
        let cls = g.select_rows(self.token_embedding, class_tokens)?;
        let emb = g.concat_rows(&[prefix, cls])?;
        self.forward_embedded(g, emb)
    }

    /// Shared tail: positions, causal blocks, final norm, last-token pooling.
    pub fn forward_embedded(&self, g: &mut Graph, emb: Var) -> Result<Var> {
        let len = g.value(emb).dims2()?.0;
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.select_rows(self.pos_embed, &positions)?;
        let mut x = g.add(emb, pos)?;
        let mask = (len > 1).then(|| g.constant(causal_mask(len)));
        for b in &self.blocks {
            x = b.forward(g, x, self.heads, mask)?;
        }
        let x = self.ln_final.forward(g, x)?;
        let last = g.row(x, len - 1)?;
        g.matmul(last, self.proj)
    }
}
