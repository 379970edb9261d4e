use rand::Rng;

use super::config::EncoderConfig;
use super::layers::{
    join, Block, BlockVars, BoundVars, LayerNorm, LayerNormVars, Linear, LinearVars, Module,
};
use super::patch::PatchGrid;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Patch transformer with a class-summary token at position 0.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoder {
    pub patch_embed: Linear,
    pub cls_token: Tensor,
    /// Row 0 belongs to the summary token, row `i + 1` to patch `i`.
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    pub proj: Tensor,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct VisionVars {
    patch_embed: LinearVars,
    cls_token: Var,
    pos_embed: Var,
    blocks: Vec<BlockVars>,
    ln_final: LayerNormVars,
    proj: Var,
    heads: usize,
}

impl VisionEncoder {
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        Self {
            patch_embed: Linear::init(cfg.patch_len(), d, rng),
            cls_token: Tensor::randn(vec![1, d], 0.02, rng),
            pos_embed: Tensor::randn(vec![cfg.n_patches() + 1, d], 0.02, rng),
            blocks: (0..cfg.depth).map(|_| Block::init(d, rng)).collect(),
            ln_final: LayerNorm::new(d),
            proj: Tensor::randn(vec![d, cfg.output_dim], 1.0 / (d as f64).sqrt(), rng),
            heads: cfg.heads,
        }
    }
}

impl Module for VisionEncoder {
    type Vars = VisionVars;

    fn bind(&self, g: &mut Graph, trainable: bool) -> VisionVars {
        VisionVars {
            patch_embed: self.patch_embed.bind(g, trainable),
            cls_token: g.param_with(&self.cls_token, trainable),
            pos_embed: g.param_with(&self.pos_embed, trainable),
            blocks: self.blocks.iter().map(|b| b.bind(g, trainable)).collect(),
            ln_final: self.ln_final.bind(g, trainable),
            proj: g.param_with(&self.proj, trainable),
            heads: self.heads,
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "cls_token"), &self.cls_token);
        f(&join(prefix, "pos_embed"), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_final.visit(&join(prefix, "ln_final"), f);
        f(&join(prefix, "proj"), &self.proj);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "cls_token"), &mut self.cls_token);
        f(&join(prefix, "pos_embed"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_final.visit_mut(&join(prefix, "ln_final"), f);
        f(&join(prefix, "proj"), &mut self.proj);
    }
}

impl BoundVars for VisionVars {
    fn flat(&self, out: &mut Vec<Var>) {
        self.patch_embed.flat(out);
        out.push(self.cls_token);
        out.push(self.pos_embed);
        self.blocks.flat(out);
        self.ln_final.flat(out);
        out.push(self.proj);
    }
}

/// Result of a graph-level vision pass.
#[derive(Clone, Copy, Debug)]
pub struct VisionPass {
    /// Unnormalized `[1, output_dim]` embedding.
    pub embedding: Var,
    /// Tokens that went through the transformer: visible patches plus the summary token.
    pub tokens_processed: usize,
}

pub(crate) fn check_visible(visible: &[usize], n: usize) -> Result<()> {
    if visible.is_empty() {
        return Err(Error::degenerate(
            "vision encoder needs at least one visible patch",
        ));
    }
    let mut seen = vec![false; n];
    for &i in visible {
        if i >= n {
            return Err(Error::dim(format!(
                "visible patch {i} outside a grid of {n}"
            )));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::input(format!("visible patch {i} listed twice")));
        }
    }
    Ok(())
}

impl VisionVars {
    /// Encodes only the patches listed in `visible`.
    ///
    /// Positional embeddings are gathered by patch index before the
    /// transformer, so a visible subset sees the same positions it would in
    /// the full grid.
    pub fn forward(
        &self,
        g: &mut Graph,
        grid: &PatchGrid,
        visible: &[usize],
    ) -> Result<VisionPass> {
        check_visible(visible, grid.len())?;
        let patch_len = g.value(self.patch_embed.weight).dims2()?.0;
        let mut data = Vec::with_capacity(visible.len() * patch_len);
        for &i in visible {
            if grid.patches[i].len() != patch_len {
                return Err(Error::dim(format!(
                    "patch of {} values, encoder expects {patch_len}",
                    grid.patches[i].len()
                )));
            }
            data.extend_from_slice(&grid.patches[i]);
        }
        let n_pos = g.value(self.pos_embed).dims2()?.0;
        if grid.len() + 1 != n_pos {
            return Err(Error::dim(format!(
                "grid of {} patches, encoder has {} positions",
                grid.len(),
                n_pos - 1
            )));
        }
        let patches = g.constant(Tensor::matrix(visible.len(), patch_len, data)?);
        let tokens = self.patch_embed.forward(g, patches)?;
        let pos_rows: Vec<usize> = visible.iter().map(|i| i + 1).collect();
        let pos = g.select_rows(self.pos_embed, &pos_rows)?;
        let tokens = g.add(tokens, pos)?;
        let cls_pos = g.row(self.pos_embed, 0)?;
        let cls = g.add(self.cls_token, cls_pos)?;
        let mut x = g.concat_rows(&[cls, tokens])?;
        for b in &self.blocks {
            x = b.forward(g, x, self.heads, None)?;
        }
        let x = self.ln_final.forward(g, x)?;
        let summary = g.row(x, 0)?;
        let embedding = g.matmul(summary, self.proj)?;
        Ok(VisionPass {
            embedding,
            tokens_processed: visible.len() + 1,
        })
    }
}
