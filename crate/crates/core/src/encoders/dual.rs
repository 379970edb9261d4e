use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::EncoderConfig;
use super::layers::{join, BoundVars, Module};
use super::patch::{patchify, Image, PatchGrid};
use super::text::{TextEncoder, TextVars};
use super::vision::{VisionEncoder, VisionVars};
use super::vocab::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::seeding::{self, role};

/// Initial inverse temperature.
pub const INIT_LOGIT_SCALE: f64 = 14.0;
/// Upper clamp on the learned inverse temperature.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

/// Image and text towers plus the learned temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder {
    config: EncoderConfig,
    vocab: Vocabulary,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    /// `ln(1/tau)`, shape `[1,1]`.
    pub log_logit_scale: Tensor,
    frozen: bool,
}

#[derive(Clone, Debug)]
pub struct DualVars {
    pub vision: VisionVars,
    pub text: TextVars,
    pub log_logit_scale: Var,
}

/// A non-differentiable vision pass.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionOutput {
    /// Unnormalized `[1, output_dim]` embedding.
    pub embedding: Tensor,
    /// Visible patches plus the summary token.
    pub tokens_processed: usize,
    /// Visible patches only.
    pub patch_tokens: usize,
}

impl DualEncoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::default();
        if config.text_vocab_size < vocab.len() {
            return Err(Error::Config(format!(
                "text_vocab_size {} is smaller than the {}-word vocabulary",
                config.text_vocab_size,
                vocab.len()
            )));
        }
        let mut rng = seeding::rng(&[seed, role::ENCODER_INIT]);
        let vision = VisionEncoder::init(&config, &mut rng);
        let text = TextEncoder::init(&config, &mut rng);
        Ok(Self {
            config,
            vocab,
            vision,
            text,
            log_logit_scale: Tensor::scalar(INIT_LOGIT_SCALE.ln()),
            frozen: false,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.visit_mut("", &mut |_, t| t.set_requires_grad(false));
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks every parameter trainable; fails once frozen.
    pub fn make_trainable(&mut self) -> Result<()> {
        if self.frozen {
            return Err(Error::Contract("encoder is frozen".into()));
        }
        self.visit_mut("", &mut |_, t| t.set_requires_grad(true));
        Ok(())
    }

    /// `1 / tau`.
    pub fn logit_scale(&self) -> f64 {
        self.log_logit_scale.data()[0].exp().min(MAX_LOGIT_SCALE)
    }

    pub fn temperature(&self) -> f64 {
        1.0 / self.logit_scale()
    }

    /// Copies the encoder onto `g`; frozen weights are bound as constants.
    pub fn bind_all(&self, g: &mut Graph) -> DualVars {
        self.bind(g, !self.frozen)
    }

    pub fn bind_text(&self, g: &mut Graph) -> TextVars {
        self.text.bind(g, !self.frozen)
    }

    pub fn bind_vision(&self, g: &mut Graph) -> VisionVars {
        self.vision.bind(g, !self.frozen)
    }

    pub fn patchify(&self, image: &Image) -> Result<PatchGrid> {
        if image.side != self.config.image_side || image.channels != self.config.channels {
            return Err(Error::dim(format!(
                "{}x{}x{} image for an encoder expecting {}x{}x{}",
                image.side,
                image.side,
                image.channels,
                self.config.image_side,
                self.config.image_side,
                self.config.channels
            )));
        }
        patchify(image, self.config.patch_size)
    }

    /// Encodes the `visible` patches of `grid`.
    pub fn vision_encode(&self, grid: &PatchGrid, visible: &[usize]) -> Result<VisionOutput> {
        let mut g = Graph::new();
        let vars = self.vision.bind(&mut g, false);
        let pass = vars.forward(&mut g, grid, visible)?;
        Ok(VisionOutput {
            embedding: g.value(pass.embedding).clone(),
            tokens_processed: pass.tokens_processed,
            patch_tokens: visible.len(),
        })
    }

    /// Encodes every patch of `image`.
    pub fn encode_image(&self, image: &Image) -> Result<VisionOutput> {
        let grid = self.patchify(image)?;
        let all: Vec<usize> = (0..grid.len()).collect();
        self.vision_encode(&grid, &all)
    }

    pub fn text_encode(&self, tokens: &[TokenId]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.text.bind(&mut g, false);
        let out = vars.forward_tokens(&mut g, tokens)?;
        Ok(g.value(out).clone())
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.visit("", &mut |name, t| {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }

    pub fn to_checkpoint(&self) -> EncoderCheckpoint {
        let mut params = Vec::new();
        self.visit("", &mut |name, t| {
            params.push(NamedArray {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
        });
        EncoderCheckpoint {
            format: ENCODER_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            frozen: self.frozen,
            temperature: self.temperature(),
            checksum: self.checksum(),
            params,
        }
    }

    /// Rebuilds an encoder, requiring the exact parameter table of `ckpt.config`.
    pub fn from_checkpoint(ckpt: EncoderCheckpoint) -> Result<Self> {
        if ckpt.format != ENCODER_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "expected {ENCODER_FORMAT} v{CHECKPOINT_VERSION}, found {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut enc = DualEncoder::new(ckpt.config.clone(), 0)?;
        let mut table: BTreeMap<String, NamedArray> = ckpt
            .params
            .into_iter()
            .map(|p| (p.name.clone(), p))
            .collect();
        let mut err = None;
        enc.visit_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match table.remove(name) {
                None => err = Some(Error::Checkpoint(format!("missing parameter {name}"))),
                Some(p) if p.shape != t.shape() => {
                    err = Some(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape,
                        t.shape()
                    )))
                }
                Some(p) => match Tensor::new(p.shape, p.data) {
                    Ok(v) => *t = v,
                    Err(e) => err = Some(Error::Checkpoint(format!("parameter {name}: {e}"))),
                },
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = table.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        if enc.checksum() != ckpt.checksum {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        if ckpt.frozen {
            enc.freeze();
        }
        Ok(enc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Checkpoint(format!(
                "cannot read encoder checkpoint {}: {e}",
                path.display()
            ))
        })?;
        Self::from_checkpoint(serde_json::from_slice(&bytes)?)
    }
}

impl Module for DualEncoder {
    type Vars = DualVars;

    fn bind(&self, g: &mut Graph, trainable: bool) -> DualVars {
        DualVars {
            vision: self.vision.bind(g, trainable),
            text: self.text.bind(g, trainable),
            log_logit_scale: g.param_with(&self.log_logit_scale, trainable),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.vision.visit(&join(prefix, "vision"), f);
        self.text.visit(&join(prefix, "text"), f);
        f(&join(prefix, "log_logit_scale"), &self.log_logit_scale);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.vision.visit_mut(&join(prefix, "vision"), f);
        self.text.visit_mut(&join(prefix, "text"), f);
        f(&join(prefix, "log_logit_scale"), &mut self.log_logit_scale);
    }
}

impl BoundVars for DualVars {
    fn flat(&self, out: &mut Vec<Var>) {
        self.vision.flat(out);
        self.text.flat(out);
        out.push(self.log_logit_scale);
    }
}

pub const ENCODER_FORMAT: &str = "promim-encoder";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderCheckpoint {
    pub format: String,
    pub version: u32,
    pub config: EncoderConfig,
    pub frozen: bool,
    pub temperature: f64,
    pub checksum: String,
    pub params: Vec<NamedArray>,
}

/// Symmetric InfoNCE over an `N x N` similarity matrix.
///
/// `image_embs` and `text_embs` are `[N, d]` and L2-normalized row-wise;
/// `logit_scale` is the one-element node holding `1/tau`. Pair `i` is the
/// positive for row and column `i`.
pub fn contrastive_pretrain_loss(
    g: &mut Graph,
    image_embs: Var,
    text_embs: Var,
    logit_scale: Var,
) -> Result<Var> {
    let (n, d) = g.value(image_embs).dims2()?;
    let (nt, dt) = g.value(text_embs).dims2()?;
    if n != nt || d != dt {
        return Err(Error::dim(format!("[{n},{d}] images vs [{nt},{dt}] texts")));
    }
    if n < 2 {
        return Err(Error::degenerate(
            "contrastive loss needs at least two pairs",
        ));
    }
    let tt = g.transpose(text_embs)?;
    let sims = g.matmul(image_embs, tt)?;
    let logits = g.scale_by(sims, logit_scale)?;
    let diag: Vec<usize> = (0..n).collect();
    let lp_i = g.log_softmax_rows(logits)?;
    let i2t = g.pick_mean(lp_i, &diag)?;
    let logits_t = g.transpose(logits)?;
    let lp_t = g.log_softmax_rows(logits_t)?;
    let t2i = g.pick_mean(lp_t, &diag)?;
    let both = g.add(i2t, t2i)?;
    g.scale(both, -0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_image(cfg: &EncoderConfig, phase: f64) -> Image {
        let s = cfg.image_side;
        let px = (0..s * s)
            .map(|i| 0.5 + 0.4 * ((i % s) as f64 * 0.7 + (i / s) as f64 * 0.3 + phase).sin())
            .collect();
        Image::new(s, 1, px).unwrap()
    }

    #[test]
    fn full_visibility_matches_unmasked_pass_bitwise() {
        let enc = DualEncoder::new(EncoderConfig::default(), 3).unwrap();
        let img = toy_image(enc.config(), 0.0);
        let full = enc.encode_image(&img).unwrap();
        let grid = enc.patchify(&img).unwrap();
        let all: Vec<usize> = (0..16).collect();
        let again = enc.vision_encode(&grid, &all).unwrap();
        assert_eq!(full.embedding.data(), again.embedding.data());
        assert_eq!(full.tokens_processed, 17);
    }

    #[test]
    fn masked_pass_processes_visible_plus_summary() {
        let enc = DualEncoder::new(EncoderConfig::default(), 3).unwrap();
        let grid = enc.patchify(&toy_image(enc.config(), 0.0)).unwrap();
        let out = enc.vision_encode(&grid, &[1, 6, 9, 14]).unwrap();
        assert_eq!(out.tokens_processed, 5);
        assert_eq!(out.patch_tokens, 4);
        assert_eq!(out.embedding.shape(), &[1, 32]);
        let other = enc.vision_encode(&grid, &[0, 2, 3, 4]).unwrap();
        assert_ne!(out.embedding.data(), other.embedding.data());
        assert!(matches!(
            enc.vision_encode(&grid, &[]),
            Err(Error::DegenerateInput(_))
        ));
        assert!(enc.vision_encode(&grid, &[16]).is_err());
    }

    #[test]
    fn text_encode_is_deterministic_and_checks_ids() {
        let enc = DualEncoder::new(EncoderConfig::default(), 1).unwrap();
        let toks = enc.vocab().embed_template("dog").unwrap();
        assert_eq!(
            enc.text_encode(&toks).unwrap(),
            enc.text_encode(&toks).unwrap()
        );
        assert!(matches!(enc.text_encode(&[64]), Err(Error::Input(_))));
        assert!(enc.text_encode(&[]).is_err());
        assert!(enc.text_encode(&[0; 13]).is_err());
    }

    #[test]
    fn vocabulary_singletons_have_finite_nonzero_norm() {
        let enc = DualEncoder::new(EncoderConfig::default(), 1).unwrap();
        for id in 0..enc.config().text_vocab_size {
            let e = enc.text_encode(&[id]).unwrap();
            let n = e.l2_norm();
            assert!(n.is_finite() && n > 0.0, "token {id}: norm {n}");
        }
    }

    #[test]
    fn soft_prefix_with_table_rows_equals_token_path() {
        let enc = DualEncoder::new(EncoderConfig::default(), 2).unwrap();
        let toks = enc.vocab().embed_template("owl").unwrap();
        let expected = enc.text_encode(&toks).unwrap();
        let mut g = Graph::new();
        let vars = enc.bind_text(&mut g);
        let rows = g.select_rows(vars.token_embedding, &toks[..4]).unwrap();
        let prefix = g.constant(g.value(rows).clone());
        let out = vars.forward_soft(&mut g, prefix, &toks[4..]).unwrap();
        assert_eq!(g.value(out).data(), expected.data());

        let bad = g.constant(Tensor::zeros(vec![4, 8]));
        assert!(matches!(
            vars.forward_soft(&mut g, bad, &toks[4..]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn contrastive_loss_limits() {
        let mut g = Graph::new();
        let same = g.constant(Tensor::matrix(3, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap());
        let s = g.constant(Tensor::scalar(7.0));
        let l = contrastive_pretrain_loss(&mut g, same, same, s).unwrap();
        assert!((g.scalar(l).unwrap() - 3f64.ln()).abs() < 1e-12);

        let eye = g.constant(Tensor::identity(3));
        let big = g.constant(Tensor::scalar(1e3));
        let l = contrastive_pretrain_loss(&mut g, eye, eye, big).unwrap();
        assert!(g.scalar(l).unwrap() < 1e-12);

        let one = g.constant(Tensor::row(vec![1.0, 0.0]));
        assert!(matches!(
            contrastive_pretrain_loss(&mut g, one, one, s),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let mut enc = DualEncoder::new(EncoderConfig::default(), 5).unwrap();
        enc.freeze();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.json");
        enc.save(&path).unwrap();
        let back = DualEncoder::load(&path).unwrap();
        assert_eq!(back.checksum(), enc.checksum());
        assert!(back.is_frozen());

        let mut ckpt = enc.to_checkpoint();
        ckpt.params[0].shape = vec![1, 1];
        assert!(matches!(
            DualEncoder::from_checkpoint(ckpt),
            Err(Error::Checkpoint(_))
        ));
        let mut ckpt = enc.to_checkpoint();
        ckpt.params.pop();
        assert!(DualEncoder::from_checkpoint(ckpt).is_err());
        let mut ckpt = enc.to_checkpoint();
        ckpt.params[3].data[0] += 1.0;
        assert!(DualEncoder::from_checkpoint(ckpt).is_err());
        assert!(DualEncoder::load(&dir.path().join("missing.json")).is_err());
    }
}
