use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_dataset, Dataset, SuiteSpec};
use crate::encoders::layers::accumulate_grads;
use crate::encoders::vocab::PRETRAIN_TEMPLATES;
use crate::encoders::{
    contrastive_pretrain_loss, DualEncoder, EncoderConfig, PatchGrid, MAX_LOGIT_SCALE,
};
use crate::error::{Error, Result};
use crate::numerics::Graph;
use crate::seeding::{self, role};

use super::optim::Adam;

/// Contrastive pretraining of the dual encoder on template captions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Distinct classes per batch; each contributes one (image, caption) pair.
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub corpus: SuiteSpec,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1200,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
            corpus: SuiteSpec {
                sample_seed: 1000,
                samples_per_class: 32,
                ..SuiteSpec::default()
            },
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        let classes = self.corpus.families * self.corpus.n_classes;
        if classes < 2 {
            return Err(Error::input("pretraining corpus needs at least 2 classes"));
        }
        if self.batch_size < 2 || self.batch_size > classes {
            return Err(Error::input(format!(
                "pretrain batch size {} must lie in [2, {classes}]",
                self.batch_size
            )));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::input("pretrain lr must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Batch loss before each update.
    pub losses: Vec<f64>,
    pub checksum: String,
}

struct Corpus {
    datasets: Vec<Dataset>,
    grids: Vec<Vec<PatchGrid>>,
}

impl Corpus {
    fn build(spec: &SuiteSpec, encoder: &DualEncoder) -> Result<Self> {
        let datasets = spec
            .specs()
            .iter()
            .map(generate_dataset)
            .collect::<Result<Vec<_>>>()?;
        let grids = datasets
            .iter()
            .map(|d| {
                d.samples
                    .iter()
                    .map(|s| encoder.patchify(&s.image))
                    .collect()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { datasets, grids })
    }
}

/// Trains a fresh encoder and returns it frozen.
///
/// Each step draws `batch_size` distinct classes from the whole corpus, one
/// image per class and one random caption template, and minimizes the
/// symmetric contrastive loss with Adam.
pub fn pretrain(
    config: &EncoderConfig,
    pcfg: &PretrainConfig,
) -> Result<(DualEncoder, PretrainReport)> {
    pcfg.validate()?;
    let mut encoder = DualEncoder::new(config.clone(), pcfg.seed)?;
    encoder.make_trainable()?;
    let corpus = Corpus::build(&pcfg.corpus, &encoder)?;
    let per_family = pcfg.corpus.n_classes;
    let total = pcfg.corpus.families * per_family;
    let spc = pcfg.corpus.samples_per_class;
    let mut opt = Adam::new(pcfg.lr);
    let mut losses = Vec::with_capacity(pcfg.steps);
    for step in 0..pcfg.steps {
        let mut rng = seeding::rng(&[role::PRETRAIN, pcfg.seed, step as u64]);
        let classes = index::sample(&mut rng, total, pcfg.batch_size).into_vec();
        let mut g = Graph::new();
        let vars = encoder.bind_all(&mut g);
        let mut images = Vec::with_capacity(classes.len());
        let mut texts = Vec::with_capacity(classes.len());
        for &c in &classes {
            let (f, label) = (c / per_family, c % per_family);
            let id = label * spc + rng.random_range(0..spc);
            let grid = &corpus.grids[f][id];
            let visible: Vec<usize> = (0..grid.len()).collect();
            images.push(vars.vision.forward(&mut g, grid, &visible)?.embedding);
            let template = PRETRAIN_TEMPLATES[rng.random_range(0..PRETRAIN_TEMPLATES.len())];
            let tokens = encoder
                .vocab()
                .fill_template(template, &corpus.datasets[f].class_names[label])?;
            texts.push(vars.text.forward_tokens(&mut g, &tokens)?);
        }
        let img = g.concat_rows(&images)?;
        let img = g.l2_normalize_rows(img)?;
        let txt = g.concat_rows(&texts)?;
        let txt = g.l2_normalize_rows(txt)?;
        let scale = g.exp(vars.log_logit_scale)?;
        let loss =
            contrastive_pretrain_loss(&mut g, img, txt, scale).map_err(|e| Error::Training {
                step,
                reason: e.to_string(),
            })?;
        let value = g.scalar(loss)?;
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("loss is {value}"),
            });
        }
        losses.push(value);
        g.backward(loss)?;
        accumulate_grads(&mut encoder, &g, &vars)?;
        opt.step(&mut encoder, step)?;
        let s = &mut encoder.log_logit_scale.data_mut()[0];
        *s = s.min(MAX_LOGIT_SCALE.ln());
    }
    encoder.freeze();
    let checksum = encoder.checksum();
    Ok((encoder, PretrainReport { losses, checksum }))
}

/// Cache file for an (encoder, pretraining) configuration pair.
pub fn cache_path(dir: &Path, config: &EncoderConfig, pcfg: &PretrainConfig) -> Result<PathBuf> {
    let key = serde_json::to_vec(&(config, pcfg))?;
    let digest = hex::encode(Sha256::digest(&key));
    Ok(dir.join(format!("encoder-{}.json", &digest[..16])))
}

/// Loads a cached frozen encoder or pretrains and caches one.
pub fn load_or_pretrain(
    dir: &Path,
    config: &EncoderConfig,
    pcfg: &PretrainConfig,
) -> Result<(DualEncoder, bool)> {
    let path = cache_path(dir, config, pcfg)?;
    if path.exists() {
        let enc = DualEncoder::load(&path)?;
        if enc.is_frozen() && enc.config() == config {
            return Ok((enc, true));
        }
    }
    let (enc, _) = pretrain(config, pcfg)?;
    std::fs::create_dir_all(dir)?;
    enc.save(&path)?;
    Ok((enc, false))
}
