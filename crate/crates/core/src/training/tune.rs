use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitPlan};
use crate::encoders::layers::{accumulate_grads, Module};
use crate::encoders::{DualEncoder, TokenId};
use crate::error::{Error, Result};
use crate::features::{Conditioning, FeatureCache};
use crate::masking::MaskSpec;
use crate::numerics::{Graph, Tensor, Var};
use crate::objectives::{
    class_probabilities, cross_entropy, kg_loss, total_loss, KgSpace, LossBreakdown,
};
use crate::prompting::{
    class_tokens, compute_reference_embeddings, ContextTokens, MetaNet, Method, PromptLearner,
    META_REDUCTION,
};
use crate::seeding::{self, role};

use super::optim::sgd_step;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextInit {
    #[default]
    Gaussian,
    /// Embeddings of the template words before the class name.
    Template,
}

/// Prompt-tuning hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub method: Method,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Number of context tokens.
    pub n_ctx: usize,
    pub lambda: f64,
    pub mask: MaskSpec,
    /// Shots per base class.
    pub k: usize,
    pub seeds: Vec<u64>,
    pub ctx_init: ContextInit,
    pub kg_space: KgSpace,
    /// Mask the conditioning image at evaluation time as well.
    pub eval_mask: bool,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            method: Method::Promim,
            epochs: 10,
            lr: 0.02,
            batch_size: 1,
            n_ctx: 4,
            lambda: 2.0,
            mask: MaskSpec::default(),
            k: 16,
            seeds: vec![0, 1, 2],
            ctx_init: ContextInit::Gaussian,
            kg_space: KgSpace::Normalized,
            eval_mask: true,
        }
    }
}

impl TuneConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    /// Validates and applies the per-method rules: coop and cocoop train
    /// without the knowledge-guided term, and only promim masks its input.
    pub fn resolve(&self) -> Result<Self> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "tune.lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.n_ctx == 0 || self.k == 0 {
            return Err(Error::Config(
                "tune.batch_size, tune.n_ctx and tune.k must be positive".into(),
            ));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "tune.lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("tune.seeds must not be empty".into()));
        }
        self.mask
            .validate()
            .map_err(|e| Error::Config(format!("tune.mask: {e}")))?;
        let mut out = self.clone();
        if !self.method.uses_kg() {
            out.lambda = 0.0;
        }
        if !self.method.masks_input() {
            out.mask.ratio = 0.0;
            out.eval_mask = false;
        }
        Ok(out)
    }
}

/// One training step as written to the log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub ce: f64,
    pub kg: f64,
    pub lambda: f64,
    pub total: f64,
    /// Conditioning-path tokens (visible patches plus summary token) this step.
    pub tokens_processed: usize,
}

impl LogRow {
    fn new(epoch: usize, step: usize, b: LossBreakdown, tokens_processed: usize) -> Self {
        Self {
            epoch,
            step,
            ce: b.ce,
            kg: b.kg,
            lambda: b.lambda,
            total: b.total,
            tokens_processed,
        }
    }
}

pub const LOG_HEADER: [&str; 7] = [
    "epoch",
    "step",
    "ce",
    "kg",
    "lambda",
    "total",
    "tokens_processed",
];

pub fn write_log_csv<W: Write>(w: W, rows: &[LogRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(LOG_HEADER)?;
    for r in rows {
        out.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            format!("{:.12}", r.ce),
            format!("{:.12}", r.kg),
            format!("{}", r.lambda),
            format!("{:.12}", r.total),
            r.tokens_processed.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    write_log_csv(std::fs::File::create(path)?, rows)
}

#[derive(Clone, Debug)]
pub struct TuneOutcome {
    pub learner: PromptLearner,
    pub log: Vec<LogRow>,
    pub tokens_processed: u64,
    pub patch_tokens: u64,
    /// Every sample id that entered a training batch.
    pub trained_ids: BTreeSet<usize>,
}

/// Prompt learner with its initialization rule for `(method, seed)`.
pub fn init_learner(encoder: &DualEncoder, cfg: &TuneConfig, seed: u64) -> Result<PromptLearner> {
    let ec = encoder.config();
    let ctx = match cfg.ctx_init {
        ContextInit::Gaussian => ContextTokens::gaussian(
            cfg.n_ctx,
            ec.embed_dim,
            &mut seeding::rng(&[role::CONTEXT_INIT, seed]),
        )?,
        ContextInit::Template => ContextTokens::from_template(encoder, cfg.n_ctx)?,
    };
    let meta = if cfg.method.is_conditional() {
        Some(MetaNet::new(
            ec.output_dim,
            ec.embed_dim,
            META_REDUCTION,
            &mut seeding::rng(&[role::META_INIT, seed]),
        )?)
    } else {
        None
    };
    PromptLearner::new(cfg.method, ctx, meta)
}

fn mean(g: &mut Graph, vs: &[Var]) -> Result<Var> {
    match vs {
        [] => Err(Error::input("empty batch")),
        [v] => Ok(*v),
        [first, rest @ ..] => {
            let mut acc = *first;
            for v in rest {
                acc = g.add(acc, *v)?;
            }
            g.scale(acc, 1.0 / vs.len() as f64)
        }
    }
}

/// Step-by-step prompt tuning on the base classes of one split.
pub struct Tuner<'a> {
    features: &'a FeatureCache<'a>,
    split: &'a SplitPlan,
    cfg: TuneConfig,
    seed: u64,
    learner: PromptLearner,
    classes: Vec<Vec<TokenId>>,
    reference: Tensor,
    base: BTreeSet<usize>,
    step: usize,
    outcome_log: Vec<LogRow>,
    tokens_processed: u64,
    patch_tokens: u64,
    trained_ids: BTreeSet<usize>,
}

impl<'a> Tuner<'a> {
    pub fn new(
        features: &'a FeatureCache<'a>,
        split: &'a SplitPlan,
        cfg: &TuneConfig,
        seed: u64,
    ) -> Result<Self> {
        let learner = init_learner(features.encoder, &cfg.resolve()?, seed)?;
        Self::with_learner(features, split, cfg, seed, learner)
    }

    pub fn with_learner(
        features: &'a FeatureCache<'a>,
        split: &'a SplitPlan,
        cfg: &TuneConfig,
        seed: u64,
        learner: PromptLearner,
    ) -> Result<Self> {
        let cfg = cfg.resolve()?;
        if learner.method != cfg.method {
            return Err(Error::input(format!(
                "learner is for {}, config for {}",
                learner.method, cfg.method
            )));
        }
        let encoder = features.encoder;
        if !encoder.is_frozen() {
            return Err(Error::Contract("tuning requires a frozen encoder".into()));
        }
        split.validate(features.dataset)?;
        if split.base_classes.len() < 2 {
            return Err(Error::input("tuning needs at least 2 base classes"));
        }
        let names = split.base_names(features.dataset);
        let classes = class_tokens(encoder.vocab(), &names)?;
        let reference = compute_reference_embeddings(encoder, &names)?
            .select(&names, cfg.kg_space == KgSpace::Normalized)?;
        Ok(Self {
            features,
            split,
            seed,
            learner,
            classes,
            reference,
            base: split.base_classes.iter().copied().collect(),
            step: 0,
            outcome_log: Vec::new(),
            tokens_processed: 0,
            patch_tokens: 0,
            trained_ids: BTreeSet::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &TuneConfig {
        &self.cfg
    }

    pub fn learner(&self) -> &PromptLearner {
        &self.learner
    }

    pub fn log(&self) -> &[LogRow] {
        &self.outcome_log
    }

    fn conditioning(&self, id: usize) -> Result<Option<Conditioning>> {
        match self.cfg.method {
            Method::Coop | Method::Kgcoop => Ok(None),
            Method::Cocoop => self.features.full_conditioning(id).map(Some),
            Method::Promim => {
                let grid = &self.features.get(id)?.grid;
                let mut rng = seeding::rng(&[
                    role::TRAIN_MASK,
                    self.seed,
                    self.cfg.mask.seed,
                    self.step as u64,
                    id as u64,
                ]);
                let mask = self.cfg.mask.sample(grid.grid_h, grid.grid_w, &mut rng)?;
                self.features.masked_conditioning(id, &mask).map(Some)
            }
        }
    }

    /// Runs one update on the given sample ids and returns its log row.
    pub fn step(&mut self, epoch: usize, ids: &[usize]) -> Result<LogRow> {
        let step = self.step;
        let row = self.forward_backward(epoch, ids).map_err(|e| match e {
            Error::NonFinite(reason) => Error::Training { step, reason },
            other => other,
        })?;
        sgd_step(&mut self.learner, self.cfg.lr, step)?;
        self.step += 1;
        self.outcome_log.push(row);
        Ok(row)
    }

    fn forward_backward(&mut self, epoch: usize, ids: &[usize]) -> Result<LogRow> {
        let ds = self.features.dataset;
        let mut labels = Vec::with_capacity(ids.len());
        for &id in ids {
            let s = ds.sample(id)?;
            if !self.base.contains(&s.label) {
                return Err(Error::Contract(format!(
                    "sample {id} of a new class in a training batch"
                )));
            }
            labels.push(
                self.split
                    .base_classes
                    .iter()
                    .position(|&c| c == s.label)
                    .expect("base label"),
            );
        }
        let tau = self.features.encoder.temperature();
        let mut g = Graph::new();
        let text = self.features.encoder.bind_text(&mut g);
        let vars = self.learner.bind(&mut g, true);
        let shared = if self.cfg.method.is_conditional() {
            None
        } else {
            Some(
                self.learner
                    .class_embeddings(&mut g, &vars, &text, None, &self.classes)?,
            )
        };
        let mut tokens = 0;
        let mut ces = Vec::with_capacity(ids.len());
        let mut kgs = Vec::with_capacity(ids.len());
        for (&id, &label) in ids.iter().zip(&labels) {
            let raw = match shared {
                Some(r) => r,
                None => {
                    let cond = self.conditioning(id)?.expect("conditional method");
                    tokens += cond.tokens_processed;
                    self.patch_tokens += cond.patch_tokens as u64;
                    let c = g.constant(cond.embedding);
                    self.learner
                        .class_embeddings(&mut g, &vars, &text, Some(c), &self.classes)?
                }
            };
            let x = g.constant(self.features.get(id)?.full.clone());
            let probs = class_probabilities(&mut g, x, raw, tau)?;
            ces.push(cross_entropy(&mut g, &probs, &[label])?);
            let learned = match self.cfg.kg_space {
                KgSpace::Normalized => g.l2_normalize_rows(raw)?,
                KgSpace::Raw => raw,
            };
            kgs.push(kg_loss(&mut g, learned, &self.reference)?);
        }
        let ce = mean(&mut g, &ces)?;
        let kg = mean(&mut g, &kgs)?;
        let kg_value = g.scalar(kg)?;
        let kg_term = self.cfg.method.uses_kg().then_some(kg);
        let (loss, breakdown) = total_loss(&mut g, ce, kg_term, self.cfg.lambda, Some(kg_value))?;
        if !breakdown.total.is_finite() {
            return Err(Error::Training {
                step: self.step,
                reason: format!("loss is {}", breakdown.total),
            });
        }
        g.backward(loss)?;
        accumulate_grads(&mut self.learner, &g, &vars)?;
        self.tokens_processed += tokens as u64;
        self.trained_ids.extend(ids.iter().copied());
        Ok(LogRow::new(epoch, self.step, breakdown, tokens))
    }

    /// Sample order of one epoch.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order = self.split.train.clone();
        order.shuffle(&mut seeding::rng(&[
            role::SHUFFLE,
            self.seed,
            self.features.dataset.spec.family_id,
            epoch as u64,
        ]));
        order
    }

    pub fn run_epoch(&mut self, epoch: usize) -> Result<()> {
        let order = self.epoch_order(epoch);
        for batch in order.chunks(self.cfg.batch_size) {
            self.step(epoch, batch)?;
        }
        Ok(())
    }

    pub fn finish(self) -> TuneOutcome {
        TuneOutcome {
            learner: self.learner,
            log: self.outcome_log,
            tokens_processed: self.tokens_processed,
            patch_tokens: self.patch_tokens,
            trained_ids: self.trained_ids,
        }
    }
}

/// Tunes prompts for `cfg.method` on the split's base classes.
pub fn tune_with_features(
    features: &FeatureCache<'_>,
    split: &SplitPlan,
    cfg: &TuneConfig,
    seed: u64,
) -> Result<TuneOutcome> {
    let mut t = Tuner::new(features, split, cfg, seed)?;
    for epoch in 0..t.cfg.epochs {
        t.run_epoch(epoch)?;
    }
    Ok(t.finish())
}

pub fn tune(
    encoder: &DualEncoder,
    dataset: &Dataset,
    split: &SplitPlan,
    cfg: &TuneConfig,
    seed: u64,
) -> Result<TuneOutcome> {
    let features = FeatureCache::new(encoder, dataset)?;
    tune_with_features(&features, split, cfg, seed)
}
