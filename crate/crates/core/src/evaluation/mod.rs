//! Accuracy, harmonic mean, the three evaluation protocols, sweeps and report output.

mod protocols;
mod report;

use serde::{Deserialize, Serialize};

use crate::encoders::layers::Module;
use crate::error::{Error, Result};
use crate::features::{normalize_rows, Conditioning, FeatureCache};
use crate::masking::MaskSpec;
use crate::numerics::{Graph, Tensor};
use crate::prompting::{class_tokens, compute_reference_embeddings, Method, PromptLearner};
use crate::seeding::{self, role};

pub use protocols::{
    ablation, base_to_new, base_to_new_with, cross_dataset, domain_shift, run_cells, score_split,
    sweep, zero_shot, AblationRow, BaseToNew, Benchmark, CellHook, CrossDatasetReport,
    DomainShiftReport, EvalConfig, SweepAxis, SweepRow,
};
pub use report::{
    ablation_rows, base_to_new_rows, read_accuracy_csv, read_results_csv, svg_bar_chart,
    svg_line_chart, sweep_rows, write_accuracy_csv, write_results_csv, AccuracyRow, ResultRow,
    ACCURACY_HEADER, RESULTS_HEADER,
};

/// `2ab / (a + b)` for positive percentages.
pub fn harmonic_mean(base: f64, new: f64) -> Result<f64> {
    if !(base > 0.0) || !(new > 0.0) || !base.is_finite() || !new.is_finite() {
        return Err(Error::input(format!(
            "harmonic mean needs positive inputs, got ({base}, {new})"
        )));
    }
    Ok(2.0 * base * new / (base + new))
}

/// Percentage of positions where `predicted == truth`.
pub fn accuracy_of(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::input("accuracy over an empty set"));
    }
    if predicted.len() != truth.len() {
        return Err(Error::dim(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(100.0 * hits as f64 / predicted.len() as f64)
}

/// Per-family base/new result for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyRecord {
    pub family: u64,
    pub seed: Option<u64>,
    pub base_acc: f64,
    pub new_acc: f64,
    pub h: f64,
    pub tokens_processed: u64,
    pub patch_tokens: u64,
}

/// Base/new/H for a method, either for one seed or averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: String,
    pub seed: Option<u64>,
    pub base_acc: f64,
    pub new_acc: f64,
    /// Harmonic mean of `base_acc` and `new_acc`.
    pub h: f64,
    /// Mean of the per-family harmonic means, the alternative aggregation.
    pub h_family_mean: f64,
    pub per_family: Vec<FamilyRecord>,
    pub tokens_processed: u64,
    pub patch_tokens: u64,
}

impl MetricRecord {
    /// Averages base and new over `families`, then takes the harmonic mean.
    pub fn aggregate(
        method: &str,
        seed: Option<u64>,
        per_family: Vec<FamilyRecord>,
    ) -> Result<Self> {
        if per_family.is_empty() {
            return Err(Error::input("no records to aggregate"));
        }
        let n = per_family.len() as f64;
        let base = per_family.iter().map(|r| r.base_acc).sum::<f64>() / n;
        let new = per_family.iter().map(|r| r.new_acc).sum::<f64>() / n;
        Ok(Self {
            method: method.to_string(),
            seed,
            base_acc: base,
            new_acc: new,
            h: harmonic_mean(base, new)?,
            h_family_mean: per_family.iter().map(|r| r.h).sum::<f64>() / n,
            tokens_processed: per_family.iter().map(|r| r.tokens_processed).sum(),
            patch_tokens: per_family.iter().map(|r| r.patch_tokens).sum(),
            per_family,
        })
    }

    /// Checks that the stored `h` is the harmonic mean of the stored accuracies.
    pub fn is_consistent(&self) -> bool {
        harmonic_mean(self.base_acc, self.new_acc).is_ok_and(|h| (h - self.h).abs() <= 1e-9)
    }
}

/// What produces the class text embeddings.
#[derive(Clone, Copy, Debug)]
pub enum PromptModel<'a> {
    /// Fixed "a photo of a [CLS]" prompts.
    Handcrafted,
    Learned(&'a PromptLearner),
}

/// Evaluation-time conditioning policy.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// Mask applied to the conditioning image of masked-input methods.
    pub mask: Option<MaskSpec>,
}

impl EvalOptions {
    pub const UNMASKED: EvalOptions = EvalOptions { mask: None };
}

/// Evaluation summary for one (model, class set, sample set).
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub tokens_processed: u64,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn conditioning(
    features: &FeatureCache<'_>,
    method: Method,
    id: usize,
    opts: &EvalOptions,
) -> Result<Option<Conditioning>> {
    match method {
        Method::Coop | Method::Kgcoop => Ok(None),
        Method::Cocoop => features.full_conditioning(id).map(Some),
        Method::Promim => match &opts.mask {
            None => features.full_conditioning(id).map(Some),
            Some(spec) => {
                let grid = &features.get(id)?.grid;
                let mut rng = seeding::rng(&[
                    role::EVAL_MASK,
                    spec.seed,
                    features.dataset.spec.family_id,
                    id as u64,
                ]);
                let mask = spec.sample(grid.grid_h, grid.grid_w, &mut rng)?;
                features.masked_conditioning(id, &mask).map(Some)
            }
        },
    }
}

fn similarities(x: &Tensor, classes: &Tensor) -> Vec<f64> {
    let d = x.numel();
    (0..classes.shape()[0])
        .map(|c| {
            classes
                .row_slice(c)
                .iter()
                .zip(&x.data()[..d])
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

fn learned_class_embeddings(
    features: &FeatureCache<'_>,
    learner: &PromptLearner,
    tokens: &[Vec<usize>],
    cond: Option<&Conditioning>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let text = features.encoder.bind_text(&mut g);
    let vars = learner.bind(&mut g, false);
    let c = cond.map(|c| g.constant(c.embedding.clone()));
    let raw = learner.class_embeddings(&mut g, &vars, &text, c, tokens)?;
    normalize_rows(g.value(raw))
}

/// Classifies `ids` among the dataset classes `classes` (labels) and scores
/// the predictions against the true labels.
pub fn accuracy(
    features: &FeatureCache<'_>,
    model: PromptModel<'_>,
    classes: &[usize],
    ids: &[usize],
    opts: &EvalOptions,
) -> Result<EvalResult> {
    if ids.is_empty() {
        return Err(Error::input("empty evaluation set"));
    }
    if classes.len() < 2 {
        return Err(Error::input("evaluation needs at least 2 classes"));
    }
    let ds = features.dataset;
    let names: Vec<String> = classes
        .iter()
        .map(|&c| {
            ds.class_names
                .get(c)
                .cloned()
                .ok_or_else(|| Error::input(format!("class {c} not in dataset")))
        })
        .collect::<Result<_>>()?;
    let vocab = features.encoder.vocab();
    let fixed =
        match model {
            PromptModel::Handcrafted => {
                Some(compute_reference_embeddings(features.encoder, &names)?.embeddings)
            }
            PromptModel::Learned(l) if !l.method.is_conditional() => Some(
                learned_class_embeddings(features, l, &class_tokens(vocab, &names)?, None)?,
            ),
            PromptModel::Learned(_) => None,
        };
    let tokens = class_tokens(vocab, &names)?;
    let mut predictions = Vec::with_capacity(ids.len());
    let mut truth = Vec::with_capacity(ids.len());
    let mut processed = 0u64;
    for &id in ids {
        let sample = ds.sample(id)?;
        if !classes.contains(&sample.label) {
            return Err(Error::input(format!(
                "sample {id} is not from an evaluated class"
            )));
        }
        let x = &features.get(id)?.full;
        let class_embs = match (&fixed, model) {
            (Some(f), _) => f.clone(),
            (None, PromptModel::Learned(l)) => {
                let cond = conditioning(features, l.method, id, opts)?;
                if let Some(c) = &cond {
                    processed += c.tokens_processed as u64;
                }
                learned_class_embeddings(features, l, &tokens, cond.as_ref())?
            }
            (None, PromptModel::Handcrafted) => unreachable!("handcrafted prompts are fixed"),
        };
        predictions.push(classes[argmax(&similarities(x, &class_embs))]);
        truth.push(sample.label);
    }
    Ok(EvalResult {
        accuracy: accuracy_of(&predictions, &truth)?,
        predictions,
        tokens_processed: processed,
    })
}
