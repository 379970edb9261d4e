use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    apply_shift, generate_dataset, make_full_split, make_split, Dataset, Shift, SplitPlan,
    SuiteSpec,
};
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::features::FeatureCache;
use crate::masking::MaskStrategy;
use crate::prompting::Method;
use crate::training::{tune_with_features, TuneConfig, TuneOutcome};

use super::{accuracy, harmonic_mean, EvalOptions, FamilyRecord, MetricRecord, PromptModel};

/// Protocol settings shared by every evaluation command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split_seed: u64,
    /// Cap on evaluation samples per class; 0 keeps all of them.
    pub max_eval_per_class: usize,
    pub source_family: u64,
    pub target_families: Vec<u64>,
    /// Shift specs such as `noise:0.3`.
    pub shifts: Vec<String>,
    /// Worker threads for independent (family, seed) cells.
    pub parallel: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split_seed: 0,
            max_eval_per_class: 0,
            source_family: 0,
            target_families: vec![1, 2, 3, 4, 5],
            shifts: vec![
                "brightness:0.2".into(),
                "noise:0.15".into(),
                "noise:0.3".into(),
                "invert".into(),
            ],
            parallel: 1,
        }
    }
}

impl EvalConfig {
    pub fn parsed_shifts(&self) -> Result<Vec<Shift>> {
        self.shifts.iter().map(|s| Shift::parse(s)).collect()
    }
}

/// Generated datasets of a suite.
pub struct Benchmark {
    pub suite: SuiteSpec,
    pub datasets: Vec<Dataset>,
}

impl Benchmark {
    pub fn generate(suite: &SuiteSpec) -> Result<Self> {
        suite.validate()?;
        Ok(Self {
            suite: suite.clone(),
            datasets: suite
                .specs()
                .iter()
                .map(generate_dataset)
                .collect::<Result<_>>()?,
        })
    }

    pub fn features<'a>(&'a self, encoder: &'a DualEncoder) -> Result<Vec<FeatureCache<'a>>> {
        self.datasets
            .iter()
            .map(|d| FeatureCache::new(encoder, d))
            .collect()
    }
}

/// Runs `f(0..n)` serially or on a pool of `parallel` threads. Results keep
/// index order either way.
pub fn run_cells<T, F>(n: usize, parallel: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if parallel <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .map_err(|e| Error::input(format!("cannot start {parallel} workers: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

fn limit_per_class(ds: &Dataset, ids: &[usize], cap: usize) -> Vec<usize> {
    if cap == 0 {
        return ids.to_vec();
    }
    let mut seen = vec![0usize; ds.n_classes()];
    ids.iter()
        .copied()
        .filter(|&id| {
            let l = ds.samples[id].label;
            seen[l] += 1;
            seen[l] <= cap
        })
        .collect()
}

fn eval_options(cfg: &TuneConfig) -> EvalOptions {
    EvalOptions {
        mask: cfg.eval_mask.then(|| cfg.mask.clone()),
    }
}

/// Called once per (family, seed) cell with the split and the tuning outcome.
pub trait CellHook: Sync {
    fn on_cell(
        &self,
        family: u64,
        seed: u64,
        split: &SplitPlan,
        outcome: &TuneOutcome,
    ) -> Result<()>;
}

impl<F> CellHook for F
where
    F: Fn(u64, u64, &SplitPlan, &TuneOutcome) -> Result<()> + Sync,
{
    fn on_cell(
        &self,
        family: u64,
        seed: u64,
        split: &SplitPlan,
        outcome: &TuneOutcome,
    ) -> Result<()> {
        self(family, seed, split, outcome)
    }
}

fn family_cell(
    features: &FeatureCache<'_>,
    cfg: &TuneConfig,
    eval: &EvalConfig,
    seed: u64,
    hook: &dyn CellHook,
) -> Result<FamilyRecord> {
    let ds = features.dataset;
    let split = make_split(ds, cfg.k, eval.split_seed)?;
    let out = tune_with_features(features, &split, cfg, seed)?;
    hook.on_cell(ds.spec.family_id, seed, &split, &out)?;
    let (base, new) = score_split(features, &split, &out, cfg, eval)?;
    Ok(FamilyRecord {
        family: ds.spec.family_id,
        seed: Some(seed),
        base_acc: base,
        new_acc: new,
        h: harmonic_mean(base, new)?,
        tokens_processed: out.tokens_processed,
        patch_tokens: out.patch_tokens,
    })
}

/// Base and new accuracy of a tuned learner on a split.
pub fn score_split(
    features: &FeatureCache<'_>,
    split: &SplitPlan,
    out: &TuneOutcome,
    cfg: &TuneConfig,
    eval: &EvalConfig,
) -> Result<(f64, f64)> {
    let ds = features.dataset;
    let opts = eval_options(cfg);
    let model = PromptModel::Learned(&out.learner);
    let base_ids = limit_per_class(ds, &split.eval_base, eval.max_eval_per_class);
    let new_ids = limit_per_class(ds, &split.eval_new, eval.max_eval_per_class);
    let base = accuracy(features, model, &split.base_classes, &base_ids, &opts)?.accuracy;
    let new = accuracy(features, model, &split.new_classes, &new_ids, &opts)?.accuracy;
    Ok((base, new))
}

/// Per-seed suite records and their seed average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseToNew {
    pub per_seed: Vec<MetricRecord>,
    pub mean: MetricRecord,
}

fn average_over_seeds(method: &str, per_seed: &[MetricRecord]) -> Result<MetricRecord> {
    let n = per_seed.len() as f64;
    let families = per_seed[0].per_family.len();
    let per_family = (0..families)
        .map(|f| {
            let rows: Vec<&FamilyRecord> = per_seed.iter().map(|r| &r.per_family[f]).collect();
            let base = rows.iter().map(|r| r.base_acc).sum::<f64>() / n;
            let new = rows.iter().map(|r| r.new_acc).sum::<f64>() / n;
            Ok(FamilyRecord {
                family: rows[0].family,
                seed: None,
                base_acc: base,
                new_acc: new,
                h: harmonic_mean(base, new)?,
                tokens_processed: rows.iter().map(|r| r.tokens_processed).sum(),
                patch_tokens: rows.iter().map(|r| r.patch_tokens).sum(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mean = MetricRecord::aggregate(method, None, per_family)?;
    // Seed-first averaging of the suite means gives the same base/new; keep
    // those exact sums so the record does not depend on association order.
    mean.base_acc = per_seed.iter().map(|r| r.base_acc).sum::<f64>() / n;
    mean.new_acc = per_seed.iter().map(|r| r.new_acc).sum::<f64>() / n;
    mean.h = harmonic_mean(mean.base_acc, mean.new_acc)?;
    Ok(mean)
}

/// Tunes on the base classes of every family for every seed and scores base
/// and new classes. Base and new are averaged over families, then over seeds,
/// before the harmonic mean is taken.
pub fn base_to_new(
    features: &[FeatureCache<'_>],
    cfg: &TuneConfig,
    eval: &EvalConfig,
) -> Result<BaseToNew> {
    base_to_new_with(
        features,
        cfg,
        eval,
        &|_: u64, _: u64, _: &SplitPlan, _: &TuneOutcome| Ok(()),
    )
}

/// [`base_to_new`] with a hook that sees every tuned cell, e.g. to save checkpoints.
pub fn base_to_new_with(
    features: &[FeatureCache<'_>],
    cfg: &TuneConfig,
    eval: &EvalConfig,
    hook: &dyn CellHook,
) -> Result<BaseToNew> {
    let cfg = cfg.resolve()?;
    if features.is_empty() {
        return Err(Error::input("no datasets to evaluate"));
    }
    let nf = features.len();
    let cells = run_cells(cfg.seeds.len() * nf, eval.parallel, |i| {
        family_cell(&features[i % nf], &cfg, eval, cfg.seeds[i / nf], hook)
    })?;
    let method = cfg.method.to_string();
    let per_seed = cfg
        .seeds
        .iter()
        .zip(cells.chunks(nf))
        .map(|(&s, rows)| MetricRecord::aggregate(&method, Some(s), rows.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let mean = average_over_seeds(&method, &per_seed)?;
    Ok(BaseToNew { per_seed, mean })
}

/// Hand-crafted prompt accuracy on the same base/new split, no tuning.
pub fn zero_shot(
    features: &[FeatureCache<'_>],
    k: usize,
    eval: &EvalConfig,
) -> Result<MetricRecord> {
    let rows = features
        .iter()
        .map(|fc| {
            let ds = fc.dataset;
            let split = make_split(ds, k, eval.split_seed)?;
            let opts = EvalOptions::UNMASKED;
            let base_ids = limit_per_class(ds, &split.eval_base, eval.max_eval_per_class);
            let new_ids = limit_per_class(ds, &split.eval_new, eval.max_eval_per_class);
            let base = accuracy(
                fc,
                PromptModel::Handcrafted,
                &split.base_classes,
                &base_ids,
                &opts,
            )?
            .accuracy;
            let new = accuracy(
                fc,
                PromptModel::Handcrafted,
                &split.new_classes,
                &new_ids,
                &opts,
            )?
            .accuracy;
            Ok(FamilyRecord {
                family: ds.spec.family_id,
                seed: None,
                base_acc: base,
                new_acc: new,
                h: harmonic_mean(base, new)?,
                tokens_processed: 0,
                patch_tokens: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricRecord::aggregate("handcrafted", None, rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossDatasetReport {
    pub method: String,
    pub source_family: u64,
    /// Held-out accuracy on the source family, averaged over seeds.
    pub source_acc: f64,
    /// `(family, accuracy)` per target, averaged over seeds.
    pub targets: Vec<(u64, f64)>,
    /// Mean over targets.
    pub average: f64,
}

fn find_family<'a, 'b>(features: &'b [FeatureCache<'a>], id: u64) -> Result<&'b FeatureCache<'a>> {
    features
        .iter()
        .find(|f| f.dataset.spec.family_id == id)
        .ok_or_else(|| Error::input(format!("family {id} is not in the suite")))
}

/// Tunes on every class of the source family, then classifies each target
/// family among its own classes with the tuned prompts.
///
/// A target equal to the source is scored on the source's held-out samples,
/// so it reproduces the in-domain accuracy.
pub fn cross_dataset(
    features: &[FeatureCache<'_>],
    source: u64,
    targets: &[u64],
    cfg: &TuneConfig,
    eval: &EvalConfig,
) -> Result<CrossDatasetReport> {
    let cfg = cfg.resolve()?;
    if targets.is_empty() {
        return Err(Error::input("no target families"));
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = targets.iter().find(|t| !seen.insert(**t)) {
        return Err(Error::input(format!("target family {dup} listed twice")));
    }
    let src = find_family(features, source)?;
    let tgts = targets
        .iter()
        .map(|&t| find_family(features, t))
        .collect::<Result<Vec<_>>>()?;
    let opts = eval_options(&cfg);
    let per_seed = run_cells(cfg.seeds.len(), eval.parallel, |i| {
        let split = make_full_split(src.dataset, cfg.k, eval.split_seed)?;
        let out = tune_with_features(src, &split, &cfg, cfg.seeds[i])?;
        let model = PromptModel::Learned(&out.learner);
        let held_out = limit_per_class(src.dataset, &split.eval_base, eval.max_eval_per_class);
        let source_acc = accuracy(src, model, &split.base_classes, &held_out, &opts)?.accuracy;
        let mut accs = Vec::with_capacity(tgts.len());
        for t in &tgts {
            if t.dataset.spec.family_id == source {
                accs.push(source_acc);
                continue;
            }
            let all: Vec<usize> = (0..t.dataset.samples.len()).collect();
            let ids = limit_per_class(t.dataset, &all, eval.max_eval_per_class);
            let classes: Vec<usize> = (0..t.dataset.n_classes()).collect();
            accs.push(accuracy(t, model, &classes, &ids, &opts)?.accuracy);
        }
        Ok((source_acc, accs))
    })?;
    let n = per_seed.len() as f64;
    let source_acc = per_seed.iter().map(|r| r.0).sum::<f64>() / n;
    let targets: Vec<(u64, f64)> = targets
        .iter()
        .enumerate()
        .map(|(j, &t)| (t, per_seed.iter().map(|r| r.1[j]).sum::<f64>() / n))
        .collect();
    let average = targets.iter().map(|t| t.1).sum::<f64>() / targets.len() as f64;
    Ok(CrossDatasetReport {
        method: cfg.method.to_string(),
        source_family: source,
        source_acc,
        targets,
        average,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftReport {
    pub method: String,
    pub source_acc: f64,
    /// `(shift label, accuracy)`, averaged over seeds.
    pub shifts: Vec<(String, f64)>,
    pub average: f64,
}

/// Tunes on the unshifted source and scores its held-out samples under each shift.
pub fn domain_shift(
    source: &FeatureCache<'_>,
    shifts: &[Shift],
    cfg: &TuneConfig,
    eval: &EvalConfig,
) -> Result<DomainShiftReport> {
    let cfg = cfg.resolve()?;
    if shifts.is_empty() {
        return Err(Error::input("no shifts to evaluate"));
    }
    for s in shifts {
        s.validate()?;
    }
    let shifted: Vec<Dataset> = shifts
        .iter()
        .map(|&s| apply_shift(source.dataset, s))
        .collect::<Result<_>>()?;
    let shifted_features: Vec<FeatureCache<'_>> = shifted
        .iter()
        .map(|d| FeatureCache::new(source.encoder, d))
        .collect::<Result<_>>()?;
    let opts = eval_options(&cfg);
    let per_seed = run_cells(cfg.seeds.len(), eval.parallel, |i| {
        let split = make_full_split(source.dataset, cfg.k, eval.split_seed)?;
        let out = tune_with_features(source, &split, &cfg, cfg.seeds[i])?;
        let model = PromptModel::Learned(&out.learner);
        let ids = limit_per_class(source.dataset, &split.eval_base, eval.max_eval_per_class);
        let src = accuracy(source, model, &split.base_classes, &ids, &opts)?.accuracy;
        let accs = shifted_features
            .iter()
            .map(|f| Ok(accuracy(f, model, &split.base_classes, &ids, &opts)?.accuracy))
            .collect::<Result<Vec<_>>>()?;
        Ok((src, accs))
    })?;
    let n = per_seed.len() as f64;
    let shifts: Vec<(String, f64)> = shifts
        .iter()
        .enumerate()
        .map(|(j, s)| (s.label(), per_seed.iter().map(|r| r.1[j]).sum::<f64>() / n))
        .collect();
    Ok(DomainShiftReport {
        method: cfg.method.to_string(),
        source_acc: per_seed.iter().map(|r| r.0).sum::<f64>() / n,
        average: shifts.iter().map(|s| s.1).sum::<f64>() / shifts.len() as f64,
        shifts,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    MaskRatio,
    Lambda,
    K,
    Strategy,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::MaskRatio => "mask_ratio",
            SweepAxis::Lambda => "lambda",
            SweepAxis::K => "k",
            SweepAxis::Strategy => "strategy",
        }
    }

    /// Config with this axis set to `value`.
    pub fn apply(
        self,
        cfg: &TuneConfig,
        value: &str,
        samples_per_class: usize,
    ) -> Result<TuneConfig> {
        let bad = || Error::input(format!("invalid {} value {value:?}", self.as_str()));
        let mut out = cfg.clone();
        match self {
            SweepAxis::MaskRatio => {
                let r: f64 = value.parse().map_err(|_| bad())?;
                if !(0.0..1.0).contains(&r) {
                    return Err(bad());
                }
                out.mask.ratio = r;
            }
            SweepAxis::Lambda => {
                let l: f64 = value.parse().map_err(|_| bad())?;
                if !(l >= 0.0) || !l.is_finite() {
                    return Err(bad());
                }
                out.lambda = l;
            }
            SweepAxis::K => {
                let k: usize = value.parse().map_err(|_| bad())?;
                if k == 0 || k > samples_per_class {
                    return Err(bad());
                }
                out.k = k;
            }
            SweepAxis::Strategy => {
                out.mask.strategy = value.parse::<MaskStrategy>().map_err(|_| bad())?;
            }
        }
        out.resolve().map_err(|_| bad())?;
        Ok(out)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SweepAxis::MaskRatio,
            SweepAxis::Lambda,
            SweepAxis::K,
            SweepAxis::Strategy,
        ]
        .into_iter()
        .find(|a| a.as_str() == s)
        .ok_or_else(|| Error::input(format!("unknown sweep axis {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: String,
    pub result: BaseToNew,
}

/// One base-to-new run per grid value. Every value is validated before any run starts.
pub fn sweep(
    features: &[FeatureCache<'_>],
    axis: SweepAxis,
    values: &[String],
    cfg: &TuneConfig,
    eval: &EvalConfig,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::input("empty sweep grid"));
    }
    let spc = features
        .first()
        .ok_or_else(|| Error::input("no datasets to evaluate"))?
        .dataset
        .spec
        .samples_per_class;
    let cfgs = values
        .iter()
        .map(|v| axis.apply(cfg, v, spc))
        .collect::<Result<Vec<_>>>()?;
    values
        .iter()
        .zip(&cfgs)
        .map(|(v, c)| {
            Ok(SweepRow {
                axis,
                value: v.clone(),
                result: base_to_new(features, c, eval)?,
            })
        })
        .collect()
}

/// One cell of the {masked conditioning} x {knowledge-guided term} grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub mim_context: bool,
    pub kg: bool,
    pub result: BaseToNew,
}

/// The four ablation cells: cocoop, kgcoop, promim without the kg term, promim.
pub fn ablation(
    features: &[FeatureCache<'_>],
    cfg: &TuneConfig,
    eval: &EvalConfig,
) -> Result<Vec<AblationRow>> {
    let lambda = if cfg.lambda > 0.0 {
        cfg.lambda
    } else {
        TuneConfig::default().lambda
    };
    let cells = [
        ("cocoop", false, false, Method::Cocoop, 0.0),
        ("kgcoop", false, true, Method::Kgcoop, lambda),
        ("promim_no_kg", true, false, Method::Promim, 0.0),
        ("promim", true, true, Method::Promim, lambda),
    ];
    cells
        .iter()
        .map(|&(label, mim, kg, method, lambda)| {
            let c = TuneConfig {
                method,
                lambda,
                ..cfg.clone()
            };
            Ok(AblationRow {
                label: label.to_string(),
                mim_context: mim,
                kg,
                result: base_to_new(features, &c, eval)?,
            })
        })
        .collect()
}
