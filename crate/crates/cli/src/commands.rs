use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use promim::config::ABLATION_AXIS;
use promim::data::{generate_dataset, make_split, Dataset};
use promim::encoders::DualEncoder;
use promim::evaluation::harmonic_mean;
use promim::evaluation::{
    ablation, ablation_rows, base_to_new_rows, base_to_new_with, cross_dataset, domain_shift,
    read_accuracy_csv, read_results_csv, score_split, svg_bar_chart, svg_line_chart,
    sweep as sweep_grid, sweep_rows, write_accuracy_csv, write_results_csv, zero_shot, AccuracyRow,
    BaseToNew, Benchmark, FamilyRecord, MetricRecord, ResultRow, SweepAxis, ACCURACY_HEADER,
};
use promim::prompting::PromptLearner;
use promim::training::{
    cache_path, pretrain as pretrain_encoder, write_log_csv, RunManifest, TuneConfig, TuneOutcome,
};
use serde::{Deserialize, Serialize};

use crate::run::{check_replay, Invocation, RunDir};
use crate::Common;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Hand-crafted prompts on every family's base/new split.
    ZeroShot,
    /// Tune on `eval.source_family`, score `eval.target_families`.
    CrossDataset,
    /// Tune on `eval.source_family`, score it under `eval.shifts`.
    DomainShift,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Evaluation protocol; ignored when --checkpoint is given.
    #[arg(long, value_enum, default_value = "zero-shot")]
    pub protocol: Protocol,

    /// Score a saved prompt checkpoint on one family's base/new split.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,

    /// Family for --checkpoint; `eval.source_family` by default.
    #[arg(long, requires = "checkpoint")]
    pub family: Option<u64>,
}

/// Sweep flags; they are shorthands for config overrides.
#[derive(Args, Clone, Debug)]
pub struct SweepArgs {
    /// Worker threads for independent (family, seed) cells. Results do not depend on it.
    #[arg(long, value_name = "N")]
    pub parallel: Option<usize>,

    /// Sweep axis: mask_ratio, lambda, k, strategy or ablation.
    #[arg(long)]
    pub axis: Option<String>,

    /// Comma-separated grid values.
    #[arg(long)]
    pub values: Option<String>,
}

fn results_csv(rows: &[ResultRow]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_results_csv(&mut buf, rows)?;
    Ok(buf)
}

fn accuracy_csv(rows: &[AccuracyRow]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_accuracy_csv(&mut buf, rows)?;
    Ok(buf)
}

fn print_record(rec: &MetricRecord, verbose: bool) {
    println!(
        "{:<14} base {:>6.2}  new {:>6.2}  H {:>6.2}",
        rec.method, rec.base_acc, rec.new_acc, rec.h
    );
    if verbose {
        println!("{:<14} H over family means {:.2}", "", rec.h_family_mean);
        for f in &rec.per_family {
            println!(
                "{:<14} family {} base {:>6.2}  new {:>6.2}  H {:>6.2}",
                "", f.family, f.base_acc, f.new_acc, f.h
            );
        }
    }
}

fn base_new_chart(title: &str, rec: &MetricRecord) -> String {
    let mut cats: Vec<String> = rec
        .per_family
        .iter()
        .map(|f| format!("family {}", f.family))
        .collect();
    cats.push("all".into());
    let col = |get: fn(&FamilyRecord) -> f64, all: f64| {
        let mut v: Vec<f64> = rec.per_family.iter().map(get).collect();
        v.push(all);
        v
    };
    svg_bar_chart(
        title,
        &cats,
        &[
            ("base".into(), col(|f| f.base_acc, rec.base_acc)),
            ("new".into(), col(|f| f.new_acc, rec.new_acc)),
            ("H".into(), col(|f| f.h, rec.h)),
        ],
    )
}

fn finish<A: Serialize + serde::de::DeserializeOwned + Clone>(
    inv: &Invocation<A>,
    dir: RunDir,
    manifest: RunManifest,
) -> Result<()> {
    let path = dir.commit(manifest, inv.elapsed_secs())?;
    println!("run {} written to {}", inv.run_id, path.display());
    if let Some(original) = &inv.replay_of {
        check_replay(original, &path)?;
    }
    Ok(())
}

fn fill_common(m: &mut RunManifest, encoder: &DualEncoder, datasets: &[Dataset]) {
    m.encoder_checksum = encoder.checksum();
    m.datasets = datasets.iter().map(Dataset::manifest).collect();
}

fn set_tokens(m: &mut RunManifest, records: &[&MetricRecord]) {
    m.tokens_processed = records.iter().map(|r| r.tokens_processed).sum();
    m.patch_tokens = records.iter().map(|r| r.patch_tokens).sum();
}

pub fn pretrain(common: &Common) -> Result<()> {
    let inv = Invocation::resolve("pretrain", common, &())?;
    let cfg = &inv.config;
    let dir = RunDir::create(&inv.root(), &inv.run_id)?;
    let (encoder, report) = pretrain_encoder(&cfg.encoder, &cfg.pretrain)?;
    let cache = cache_path(&inv.cache_dir(), &cfg.encoder, &cfg.pretrain)?;
    fs::create_dir_all(inv.cache_dir())?;
    encoder.save(&cache)?;
    encoder.save(&dir.path("checkpoints/encoder.json"))?;

    let mut log = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        log.push_str(&format!("{i},{l:.12}\n"));
    }
    dir.write("logs/pretrain_loss.csv", log)?;
    let every = (report.losses.len() / 12).max(1);
    let (labels, points): (Vec<String>, Vec<f64>) = report
        .losses
        .iter()
        .enumerate()
        .filter(|(i, _)| i % every == 0)
        .map(|(i, l)| (i.to_string(), *l))
        .unzip();
    dir.write(
        "plots/pretrain_loss.svg",
        svg_line_chart("pretraining loss", &labels, &[("loss".into(), points)]),
    )?;

    let bench = Benchmark::generate(&cfg.data)?;
    let features = bench.features(&encoder)?;
    let rec = zero_shot(&features, cfg.tune.k, &cfg.eval)?;
    print_record(&rec, inv.verbose);
    let b2n = BaseToNew {
        per_seed: Vec::new(),
        mean: rec.clone(),
    };
    dir.write(
        "metrics.csv",
        results_csv(&base_to_new_rows(&b2n, "zero_shot", ""))?,
    )?;
    dir.write(
        "plots/zero_shot.svg",
        base_new_chart("zero-shot prompts", &rec),
    )?;

    let mut m = inv.manifest()?;
    m.optimizer = format!(
        "adam: beta1 0.9, beta2 0.999, eps 1e-8, lr {}, {} steps",
        cfg.pretrain.lr, cfg.pretrain.steps
    );
    fill_common(&mut m, &encoder, &bench.datasets);
    m.records = vec![rec];
    m.summary = serde_json::json!({
        "final_loss": report.losses.last(),
        "cache": cache.display().to_string(),
    });
    finish(&inv, dir, m)
}

pub fn tune(common: &Common) -> Result<()> {
    let inv = Invocation::resolve("tune", common, &())?;
    let cfg = &inv.config;
    let dir = RunDir::create(&inv.root(), &inv.run_id)?;
    let encoder = inv.encoder()?;
    let checksum = encoder.checksum();
    let bench = Benchmark::generate(&cfg.data)?;
    let features = bench.features(&encoder)?;
    let hook = |family: u64,
                seed: u64,
                _: &promim::data::SplitPlan,
                out: &TuneOutcome|
     -> promim::Result<()> {
        let stem = format!("family{family}-seed{seed}");
        out.learner
            .save(&dir.path(&format!("checkpoints/{stem}.json")), &checksum)?;
        write_log_csv(
            fs::File::create(dir.path(&format!("logs/{stem}.csv")))?,
            &out.log,
        )
    };
    let result = base_to_new_with(&features, &cfg.tune, &cfg.eval, &hook)?;
    for r in &result.per_seed {
        if inv.verbose {
            print!("seed {:<3} ", r.seed.unwrap_or_default());
            print_record(r, false);
        }
    }
    print_record(&result.mean, inv.verbose);
    dir.write(
        "metrics.csv",
        results_csv(&base_to_new_rows(&result, "none", ""))?,
    )?;
    dir.write(
        "plots/base_to_new.svg",
        base_new_chart(&format!("{} base-to-new", result.mean.method), &result.mean),
    )?;

    let mut m = inv.manifest()?;
    fill_common(&mut m, &encoder, &bench.datasets);
    set_tokens(&mut m, &result.per_seed.iter().collect::<Vec<_>>());
    m.records = result
        .per_seed
        .iter()
        .cloned()
        .chain([result.mean.clone()])
        .collect();
    finish(&inv, dir, m)
}

fn eval_checkpoint(inv: &Invocation<EvalArgs>, path: &Path) -> Result<()> {
    let cfg = &inv.config;
    // Load before anything else so a bad checkpoint leaves no trace.
    let (learner, recorded) = PromptLearner::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let family = inv.args.family.unwrap_or(cfg.eval.source_family);
    if family >= cfg.data.families as u64 {
        return Err(promim::Error::Config(format!(
            "family {family} is outside the {}-family suite",
            cfg.data.families
        ))
        .into());
    }
    let encoder = inv.encoder()?;
    if encoder.checksum() != recorded {
        return Err(promim::Error::Checkpoint(format!(
            "{} was tuned against encoder {} but the configured encoder is {}",
            path.display(),
            &recorded[..recorded.len().min(12)],
            &encoder.checksum()[..12]
        ))
        .into());
    }
    let dir = RunDir::create(&inv.root(), &inv.run_id)?;
    let ds = generate_dataset(&cfg.data.family(family))?;
    let features = promim::features::FeatureCache::new(&encoder, &ds)?;
    let split = make_split(&ds, cfg.tune.k, cfg.eval.split_seed)?;
    let tcfg = TuneConfig {
        method: learner.method,
        ..cfg.tune.clone()
    }
    .resolve()?;
    let outcome = TuneOutcome {
        learner,
        log: Vec::new(),
        tokens_processed: 0,
        patch_tokens: 0,
        trained_ids: Default::default(),
    };
    let (base, new) = score_split(&features, &split, &outcome, &tcfg, &cfg.eval)?;
    let rec = MetricRecord::aggregate(
        tcfg.method.as_str(),
        None,
        vec![FamilyRecord {
            family,
            seed: None,
            base_acc: base,
            new_acc: new,
            h: harmonic_mean(base, new)?,
            tokens_processed: 0,
            patch_tokens: 0,
        }],
    )?;
    print_record(&rec, inv.verbose);
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let b2n = BaseToNew {
        per_seed: Vec::new(),
        mean: rec.clone(),
    };
    dir.write(
        "metrics.csv",
        results_csv(&base_to_new_rows(&b2n, "checkpoint", &label))?,
    )?;
    dir.write("plots/checkpoint.svg", base_new_chart(&label, &rec))?;
    let mut m = inv.manifest()?;
    fill_common(&mut m, &encoder, std::slice::from_ref(&ds));
    m.records = vec![rec];
    finish(inv, dir, m)
}

fn accuracy_chart(title: &str, rows: &[AccuracyRow]) -> String {
    let cats: Vec<String> = rows.iter().map(|r| r.target.clone()).collect();
    svg_bar_chart(
        title,
        &cats,
        &[("accuracy".into(), rows.iter().map(|r| r.accuracy).collect())],
    )
}

pub fn eval(common: &Common, args: &EvalArgs) -> Result<()> {
    let inv = Invocation::resolve("eval", common, args)?;
    if let Some(path) = inv.args.checkpoint.clone() {
        return eval_checkpoint(&inv, &path);
    }
    let cfg = &inv.config;
    let dir = RunDir::create(&inv.root(), &inv.run_id)?;
    let encoder = inv.encoder()?;
    let bench = Benchmark::generate(&cfg.data)?;
    let features = bench.features(&encoder)?;
    let mut m = inv.manifest()?;
    fill_common(&mut m, &encoder, &bench.datasets);
    match inv.args.protocol {
        Protocol::ZeroShot => {
            let rec = zero_shot(&features, cfg.tune.k, &cfg.eval)?;
            print_record(&rec, inv.verbose);
            let b2n = BaseToNew {
                per_seed: Vec::new(),
                mean: rec.clone(),
            };
            dir.write(
                "metrics.csv",
                results_csv(&base_to_new_rows(&b2n, "zero_shot", ""))?,
            )?;
            dir.write(
                "plots/zero_shot.svg",
                base_new_chart("zero-shot prompts", &rec),
            )?;
            m.records = vec![rec];
        }
        Protocol::CrossDataset => {
            let source = cfg.eval.source_family;
            let report = cross_dataset(
                &features,
                source,
                &cfg.eval.target_families,
                &cfg.tune,
                &cfg.eval,
            )?;
            let row = |target: String, accuracy: f64| AccuracyRow {
                method: report.method.clone(),
                protocol: "cross_dataset".into(),
                target,
                accuracy,
            };
            let mut rows = vec![row(format!("source:{source}"), report.source_acc)];
            rows.extend(
                report
                    .targets
                    .iter()
                    .map(|&(t, a)| row(format!("family:{t}"), a)),
            );
            rows.push(row("average".into(), report.average));
            for r in &rows {
                println!("{:<14} {:<12} {:>6.2}", r.method, r.target, r.accuracy);
            }
            dir.write("metrics.csv", accuracy_csv(&rows)?)?;
            dir.write(
                "plots/cross_dataset.svg",
                accuracy_chart("cross-dataset transfer", &rows),
            )?;
            m.summary = serde_json::to_value(&report)?;
        }
        Protocol::DomainShift => {
            let source = features
                .iter()
                .find(|f| f.dataset.spec.family_id == cfg.eval.source_family)
                .ok_or_else(|| {
                    promim::Error::Config(format!(
                        "source family {} is not in the suite",
                        cfg.eval.source_family
                    ))
                })?;
            let report = domain_shift(source, &cfg.eval.parsed_shifts()?, &cfg.tune, &cfg.eval)?;
            let row = |target: String, accuracy: f64| AccuracyRow {
                method: report.method.clone(),
                protocol: "domain_shift".into(),
                target,
                accuracy,
            };
            let mut rows = vec![row("source".into(), report.source_acc)];
            rows.extend(report.shifts.iter().map(|(s, a)| row(s.clone(), *a)));
            rows.push(row("average".into(), report.average));
            for r in &rows {
                println!("{:<14} {:<16} {:>6.2}", r.method, r.target, r.accuracy);
            }
            dir.write("metrics.csv", accuracy_csv(&rows)?)?;
            dir.write(
                "plots/domain_shift.svg",
                accuracy_chart("domain shift", &rows),
            )?;
            m.summary = serde_json::to_value(&report)?;
        }
    }
    finish(&inv, dir, m)
}

fn metric_series(rows: &[ResultRow]) -> Vec<(String, Vec<f64>)> {
    vec![
        ("base".into(), rows.iter().map(|r| r.base).collect()),
        ("new".into(), rows.iter().map(|r| r.new).collect()),
        ("H".into(), rows.iter().map(|r| r.h).collect()),
    ]
}

pub fn sweep(common: &Common, args: &SweepArgs) -> Result<()> {
    let mut common = common.clone();
    if common.replay.is_none() {
        if let Some(a) = &args.axis {
            common.overrides.push(format!("sweep.axis={a}"));
        }
        if let Some(v) = &args.values {
            common.overrides.push(format!("sweep.values={v}"));
        }
        if let Some(n) = args.parallel {
            common.overrides.push(format!("eval.parallel={n}"));
        }
    }
    let inv = Invocation::resolve("sweep", &common, &())?;
    let cfg = &inv.config;
    let dir = RunDir::create(&inv.root(), &inv.run_id)?;
    let encoder = inv.encoder()?;
    let bench = Benchmark::generate(&cfg.data)?;
    let features = bench.features(&encoder)?;
    let mut m = inv.manifest()?;
    fill_common(&mut m, &encoder, &bench.datasets);

    let (rows, means) = if cfg.sweep.axis == ABLATION_AXIS {
        let cells = ablation(&features, &cfg.tune, &cfg.eval)?;
        let rows = ablation_rows(&cells);
        let cats: Vec<String> = cells.iter().map(|c| c.label.clone()).collect();
        dir.write(
            "plots/ablation.svg",
            svg_bar_chart("conditioning x kg ablation", &cats, &metric_series(&rows)),
        )?;
        (
            rows,
            cells.into_iter().map(|c| c.result).collect::<Vec<_>>(),
        )
    } else {
        let axis: SweepAxis = cfg.sweep.axis.parse()?;
        let grid = sweep_grid(&features, axis, &cfg.sweep.values, &cfg.tune, &cfg.eval)?;
        let rows = sweep_rows(&grid);
        dir.write(
            "plots/sweep.svg",
            svg_line_chart(
                &format!("sweep over {axis}"),
                &cfg.sweep.values,
                &metric_series(&rows),
            ),
        )?;
        (rows, grid.into_iter().map(|g| g.result).collect())
    };
    for (r, b) in rows.iter().zip(&means) {
        print!("{:<16} ", r.value);
        print_record(&b.mean, inv.verbose);
    }
    dir.write("metrics.csv", results_csv(&rows)?)?;
    let records: Vec<&MetricRecord> = means.iter().flat_map(|b| b.per_seed.iter()).collect();
    set_tokens(&mut m, &records);
    m.records = means.iter().map(|b| b.mean.clone()).collect();
    m.summary = serde_json::to_value(&rows)?;
    finish(&inv, dir, m)
}

/// One long-format line of the cross-run summary.
#[derive(Serialize)]
struct SummaryRow {
    run_id: String,
    command: String,
    method: String,
    axis: String,
    value: String,
    metric: String,
    score: String,
}

fn summarize_run(dir: &Path, m: &RunManifest, out: &mut Vec<SummaryRow>) -> Result<()> {
    let path = dir.join("metrics.csv");
    let text = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let accuracy_header = ACCURACY_HEADER.join(",");
    let row = |method: &str, axis: &str, value: &str, metric: &str, score: f64| SummaryRow {
        run_id: m.run_id.clone(),
        command: m.command.clone(),
        method: method.to_string(),
        axis: axis.to_string(),
        value: value.to_string(),
        metric: metric.to_string(),
        score: format!("{score:.4}"),
    };
    if text.starts_with(accuracy_header.as_bytes()) {
        for r in read_accuracy_csv(text.as_slice())? {
            out.push(row(
                &r.method,
                &r.protocol,
                &r.target,
                "accuracy",
                r.accuracy,
            ));
        }
    } else {
        for r in read_results_csv(text.as_slice())? {
            if r.family != "all" || r.seed != "mean" {
                continue;
            }
            for (metric, score) in [("base", r.base), ("new", r.new), ("h", r.h)] {
                out.push(row(&r.method, &r.axis, &r.value, metric, score));
            }
        }
    }
    Ok(())
}

pub fn report(root: &Path, out: Option<&Path>) -> Result<()> {
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| root.join("report"));
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("reading output root {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .filter(|p| {
            !p.file_name()
                .is_some_and(|n| n.to_string_lossy().starts_with('.'))
        })
        .collect();
    dirs.sort();
    let mut rows = Vec::new();
    for d in &dirs {
        let m = RunManifest::load(&d.join("manifest.json"))?;
        summarize_run(d, &m, &mut rows)?;
    }
    fs::create_dir_all(&out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join("summary.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "run_id", "command", "method", "axis", "value", "metric", "score",
        ])?;
    }
    w.flush()?;

    let h: Vec<&SummaryRow> = rows.iter().filter(|r| r.metric == "h").collect();
    let cats: Vec<String> = h
        .iter()
        .map(|r| {
            if r.value.is_empty() {
                r.method.clone()
            } else {
                format!("{} {}", r.method, r.value)
            }
        })
        .collect();
    let values: Vec<f64> = h.iter().map(|r| r.score.parse().unwrap_or(0.0)).collect();
    fs::write(
        out_dir.join("summary.svg"),
        svg_bar_chart("H across runs", &cats, &[("H".into(), values)]),
    )?;
    println!("{} runs summarized into {}", dirs.len(), out_dir.display());
    Ok(())
}
