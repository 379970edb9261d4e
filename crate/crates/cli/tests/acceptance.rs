//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when a criterion fails for any reason other than a recorded
//! contradiction in its own statement.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use promim::data::{generate_dataset, make_split, SuiteSpec};
use promim::encoders::{DualEncoder, EncoderConfig};
use promim::evaluation::{
    ablation, ablation_rows, harmonic_mean, read_results_csv, write_results_csv, AblationRow,
    Benchmark, EvalConfig,
};
use promim::features::FeatureCache;
use promim::masking::masked_count;
use promim::prompting::Method;
use promim::training::{pretrain, tune_with_features, PretrainConfig, TuneConfig};
use promim_testkit::grad::{run_group, INSTANCES, TOL};
use promim_testkit::laws::{
    adjacency, compute_law, count_law_violations, equivalence_ladder, expected_tune_tokens,
    objective_identities, random_marginals, GRID,
};

/// Criterion tolerances.
const GRADIENT_BUDGET_SECS: f64 = 60.0;
const HM_TOL: f64 = 0.01;
const MARGINAL_TOL: f64 = 0.02;
const MARGINAL_DRAWS: u64 = 10_000;
const ADJACENCY_SEEDS: u64 = 1_000;
const COUNT_SEEDS: u64 = 1_000;
const OBJECTIVE_INSTANCES: u64 = 200;
const DIRECTIONAL_BUDGET_SECS: f64 = 15.0 * 60.0;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
    /// Why the criterion cannot pass as stated, when that is the only reason it fails.
    unattainable: Option<String>,
}

impl Outcome {
    fn new(name: &'static str, pass: bool, detail: String) -> Self {
        Self {
            name,
            pass,
            detail,
            unattainable: None,
        }
    }
}

type Res<T> = Result<T, Box<dyn std::error::Error>>;

fn gradients() -> Outcome {
    let t = Instant::now();
    let results = run_group(None);
    let secs = t.elapsed().as_secs_f64();
    let (worst_name, worst) = results
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap_or_default();
    let failing: Vec<&String> = results
        .iter()
        .filter(|r| r.1 >= TOL)
        .map(|r| &r.0)
        .collect();
    Outcome::new(
        "gradient conformance",
        failing.is_empty() && secs < GRADIENT_BUDGET_SECS && INSTANCES >= 20,
        format!(
            "{} cases x {INSTANCES} instances, worst rel. error {worst:.2e} ({worst_name}), \
             {} over {TOL:e}, {secs:.1}s of {GRADIENT_BUDGET_SECS}s",
            results.len(),
            failing.len()
        ),
    )
}

fn harmonic() -> Res<Outcome> {
    let pairs = [((82.69, 63.22), 71.66), ((80.64, 73.96), 77.16)];
    let mut detail = Vec::new();
    let mut pass = true;
    for ((b, n), want) in pairs {
        let h = harmonic_mean(b, n)?;
        pass &= (h - want).abs() <= HM_TOL;
        detail.push(format!("({b}, {n}) -> {h:.4} (want {want})"));
    }
    Ok(Outcome::new("harmonic mean", pass, detail.join("; ")))
}

fn masking() -> Res<Outcome> {
    let count_bad = count_law_violations(COUNT_SEEDS)?;
    let marginals = random_marginals(MARGINAL_DRAWS)?;
    let adj = adjacency(ADJACENCY_SEEDS)?;

    let mut marginal_fail = Vec::new();
    let mut marginal_forced = true;
    let mut parts = Vec::new();
    for m in &marginals {
        let dev = m.max_deviation(m.ratio);
        parts.push(format!("r={} dev {dev:.4}", m.ratio));
        if dev > MARGINAL_TOL {
            marginal_fail.push(m.ratio);
            // Off only because the count law rounds down, and on target for the rounded rate.
            marginal_forced &= (m.attainable - m.ratio).abs() > MARGINAL_TOL
                && m.max_deviation(m.attainable) <= MARGINAL_TOL;
        }
    }
    let mut adj_fail = Vec::new();
    let mut adj_forced = true;
    for a in &adj {
        parts.push(format!(
            "r={} adjacency block {:.3} random {:.3}",
            a.ratio, a.block, a.random
        ));
        if a.block <= a.random {
            adj_fail.push(a.ratio);
            let c = masked_count(GRID * GRID, a.ratio);
            // 15 of 16 cells masked: both strategies sit at the maximum.
            adj_forced &= c == GRID * GRID - 1 && a.block == c as f64 && a.random == c as f64;
        }
    }
    let pass = count_bad.is_empty() && marginal_fail.is_empty() && adj_fail.is_empty();
    let detail = format!(
        "count law: {} violations over {} draws; marginal over {MARGINAL_DRAWS} draws: {}",
        count_bad.len(),
        COUNT_SEEDS * 10,
        parts.join(", ")
    );
    let mut out = Outcome::new("masking laws", pass, detail);
    if !pass && count_bad.is_empty() && marginal_forced && adj_forced {
        out.unattainable = Some(format!(
            "on a 16-cell grid floor(r*16) = 15 for r in {{0.95, 0.99}}: the marginal is then \
             15/16 = 0.9375 (not within {MARGINAL_TOL} of {:?}) and every 15-cell mask has \
             adjacency 15, so block cannot exceed random at {:?}",
            marginal_fail, adj_fail
        ));
    }
    Ok(out)
}

fn compute(encoder: &DualEncoder) -> Res<Outcome> {
    let ds = generate_dataset(&SuiteSpec::default().family(0))?;
    let features = FeatureCache::new(encoder, &ds)?;
    let ids: Vec<usize> = (0..ds.samples.len()).step_by(8).collect();
    let law = compute_law(&features, &ids)?;
    let full = law.counts[0];
    let half = law.counts[1];
    let quarter = law.counts[2];
    let split = make_split(&ds, 16, 0)?;
    let cfg = TuneConfig {
        epochs: 1,
        seeds: vec![0],
        ..TuneConfig::default()
    };
    let out = tune_with_features(&features, &split, &cfg, 0)?;
    let want = expected_tune_tokens(16, cfg.mask.ratio, split.train.len());
    let pass = law.violations.is_empty()
        && half.2 * 2 == full.2
        && quarter.2 * 4 == full.2
        && out.tokens_processed == want;
    Ok(Outcome::new(
        "visible-patch compute law",
        pass,
        format!(
            "{} encoder calls, {} with tokens != visible+1; patch tokens {} / {} / {} at \
             r = 0 / 0.5 / 0.75 (with summary token {} / {} / {}); tuning run {} tokens, \
             expected {want}",
            law.calls,
            law.violations.len(),
            full.2,
            half.2,
            quarter.2,
            full.1,
            half.1,
            quarter.1,
            out.tokens_processed
        ),
    ))
}

fn ladder(encoder: &DualEncoder) -> Res<Outcome> {
    let ds = generate_dataset(&SuiteSpec::default().family(0))?;
    let features = FeatureCache::new(encoder, &ds)?;
    let split = make_split(&ds, 16, 0)?;
    let base = TuneConfig {
        seeds: vec![0],
        ..TuneConfig::default()
    };
    let checks = equivalence_ladder(&features, &split, &base, &EvalConfig::default(), 0)?;
    Ok(Outcome::new(
        "equivalence ladder",
        checks.iter().all(|c| c.pass),
        checks
            .iter()
            .map(|c| {
                format!(
                    "{} [{}]: {}",
                    c.name,
                    if c.pass { "ok" } else { "broken" },
                    c.detail
                )
            })
            .collect::<Vec<_>>()
            .join("; "),
    ))
}

fn objectives() -> Res<Outcome> {
    let checks = objective_identities(OBJECTIVE_INSTANCES)?;
    Ok(Outcome::new(
        "kg and total loss identities",
        checks.iter().all(|c| c.pass),
        checks
            .iter()
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect::<Vec<_>>()
            .join("; "),
    ))
}

fn cell<'a>(rows: &'a [AblationRow], label: &str) -> &'a AblationRow {
    rows.iter()
        .find(|r| r.label == label)
        .expect("ablation cell")
}

fn directional(rows: &[AblationRow], secs: f64) -> Outcome {
    let c = &cell(rows, "cocoop").result.mean;
    let p = &cell(rows, "promim").result.mean;
    Outcome::new(
        "desk-scale directional experiment",
        p.new_acc >= c.new_acc && p.h >= c.h && secs < DIRECTIONAL_BUDGET_SECS,
        format!(
            "promim base/new/H {:.2}/{:.2}/{:.2} vs cocoop {:.2}/{:.2}/{:.2}; \
             {secs:.0}s including pretraining and all four grid cells",
            p.base_acc, p.new_acc, p.h, c.base_acc, c.new_acc, c.h
        ),
    )
}

fn table5(rows: &[AblationRow]) -> Res<Outcome> {
    let mut buf = Vec::new();
    write_results_csv(&mut buf, &ablation_rows(rows))?;
    let parsed = read_results_csv(buf.as_slice())?;
    let values: Vec<&str> = parsed.iter().map(|r| r.value.as_str()).collect();
    let shape = values
        == [
            "mim_off_kg_off",
            "mim_off_kg_on",
            "mim_on_kg_off",
            "mim_on_kg_on",
        ];
    let off = &parsed[0];
    let on = &parsed[parsed.len() - 1];
    Ok(Outcome::new(
        "ablation grid",
        shape && on.new >= off.new,
        format!(
            "{} rows ({}); New (on, on) {} vs (off, off) {}",
            parsed.len(),
            parsed
                .iter()
                .map(|r| format!("{}={}", r.value, r.method))
                .collect::<Vec<_>>()
                .join(", "),
            on.new,
            off.new
        ),
    ))
}

const SMALL: &str = r#"{
  "pretrain": {"steps": 40, "batch_size": 8, "corpus": {"families": 2, "samples_per_class": 8}},
  "data": {"families": 2, "samples_per_class": 12},
  "tune": {"epochs": 1, "k": 4, "seeds": [0, 1]},
  "eval": {"target_families": [0, 1], "max_eval_per_class": 6, "shifts": ["noise:0.2", "invert"]}
}"#;

fn cli(dir: &Path, args: &[&str]) -> Res<String> {
    let out = Command::new(env!("CARGO_BIN_EXE_promim"))
        .current_dir(dir)
        .env("PROMIM_OUTPUT_ROOT", dir.join("runs"))
        .args(args)
        .output()?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)).into());
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn run_dirs(root: &Path) -> Res<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(root)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    v.retain(|p| p.join("manifest.json").is_file());
    v.sort();
    Ok(v)
}

fn determinism() -> Res<Outcome> {
    let tmp = tempfile::tempdir()?;
    let dir = tmp.path();
    fs::write(dir.join("small.json"), SMALL)?;
    let runs: [&[&str]; 6] = [
        &["pretrain", "-c", "small.json"],
        &["tune", "-c", "small.json"],
        &["eval", "-c", "small.json", "--protocol", "cross-dataset"],
        &["eval", "-c", "small.json", "--protocol", "domain-shift"],
        &[
            "sweep",
            "-c",
            "small.json",
            "--axis",
            "mask_ratio",
            "--values",
            "0.5,0.75",
        ],
        &["sweep", "-c", "small.json", "--axis", "ablation"],
    ];
    for args in runs {
        cli(dir, args)?;
    }
    let originals = run_dirs(&dir.join("runs"))?;
    let mut identical = 0;
    let mut names = Vec::new();
    for run in &originals {
        let manifest = run.join("manifest.json");
        let command = serde_json::from_slice::<serde_json::Value>(&fs::read(&manifest)?)?
            ["command"]
            .as_str()
            .unwrap_or_default()
            .to_string();
        cli(
            dir,
            &[&command, "--replay", manifest.to_str().unwrap_or_default()],
        )?;
        let replay = run.with_file_name(format!(
            "{}-replay",
            run.file_name().unwrap_or_default().to_string_lossy()
        ));
        if fs::read(run.join("metrics.csv"))? == fs::read(replay.join("metrics.csv"))? {
            identical += 1;
        }
        names.push(command);
    }
    Ok(Outcome::new(
        "manifest replay",
        identical == originals.len() && originals.len() == runs.len(),
        format!(
            "{identical}/{} replays byte-identical ({})",
            originals.len(),
            names.join(", ")
        ),
    ))
}

fn main() {
    let started = Instant::now();
    let mut outcomes: Vec<Outcome> = Vec::new();
    let mut push = |r: Res<Outcome>, name: &'static str| match r {
        Ok(o) => outcomes.push(o),
        Err(e) => outcomes.push(Outcome::new(name, false, format!("error: {e}"))),
    };

    push(Ok(gradients()), "gradient conformance");
    push(harmonic(), "harmonic mean");
    push(masking(), "masking laws");

    let t = Instant::now();
    let (encoder, _) = pretrain(&EncoderConfig::default(), &PretrainConfig::default())
        .expect("default encoder pretraining");
    let pretrain_secs = t.elapsed().as_secs_f64();

    push(compute(&encoder), "visible-patch compute law");
    push(ladder(&encoder), "equivalence ladder");
    push(objectives(), "kg and total loss identities");

    let t = Instant::now();
    let grid = Benchmark::generate(&SuiteSpec::default()).and_then(|b| {
        let features = b.features(&encoder)?;
        let rows = ablation(
            &features,
            &TuneConfig::for_method(Method::Promim),
            &EvalConfig::default(),
        )?;
        Ok(rows)
    });
    let grid_secs = t.elapsed().as_secs_f64();
    match grid {
        Ok(rows) => {
            push(
                Ok(directional(&rows, pretrain_secs + grid_secs)),
                "desk-scale directional experiment",
            );
            push(table5(&rows), "ablation grid");
        }
        Err(e) => {
            push(
                Err(e.to_string().into()),
                "desk-scale directional experiment",
            );
            push(Err(e.to_string().into()), "ablation grid");
        }
    }
    push(determinism(), "manifest replay");

    let mut hard_failures = 0;
    for o in &outcomes {
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("{status} {}: {}", o.name, o.detail);
        if !o.pass {
            match &o.unattainable {
                Some(why) => println!("     unattainable as stated: {why}"),
                None => hard_failures += 1,
            }
        }
    }
    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!(
        "{passed}/{} criteria passed, {} unattainable as stated, {hard_failures} failed; {:.0}s",
        outcomes.len(),
        outcomes.len() - passed - hard_failures,
        started.elapsed().as_secs_f64()
    );
    if hard_failures > 0 {
        std::process::exit(1);
    }
}
