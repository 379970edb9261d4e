use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{
  "pretrain": {"steps": 20, "batch_size": 8, "corpus": {"families": 1, "samples_per_class": 8}},
  "data": {"families": 1, "samples_per_class": 12},
  "tune": {"epochs": 1, "k": 2, "seeds": [0]},
  "eval": {"target_families": [0], "max_eval_per_class": 4, "shifts": ["noise:0.2"]}
}"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("small.json"), SMALL).unwrap();
        Self { dir }
    }

    fn root(&self) -> PathBuf {
        self.dir.path().join("runs")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_promim"))
            .current_dir(self.dir.path())
            .env("PROMIM_OUTPUT_ROOT", self.root())
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    /// Run directories, excluding the encoder cache and reports.
    fn runs(&self) -> Vec<PathBuf> {
        let Ok(rd) = fs::read_dir(self.root()) else {
            return Vec::new();
        };
        let mut v: Vec<PathBuf> = rd
            .map(|e| e.unwrap().path())
            .filter(|p| p.join("manifest.json").exists())
            .collect();
        v.sort();
        v
    }
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn tune_records_default_protocol_and_layout() {
    let sb = Sandbox::new();
    sb.ok(&["tune", "-c", "small.json"]);
    let runs = sb.runs();
    assert_eq!(runs.len(), 1);
    let run = &runs[0];
    let m = manifest(run);
    let tune = &m["config"]["tune"];
    assert_eq!(tune["method"], "promim");
    assert_eq!(tune["lr"], 0.02);
    assert_eq!(tune["n_ctx"], 4);
    assert_eq!(tune["lambda"], 2.0);
    assert_eq!(tune["mask"]["ratio"], 0.75);
    assert_eq!(m["encoder_checksum"].as_str().unwrap().len(), 64);
    for f in [
        "metrics.csv",
        "checkpoints/family0-seed0.json",
        "logs/family0-seed0.csv",
        "plots/base_to_new.svg",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
        assert!(m["outputs"].as_array().unwrap().iter().any(|o| o == f));
    }
    let log = fs::read_to_string(run.join("logs/family0-seed0.csv")).unwrap();
    assert!(log.lines().next().unwrap().starts_with("epoch,step,"));
}

#[test]
fn overrides_beat_file_and_are_recorded() {
    let sb = Sandbox::new();
    sb.ok(&[
        "tune",
        "-c",
        "small.json",
        "--set",
        "tune.lambda=4",
        "--set",
        "tune.method=kgcoop",
    ]);
    let m = manifest(&sb.runs()[0]);
    assert_eq!(m["config"]["tune"]["lambda"], 4.0);
    assert_eq!(m["config"]["tune"]["method"], "kgcoop");
    assert_eq!(m["config"]["tune"]["k"], 2);
    assert_eq!(m["config"]["tune"]["mask"]["ratio"], 0.0);
    assert_eq!(
        m["config"]["output"]["root"],
        sb.root().display().to_string()
    );
}

#[test]
fn invalid_config_is_a_usage_error() {
    let sb = Sandbox::new();
    for args in [
        vec!["tune", "-c", "small.json", "--set", "tune.lamda=1"],
        vec!["tune", "-c", "small.json", "--set", "tune.lambda=-1"],
        vec!["sweep", "-c", "small.json", "--axis", "depth"],
        vec!["tune", "-c", "missing.json"],
        vec!["tune", "--no-such-flag"],
    ] {
        let out = sb.run(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
    assert!(sb.runs().is_empty());
}

#[test]
fn missing_checkpoint_fails_without_outputs() {
    let sb = Sandbox::new();
    let out = sb.run(&["eval", "-c", "small.json", "--checkpoint", "nowhere.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("[checkpoint]"), "{err}");
    assert!(!sb.root().exists() || fs::read_dir(sb.root()).unwrap().next().is_none());
}

#[test]
fn checkpoint_eval_reproduces_tuned_scores() {
    let sb = Sandbox::new();
    sb.ok(&["tune", "-c", "small.json"]);
    let tuned = sb.runs()[0].clone();
    let ckpt = tuned.join("checkpoints/family0-seed0.json");
    sb.ok(&[
        "eval",
        "-c",
        "small.json",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    let eval = sb.runs().into_iter().find(|p| p != &tuned).unwrap();
    let row = |dir: &Path, seed: &str| {
        fs::read_to_string(dir.join("metrics.csv"))
            .unwrap()
            .lines()
            .find(|l| l.starts_with("promim,0,") && l.contains(&format!(",{seed},")))
            .map(|l| l.split(',').skip(5).take(3).collect::<Vec<_>>().join(","))
            .unwrap()
    };
    assert_eq!(row(&tuned, "0"), row(&eval, "mean"));
}

#[test]
fn lambda_sweep_writes_one_row_per_value() {
    let sb = Sandbox::new();
    sb.ok(&[
        "sweep",
        "-c",
        "small.json",
        "--axis",
        "lambda",
        "--values",
        "0,1,2,4,6,8,10",
    ]);
    let run = &sb.runs()[0];
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 8);
    let values: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(3).unwrap())
        .collect();
    assert_eq!(values, ["0", "1", "2", "4", "6", "8", "10"]);
    assert!(run.join("plots/sweep.svg").is_file());
}

#[test]
fn ablation_sweep_has_four_cells() {
    let sb = Sandbox::new();
    sb.ok(&["sweep", "-c", "small.json", "--axis", "ablation"]);
    let csv = fs::read_to_string(sb.runs()[0].join("metrics.csv")).unwrap();
    let cells: Vec<String> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').take(4).collect::<Vec<_>>().join(","))
        .collect();
    assert_eq!(
        cells,
        [
            "cocoop,all,ablation,mim_off_kg_off",
            "kgcoop,all,ablation,mim_off_kg_on",
            "promim_no_kg,all,ablation,mim_on_kg_off",
            "promim,all,ablation,mim_on_kg_on",
        ]
    );
}

#[test]
fn parallel_sweep_matches_serial() {
    let sb = Sandbox::new();
    let cfg = [
        "sweep",
        "-c",
        "small.json",
        "--axis",
        "mask_ratio",
        "--values",
        "0.25,0.75",
        "--set",
        "tune.seeds=0,1",
    ];
    sb.ok(&cfg);
    let serial = fs::read(sb.runs()[0].join("metrics.csv")).unwrap();
    let mut par = cfg.to_vec();
    par.extend(["--parallel", "3"]);
    sb.ok(&par);
    let runs = sb.runs();
    assert_eq!(runs.len(), 2);
    for r in runs {
        assert_eq!(fs::read(r.join("metrics.csv")).unwrap(), serial);
    }
}

#[test]
fn replay_is_byte_identical() {
    let sb = Sandbox::new();
    sb.ok(&["eval", "-c", "small.json", "--protocol", "domain-shift"]);
    let original = sb.runs()[0].clone();
    let out = sb.ok(&[
        "eval",
        "--replay",
        original.join("manifest.json").to_str().unwrap(),
    ]);
    assert!(out.contains("byte-identical"), "{out}");
    let replayed = original.with_file_name(format!(
        "{}-replay",
        original.file_name().unwrap().to_string_lossy()
    ));
    assert_eq!(
        fs::read(original.join("metrics.csv")).unwrap(),
        fs::read(replayed.join("metrics.csv")).unwrap()
    );
    assert_eq!(manifest(&replayed)["args"]["protocol"], "domain-shift");

    let wrong = sb.run(&[
        "tune",
        "--replay",
        original.join("manifest.json").to_str().unwrap(),
    ]);
    assert_eq!(wrong.status.code(), Some(2));
}

#[test]
fn report_is_idempotent() {
    let sb = Sandbox::new();
    sb.ok(&["eval", "-c", "small.json"]);
    sb.ok(&["eval", "-c", "small.json", "--protocol", "cross-dataset"]);
    sb.ok(&["report"]);
    let out = sb.root().join("report");
    let csv = fs::read(out.join("summary.csv")).unwrap();
    let svg = fs::read(out.join("summary.svg")).unwrap();
    sb.ok(&["report"]);
    assert_eq!(fs::read(out.join("summary.csv")).unwrap(), csv);
    assert_eq!(fs::read(out.join("summary.svg")).unwrap(), svg);
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("run_id,command,method,axis,value,metric,score\n"));
    assert!(text.contains(",handcrafted,zero_shot,,h,"));
    assert!(text.contains(",cross_dataset,average,accuracy,"));
}
