//! Invocation resolution and the staged run directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use promim::config::Config;
use promim::encoders::DualEncoder;
use promim::training::{load_or_pretrain, RunManifest};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::{Common, OUTPUT_ROOT_ENV};

/// A resolved command: config, command-specific args and run id.
pub struct Invocation<A> {
    pub command: &'static str,
    pub config: Config,
    pub args: A,
    pub run_id: String,
    /// Run directory of the manifest being replayed.
    pub replay_of: Option<PathBuf>,
    pub verbose: bool,
    started: Instant,
}

fn env_root() -> Option<String> {
    std::env::var(OUTPUT_ROOT_ENV)
        .ok()
        .filter(|s| !s.is_empty())
}

fn root_override(root: &str) -> String {
    // Quoted so that numeric-looking paths stay strings.
    format!("output.root={}", Value::String(root.to_string()))
}

impl<A: Serialize + DeserializeOwned + Clone> Invocation<A> {
    /// Precedence: defaults, config file, `PROMIM_OUTPUT_ROOT`, `--set`.
    /// With `--replay` the manifest's config and args replace the file and
    /// the command-line args.
    pub fn resolve(command: &'static str, common: &Common, args: &A) -> Result<Self> {
        let started = Instant::now();
        if let Some(path) = &common.replay {
            return Self::from_manifest(command, path, common.verbose, started);
        }
        let mut overrides = Vec::new();
        if let Some(root) = env_root() {
            overrides.push(root_override(&root));
        }
        overrides.extend(common.overrides.iter().cloned());
        let (config, _) = Config::resolve(common.config.as_deref(), &overrides)?;
        let args_value = serde_json::to_value(args)?;
        let run_id = config.run_id(command, &args_value)?;
        Ok(Self {
            command,
            config,
            args: args.clone(),
            run_id,
            replay_of: None,
            verbose: common.verbose,
            started,
        })
    }

    fn from_manifest(
        command: &'static str,
        path: &Path,
        verbose: bool,
        started: Instant,
    ) -> Result<Self> {
        let m = RunManifest::load(path).with_context(|| format!("reading {}", path.display()))?;
        if m.command != command {
            return Err(promim::Error::Config(format!(
                "{} records a `{}` run, not `{command}`",
                path.display(),
                m.command
            ))
            .into());
        }
        let run_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let root = match env_root() {
            Some(r) => r,
            None => run_dir
                .parent()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| ".".to_string()),
        };
        let run_id = format!("{}-replay", m.run_id);
        let overrides = vec![
            root_override(&root),
            format!("output.run_id={}", Value::String(run_id.clone())),
        ];
        let (config, _) = Config::resolve_value(m.config, &path.display().to_string(), &overrides)?;
        let args: A = serde_json::from_value(m.args)
            .map_err(|e| promim::Error::Config(format!("{}: bad args: {e}", path.display())))?;
        Ok(Self {
            command,
            config,
            args,
            run_id,
            replay_of: Some(run_dir),
            verbose,
            started,
        })
    }

    pub fn root(&self) -> PathBuf {
        PathBuf::from(&self.config.output.root)
    }

    pub fn cache_dir(&self) -> PathBuf {
        match &self.config.output.cache_dir {
            Some(d) => PathBuf::from(d),
            None => self.root().join("cache"),
        }
    }

    /// Frozen encoder from the cache, pretraining it on a miss.
    pub fn encoder(&self) -> Result<DualEncoder> {
        let (enc, cached) = load_or_pretrain(
            &self.cache_dir(),
            &self.config.encoder,
            &self.config.pretrain,
        )?;
        if !cached {
            eprintln!(
                "pretrained encoder {} into {}",
                &enc.checksum()[..12],
                self.cache_dir().display()
            );
        }
        Ok(enc)
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        Ok(RunManifest::new(
            &self.run_id,
            self.command,
            serde_json::to_value(&self.args)?,
            self.config.resolved_value()?,
        ))
    }

    pub fn elapsed_secs(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }
}

/// Run directory that is built under a hidden staging name and only appears
/// at `<root>/<run-id>` once [`RunDir::commit`] succeeds. Dropping it
/// uncommitted removes the staging directory.
pub struct RunDir {
    staging: PathBuf,
    target: PathBuf,
    committed: bool,
}

impl RunDir {
    pub fn create(root: &Path, run_id: &str) -> Result<Self> {
        let staging = root.join(format!(".{run_id}.partial"));
        if staging.exists() {
            fs::remove_dir_all(&staging)
                .with_context(|| format!("clearing {}", staging.display()))?;
        }
        for sub in ["checkpoints", "plots", "logs"] {
            fs::create_dir_all(staging.join(sub))
                .with_context(|| format!("creating {}", staging.display()))?;
        }
        Ok(Self {
            staging,
            target: root.join(run_id),
            committed: false,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.staging.join(rel)
    }

    pub fn write(&self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(rel);
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
    }

    /// Every file written so far, relative and sorted.
    pub fn outputs(&self) -> Result<Vec<String>> {
        fn walk(dir: &Path, base: &Path, out: &mut Vec<String>) -> Result<()> {
            for entry in fs::read_dir(dir)? {
                let p = entry?.path();
                if p.is_dir() {
                    walk(&p, base, out)?;
                } else if let Ok(rel) = p.strip_prefix(base) {
                    out.push(rel.to_string_lossy().replace('\\', "/"));
                }
            }
            Ok(())
        }
        let mut out = Vec::new();
        walk(&self.staging, &self.staging, &mut out)?;
        out.sort();
        Ok(out)
    }

    /// Writes the manifest with the output list and moves the run into place.
    pub fn commit(mut self, mut manifest: RunManifest, wall_clock_secs: f64) -> Result<PathBuf> {
        manifest.outputs = self.outputs()?;
        manifest.wall_clock_secs = wall_clock_secs;
        manifest.save(&self.path("manifest.json"))?;
        if self.target.exists() {
            fs::remove_dir_all(&self.target)
                .with_context(|| format!("replacing {}", self.target.display()))?;
        }
        fs::rename(&self.staging, &self.target)
            .with_context(|| format!("moving run into {}", self.target.display()))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

/// Byte comparison of a replayed metrics.csv against the original.
pub fn check_replay(original: &Path, replayed: &Path) -> Result<()> {
    let a = original.join("metrics.csv");
    let b = replayed.join("metrics.csv");
    let x = fs::read(&a).with_context(|| format!("reading {}", a.display()))?;
    let y = fs::read(&b).with_context(|| format!("reading {}", b.display()))?;
    if x != y {
        bail!(
            "replay mismatch: {} differs from {}",
            b.display(),
            a.display()
        );
    }
    println!("replay: metrics.csv is byte-identical to {}", a.display());
    Ok(())
}
