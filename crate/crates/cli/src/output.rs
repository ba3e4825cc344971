use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

/// Files written by one subcommand, with stage timings.
#[derive(Debug)]
pub struct Outputs {
    dir: PathBuf,
    created: bool,
    files: Vec<String>,
    timings: Vec<(String, f64)>,
    started: Instant,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        let created = !dir.exists();
        std::fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created,
            files: Vec::new(),
            timings: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Registers `name` as an output and returns its path.
    pub fn file(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn timed<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f();
        self.timings
            .push((stage.to_string(), t.elapsed().as_secs_f64()));
        out
    }

    fn write_manifest(
        &mut self,
        subcommand: &str,
        config: Value,
        seed: Option<u64>,
        resolved: Value,
    ) -> Result<()> {
        let mut outputs = Vec::new();
        for name in &self.files {
            let path = self.dir.join(name);
            let bytes = std::fs::metadata(&path)
                .with_context(|| format!("missing output {}", path.display()))?
                .len();
            outputs.push(json!({ "file": name, "sha256": sha256_file(&path)?, "bytes": bytes }));
        }
        let mut timings = Map::new();
        for (stage, secs) in &self.timings {
            timings.insert(stage.clone(), json!(secs));
        }
        timings.insert("total".into(), json!(self.started.elapsed().as_secs_f64()));
        let manifest = json!({
            "subcommand": subcommand,
            "versions": { "u5mr": env!("CARGO_PKG_VERSION") },
            "seed": seed,
            "config": config,
            "resolved": resolved,
            "timings_seconds": timings,
            "outputs": outputs,
        });
        let path = self.dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
    }

    /// Removes every registered output and the manifest, and the directory
    /// itself when this run created it and it is now empty.
    pub fn discard(&self) {
        for name in self.files.iter().map(String::as_str).chain([MANIFEST]) {
            let _ = std::fs::remove_file(self.dir.join(name));
        }
        if self.created {
            let _ = std::fs::remove_dir(&self.dir);
        }
    }
}

/// Runs `body` against a fresh output directory. On success writes the
/// manifest with the config echo and whatever `body` resolved; on failure
/// removes the partial outputs.
pub fn with_outputs<C: Serialize>(
    dir: &Path,
    subcommand: &str,
    config: &C,
    seed: Option<u64>,
    body: impl FnOnce(&mut Outputs) -> Result<Value>,
) -> Result<()> {
    let mut out = Outputs::create(dir)?;
    let result = body(&mut out).and_then(|resolved| {
        let config = serde_json::to_value(config)?;
        out.write_manifest(subcommand, config, seed, resolved)
    });
    if result.is_err() {
        out.discard();
    }
    result
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Reads a manifest written by a previous run.
pub fn read_manifest(dir: &Path) -> Result<Value> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed manifest {}", path.display()))
}
