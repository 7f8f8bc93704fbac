//! Run manifests: what was run, with which settings and inputs, and what it
//! produced. Written once before work starts and again when it finishes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

pub struct RunManifest {
    path: PathBuf,
    command: String,
    config: Option<String>,
    seeds: Vec<(String, u64)>,
    inputs: Vec<(String, String)>,
    outputs: Vec<(String, String)>,
    started: Instant,
}

impl RunManifest {
    pub fn new(path: PathBuf, command: String) -> Self {
        Self { path, command, config: None, seeds: Vec::new(), inputs: Vec::new(), outputs: Vec::new(), started: Instant::now() }
    }

    pub fn config(&mut self, snapshot: String) -> &mut Self {
        self.config = Some(snapshot);
        self
    }

    pub fn seed(&mut self, name: &str, seed: u64) -> &mut Self {
        self.seeds.push((name.to_string(), seed));
        self
    }

    pub fn input(&mut self, name: &str, value: String) -> &mut Self {
        self.inputs.push((name.to_string(), value));
        self
    }

    pub fn output(&mut self, name: &str, value: String) -> &mut Self {
        self.outputs.push((name.to_string(), value));
        self
    }

    fn render(&self, status: &str, seconds: Option<f64>) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "command = {}", self.command);
        let _ = writeln!(out, "status = {status}");
        if let Some(s) = seconds {
            let _ = writeln!(out, "wall_clock_seconds = {s:.3}");
        }
        let _ = writeln!(out, "threads = {}", mvdlab::train::threads_from_env());
        for (title, rows) in [("inputs", &self.inputs), ("outputs", &self.outputs)] {
            let _ = writeln!(out, "\n[{title}]");
            for (k, v) in rows {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        let _ = writeln!(out, "\n[seeds]");
        for (k, v) in &self.seeds {
            let _ = writeln!(out, "{k} = {v}");
        }
        if let Some(cfg) = &self.config {
            let _ = writeln!(out, "\n[config]");
            for line in cfg.lines().filter(|l| !l.trim().is_empty()) {
                let _ = writeln!(out, "{line}");
            }
        }
        out
    }

    pub fn begin(&self) -> Result<()> {
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(&self.path, self.render("running", None)).with_context(|| format!("writing {}", self.path.display()))
    }

    pub fn finish(&self) -> Result<()> {
        let text = self.render("complete", Some(self.started.elapsed().as_secs_f64()));
        fs::write(&self.path, text).with_context(|| format!("writing {}", self.path.display()))
    }
}

/// SHA-256 over the files of a corpus directory in manifest order.
pub fn corpus_digest(dir: &Path) -> Result<String> {
    let manifest = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    for name in text.lines().filter_map(|l| l.split_whitespace().next()).filter(|w| w.starts_with("clip_")) {
        h.update(fs::read(dir.join(format!("{name}.f32"))).with_context(|| format!("reading clip {name}"))?);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}
