//! Sectioned `key = value` run configuration.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file, each
//! `--set section.key=value` in order, then dedicated command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Int,
    Float,
    /// float or the literal `auto`
    FloatOrAuto,
    Bool,
    Choice(&'static [&'static str]),
}

struct Key {
    section: &'static str,
    name: &'static str,
    kind: Kind,
    default: &'static str,
}

const fn key(section: &'static str, name: &'static str, kind: Kind, default: &'static str) -> Key {
    Key { section, name, kind, default }
}

pub const SECTIONS: [&str; 5] = ["data", "model", "stage1", "stage2", "eval"];

static SCHEMA: &[Key] = &[
    key("data", "patch_t", Kind::Int, "2"),
    key("data", "patch_s", Kind::Int, "8"),
    key("model", "embed_dim", Kind::Int, "64"),
    key("model", "depth", Kind::Int, "4"),
    key("model", "heads", Kind::Int, "4"),
    key("model", "mlp_ratio", Kind::Int, "4"),
    key("model", "decoder_dim", Kind::Int, "32"),
    key("model", "decoder_depth", Kind::Int, "2"),
    key("stage1", "mask_ratio", Kind::FloatOrAuto, "auto"),
    key("stage1", "epochs", Kind::Int, "50"),
    key("stage1", "batch_size", Kind::Int, "32"),
    key("stage1", "lr", Kind::Float, "0.001"),
    key("stage1", "weight_decay", Kind::Float, "0.05"),
    key("stage1", "beta1", Kind::Float, "0.9"),
    key("stage1", "beta2", Kind::Float, "0.95"),
    key("stage1", "warmup_fraction", Kind::Float, "0.025"),
    key("stage1", "norm_pix_target", Kind::Bool, "true"),
    key("stage1", "seed", Kind::Int, "0"),
    key("stage2", "lambda_img", Kind::FloatOrAuto, "auto"),
    key("stage2", "lambda_vid", Kind::FloatOrAuto, "auto"),
    key("stage2", "mask_ratio", Kind::Float, "0.9"),
    key("stage2", "beta", Kind::Float, "1"),
    key("stage2", "target_norm", Kind::Choice(&["none", "layernorm"]), "none"),
    key("stage2", "pixel_branch", Kind::Bool, "false"),
    key("stage2", "lambda_pixel", Kind::Float, "1"),
    key("stage2", "norm_pix_target", Kind::Bool, "true"),
    key("stage2", "momentum", Kind::Float, "0.99"),
    key("stage2", "epochs", Kind::Int, "100"),
    key("stage2", "batch_size", Kind::Int, "32"),
    key("stage2", "lr", Kind::Float, "0.001"),
    key("stage2", "weight_decay", Kind::Float, "0.05"),
    key("stage2", "beta1", Kind::Float, "0.9"),
    key("stage2", "beta2", Kind::Float, "0.95"),
    key("stage2", "warmup_fraction", Kind::Float, "0.025"),
    key("stage2", "seed", Kind::Int, "0"),
    key("eval", "mode", Kind::Choice(&["probe", "finetune"]), "probe"),
    key("eval", "epochs", Kind::Int, "100"),
    key("eval", "batch_size", Kind::Int, "32"),
    key("eval", "lr", Kind::Float, "0.01"),
    key("eval", "weight_decay", Kind::Float, "0"),
    key("eval", "warmup_fraction", Kind::Float, "0.1"),
    key("eval", "seed", Kind::Int, "0"),
];

fn lookup(section: &str, name: &str) -> Option<&'static Key> {
    SCHEMA.iter().find(|k| k.section == section && k.name == name)
}

fn check_value(k: &Key, value: &str) -> Result<()> {
    let ok = match k.kind {
        Kind::Int => value.parse::<u64>().is_ok(),
        Kind::Float => value.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::FloatOrAuto => value == "auto" || value.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::Bool => value == "true" || value == "false",
        Kind::Choice(opts) => opts.contains(&value),
    };
    if ok {
        return Ok(());
    }
    let expected = match k.kind {
        Kind::Int => "a nonnegative integer".to_string(),
        Kind::Float => "a finite number".to_string(),
        Kind::FloatOrAuto => "a finite number or auto".to_string(),
        Kind::Bool => "true or false".to_string(),
        Kind::Choice(opts) => opts.join("|"),
    };
    bail!("{}.{} = {value:?}: expected {expected}", k.section, k.name)
}

/// Fully resolved settings; every schema key has a value.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<(String, String), String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let values = SCHEMA.iter().map(|k| ((k.section.to_string(), k.name.to_string()), k.default.to_string())).collect();
        Self { values }
    }
}

impl RunConfig {
    pub fn set(&mut self, section: &str, name: &str, value: &str) -> Result<()> {
        let k = lookup(section, name).ok_or_else(|| {
            if SECTIONS.contains(&section) {
                anyhow!("unknown key {name:?} in section [{section}]")
            } else {
                anyhow!("unknown section [{section}]")
            }
        })?;
        check_value(k, value)?;
        self.values.insert((section.to_string(), name.to_string()), value.to_string());
        Ok(())
    }

    /// Applies `section.key=value`.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec.split_once('=').ok_or_else(|| anyhow!("override {spec:?} is not section.key=value"))?;
        let (section, name) = path.trim().split_once('.').ok_or_else(|| anyhow!("override key {path:?} is not section.key"))?;
        self.set(section, name, value.trim())
    }

    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut section: Option<String> = None;
        let mut seen = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = || format!("{origin}:{}", no + 1);
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    bail!("{}: unknown section [{name}]", at());
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("{}: expected key = value", at()))?;
            let sec = section.as_deref().ok_or_else(|| anyhow!("{}: key outside of a section", at()))?;
            let k = k.trim();
            if seen.insert((sec.to_string(), k.to_string()), ()).is_some() {
                bail!("{}: duplicate key {sec}.{k}", at());
            }
            self.set(sec, k, v.trim()).with_context(at)?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.merge_text(&text, &path.display().to_string())
    }

    pub fn get(&self, section: &str, name: &str) -> &str {
        self.values
            .get(&(section.to_string(), name.to_string()))
            .unwrap_or_else(|| panic!("{section}.{name} is not a schema key"))
    }

    pub fn usize(&self, section: &str, name: &str) -> usize {
        self.get(section, name).parse().expect("validated integer")
    }

    pub fn u64(&self, section: &str, name: &str) -> u64 {
        self.get(section, name).parse().expect("validated integer")
    }

    pub fn f64(&self, section: &str, name: &str) -> f64 {
        self.get(section, name).parse().expect("validated number")
    }

    pub fn f64_or_auto(&self, section: &str, name: &str) -> Option<f64> {
        match self.get(section, name) {
            "auto" => None,
            v => Some(v.parse().expect("validated number")),
        }
    }

    pub fn bool(&self, section: &str, name: &str) -> bool {
        self.get(section, name) == "true"
    }

    /// Config-file text of every setting, in schema order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for section in SECTIONS {
            let _ = writeln!(out, "[{section}]");
            for k in SCHEMA.iter().filter(|k| k.section == section) {
                let _ = writeln!(out, "{} = {}", k.name, self.get(section, k.name));
            }
            out.push('\n');
        }
        out
    }
}

/// Defaults, then `file`, then `overrides`.
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        cfg.load_file(path)?;
    }
    for o in overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}
