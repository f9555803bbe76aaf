//! Flat TOML run configuration. Command-line flags override file values;
//! file values override built-in defaults. Relative paths in the file are
//! resolved against the file's own directory.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dumps: Option<PathBuf>,
    pub unembed: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub keywords: Option<PathBuf>,
    pub sidecar: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub run: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub feature: Option<String>,
    pub criterion: Option<String>,
    pub tau: Option<f64>,
    pub raw_logits: Option<bool>,
    pub restrict_to_text: Option<bool>,
    pub top_k_filter: Option<usize>,
    pub sample: Option<usize>,
    pub k: Option<usize>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub hidden: Option<usize>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
    pub skip_head: Option<bool>,
    pub nmi_norm: Option<String>,
    pub alphas: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: FileConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.dumps,
            &mut cfg.unembed,
            &mut cfg.vocab,
            &mut cfg.keywords,
            &mut cfg.sidecar,
            &mut cfg.labels,
            &mut cfg.target,
            &mut cfg.embeddings,
            &mut cfg.predictions,
            &mut cfg.run,
            &mut cfg.out,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Flag, else config value, else an error naming the flag.
pub fn required<T>(flag: Option<T>, file: Option<T>, name: &str) -> Result<T> {
    flag.or(file)
        .with_context(|| format!("missing required value: pass --{name} or set it in the config"))
}

/// Input path that must exist.
pub fn input(flag: Option<PathBuf>, file: Option<PathBuf>, name: &str) -> Result<PathBuf> {
    let path = required(flag, file, name)?;
    anyhow::ensure!(path.exists(), "--{name}: {} does not exist", path.display());
    Ok(path)
}
