//! Optional TOML config file. Top-level keys mirror the long flag names
//! (with `_` for `-`); model and generator settings live in tables.
//! Command-line flags override anything set here.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;
use smp_core::folds::PipelineConfig;
use smp_core::gbdt::GbdtConfig;
use smp_core::mftm::TransformOptions;
use smp_core::neuro::MlpConfig;
use smp_core::synth::SynthConfig;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub models_dir: Option<PathBuf>,
    pub state_out: Option<PathBuf>,
    pub features_out: Option<PathBuf>,
    pub blocks: Option<String>,
    pub k: Option<usize>,
    pub shuffle_seed: Option<u64>,
    pub model: Option<String>,
    pub models: Option<String>,
    pub alpha: Option<f64>,
    pub pred: Option<PathBuf>,
    pub pred_a: Option<PathBuf>,
    pub pred_b: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub subsets: Option<PathBuf>,
    pub external: Option<String>,
    pub seed: Option<u64>,
    pub sigma: Option<f64>,
    pub n_users: Option<usize>,
    pub synth: Option<SynthConfig>,
    pub gbdt: Option<GbdtConfig>,
    pub mlp: Option<MlpConfig>,
    pub transform: Option<TransformOptions>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| {
            // toml renders multi-line snippets; keep the first line only.
            let msg = e
                .message()
                .lines()
                .next()
                .unwrap_or("invalid document")
                .to_string();
            anyhow::anyhow!("config {}: {msg}", path.display())
        })
    }

    pub fn pipeline(&self) -> PipelineConfig {
        let mut p = PipelineConfig::default();
        if let Some(g) = &self.gbdt {
            p.gbdt = g.clone();
        }
        if let Some(m) = &self.mlp {
            p.mlp = m.clone();
        }
        if let Some(a) = self.alpha {
            p.alpha = a;
        }
        p
    }

    pub fn transform_options(&self) -> TransformOptions {
        self.transform.unwrap_or_default()
    }
}

/// Flag value if given, else the config value.
pub fn pick<T: Clone>(flag: Option<T>, file: &Option<T>) -> Option<T> {
    flag.or_else(|| file.clone())
}

/// Like [`pick`] but the value is mandatory.
pub fn need<T: Clone>(flag: Option<T>, file: &Option<T>, name: &str) -> Result<T> {
    pick(flag, file).ok_or_else(|| {
        anyhow::Error::new(crate::UsageError(format!(
            "missing --{name} (flag or config key `{}`)",
            name.replace('-', "_")
        )))
    })
}
