//! Run manifests and the `.smpm` model file container.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbdt::{predict_gbdt, GbdtConfig, GbdtModel};
use crate::mftm::{BlockTag, FeatureMatrix};
use crate::neuro::{predict_mlp, MlpConfig, MlpModel};

pub const MODEL_FORMAT: &str = "smpm";
pub const MODEL_VERSION: u32 = 1;

/// Recorded in every manifest that involves the neural ensemble member.
pub const NEURAL_MEMBER_NOTE: &str =
    "neural ensemble member is a plain feedforward regressor (ReLU MLP), not an attentive tabular network";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gbdt,
    Mlp,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gbdt => "gbdt",
            ModelKind::Mlp => "mlp",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gbdt" => Ok(ModelKind::Gbdt),
            "mlp" => Ok(ModelKind::Mlp),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "snake_case")]
pub enum ModelConfig {
    Gbdt(GbdtConfig),
    Mlp(MlpConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Gbdt(_) => ModelKind::Gbdt,
            ModelConfig::Mlp(_) => ModelKind::Mlp,
        }
    }

    /// Smallest training set the model accepts.
    pub fn min_train_rows(&self) -> usize {
        match self {
            ModelConfig::Gbdt(c) => c.min_samples_leaf.max(1),
            ModelConfig::Mlp(_) => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum FittedModel {
    Gbdt(GbdtModel),
    Mlp(MlpModel),
}

impl FittedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            FittedModel::Gbdt(_) => ModelKind::Gbdt,
            FittedModel::Mlp(_) => ModelKind::Mlp,
        }
    }

    pub fn predict(&self, features: &FeatureMatrix) -> Result<Vec<f64>> {
        match self {
            FittedModel::Gbdt(m) => predict_gbdt(m, &features.values),
            FittedModel::Mlp(m) => predict_mlp(m, &features.values),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    #[serde(flatten)]
    pub model: FittedModel,
}

impl ModelFile {
    pub fn new(model: FittedModel) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: ModelFile = serde_json::from_str(s)?;
        if f.format != MODEL_FORMAT || f.version != MODEL_VERSION {
            return Err(Error::Config(format!(
                "unsupported model file {} v{}",
                f.format, f.version
            )));
        }
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Everything needed to reproduce a run: configuration echo, seeds and
/// digests of every input file. Contains no wall-clock data so identical
/// runs produce identical manifests.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan_digest: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub blocks: Vec<BlockTag>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub block_widths: BTreeMap<String, usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub models: Vec<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble_order: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    /// Input path -> hex SHA-256.
    pub inputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

pub const ENSEMBLE_ORDER: &str =
    "median over folds per model, then alpha * gbdt + (1 - alpha) * mlp";

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            tool: "smp".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            ..Default::default()
        }
    }

    /// Adds the model configs (and their seeds), noting the neural substitution.
    pub fn with_models(mut self, models: &[ModelConfig]) -> Self {
        for m in models {
            let seed = match m {
                ModelConfig::Gbdt(c) => c.seed,
                ModelConfig::Mlp(c) => c.seed,
            };
            self.seeds.insert(m.kind().as_str().into(), seed);
            if m.kind() == ModelKind::Mlp && !self.notes.iter().any(|n| n == NEURAL_MEMBER_NOTE) {
                self.notes.push(NEURAL_MEMBER_NOTE.into());
            }
            self.models.push(m.clone());
        }
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuro::Layer;

    #[test]
    fn model_file_round_trip_and_kind_tag() {
        let mlp = MlpModel::from_layers(vec![Layer {
            n_in: 1,
            n_out: 1,
            weights: vec![2.0],
            bias: vec![1.0],
        }])
        .unwrap();
        let f = ModelFile::new(FittedModel::Mlp(mlp));
        let json = f.to_json().unwrap();
        assert!(json.contains("\"kind\":\"mlp\""));
        assert!(json.contains("\"format\":\"smpm\""));
        assert_eq!(ModelFile::from_json(&json).unwrap(), f);
        let bad = json.replace("\"version\":1", "\"version\":9");
        assert!(ModelFile::from_json(&bad).is_err());
    }

    #[test]
    fn manifest_records_substitution_once() {
        let m = RunManifest::new("train").with_models(&[
            ModelConfig::Mlp(MlpConfig::default()),
            ModelConfig::Gbdt(GbdtConfig::default()),
            ModelConfig::Mlp(MlpConfig::default()),
        ]);
        assert_eq!(m.notes, vec![NEURAL_MEMBER_NOTE.to_string()]);
        assert_eq!(m.seeds.len(), 2);
        let json = m.to_json().unwrap();
        assert!(!json.contains("plan_digest"));
        assert_eq!(
            RunManifest::new("x").to_json().unwrap(),
            RunManifest::new("x").to_json().unwrap()
        );
    }

    #[test]
    fn kinds_parse() {
        assert_eq!("GBDT".parse::<ModelKind>().unwrap(), ModelKind::Gbdt);
        assert!("tabnet".parse::<ModelKind>().is_err());
    }
}
