//! Versioned JSON model files, also used for early-stopping snapshots.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "model_kind": "svgp",
//!   "parameters": { "inducing": {"rows": 2, "cols": 1, "data": [..]}, ... },
//!   "metadata": { "seed": 42, "config": {..}, "metrics": {..}, ... }
//! }
//! ```
//!
//! Floats are written with shortest round-trip formatting and parsed with
//! correct rounding, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::datagen::Standardizer;
use crate::error::{Error, Result};
use crate::mdn::MdnParams;
use crate::svgp::SvgpState;
use crate::training::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model_kind", content = "parameters", rename_all = "lowercase")]
pub enum Model {
    Svgp(SvgpState),
    Mdn(MdnParams),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Svgp(_) => "svgp",
            Model::Mdn(_) => "mdn",
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::Svgp(s) => s.input_dim(),
            Model::Mdn(p) => p.input_dim(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Model::Svgp(s) => s.validate(),
            Model::Mdn(p) => p.validate(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
    /// Final metrics by name; non-finite values are dropped on save.
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub feature_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardizer: Option<Standardizer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    #[serde(flatten)]
    pub model: Model,
    #[serde(default)]
    pub metadata: TrainingMetadata,
}

impl ModelFile {
    pub fn new(model: Model, metadata: TrainingMetadata) -> Self {
        Self { format_version: FORMAT_VERSION, model, metadata }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.metadata.metrics.retain(|_, v| v.is_finite());
        serde_json::to_string_pretty(&copy).map_err(|e| Error::ModelFile(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::ModelFile(format!("not valid JSON: {e}")))?;
        match value.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::ModelFile(format!(
                    "unsupported format_version {v} (expected {FORMAT_VERSION})"
                )))
            }
            None => return Err(Error::ModelFile("missing format_version".into())),
        }
        // parse from the text, not the Value, to keep float round-tripping exact
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::ModelFile(e.to_string()))?;
        file.model.validate()?;
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Opaque deep copy of model parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot(Vec<u8>);

impl Snapshot {
    pub fn capture<T: Serialize>(params: &T) -> Self {
        Snapshot(serde_json::to_vec(params).expect("model parameters serialize"))
    }

    pub fn restore<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_slice(&self.0).map_err(|e| Error::ModelFile(e.to_string()))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}
