//! Run configuration: one JSON document with documented defaults for
//! every field, strict about unknown keys, resolved once and echoed into
//! every output artifact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FasError, Result};
use crate::loss::{LossWeights, MiningMode};
use crate::model::ModelConfig;
use crate::synth::DataConfig;
use crate::uncertainty::{FusionMode, Stage2Options};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossesSection {
    pub lambda_v: f64,
    pub lambda_d: f64,
    pub lambda_r: f64,
    pub lambda_m: f64,
    pub lambda_t: f64,
    pub lambda_rec: f64,
    pub m1: f64,
    pub m2: f64,
    pub mining_mode: MiningMode,
}

impl Default for LossesSection {
    fn default() -> Self {
        let w = LossWeights::default();
        LossesSection {
            lambda_v: w.lambda_v,
            lambda_d: w.lambda_d,
            lambda_r: w.lambda_r,
            lambda_m: w.lambda_m,
            lambda_t: w.lambda_t,
            lambda_rec: w.lambda_rec,
            m1: w.m1,
            m2: w.m2,
            mining_mode: MiningMode::Literal,
        }
    }
}

impl LossesSection {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_v: self.lambda_v,
            lambda_d: self.lambda_d,
            lambda_r: self.lambda_r,
            lambda_m: self.lambda_m,
            lambda_t: self.lambda_t,
            lambda_rec: self.lambda_rec,
            m1: self.m1,
            m2: self.m2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Independent stage-1 runs used to estimate the prior spread.
    pub k_runs: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 10,
            batch_size: 6,
            lr: 1e-4,
            seed: 7,
            k_runs: 3,
        }
    }
}

/// What the final spoof score is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Uncertainty-weighted fusion of all four channels.
    Fused,
    /// The liveness channel alone (ablation baseline).
    LivenessOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct UncertaintyConfig {
    pub fusion_mode: FusionMode,
    pub score_mode: ScoreMode,
    pub stage2: Stage2Options,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig {
            fusion_mode: FusionMode::InverseVariance,
            score_mode: ScoreMode::Fused,
            stage2: Stage2Options::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Intra,
    LeaveOneDomainOut,
    LeaveOneDomainAndAttackOut,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub losses: LossesSection,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub uncertainty: UncertaintyConfig,
    pub protocol: ProtocolKindField,
}

/// Wrapper so the protocol selection still defaults cleanly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProtocolKindField(pub ProtocolKind);

impl Default for ProtocolKindField {
    fn default() -> Self {
        ProtocolKindField(ProtocolKind::Intra)
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.losses.weights().validate()?;
        self.data.validate()?;
        if self.model.image_shape[1] != self.data.image_size {
            return Err(FasError::Config(format!(
                "model image_shape {:?} disagrees with data image_size {}",
                self.model.image_shape, self.data.image_size
            )));
        }
        if self.training.batch_size == 0 || self.training.epochs == 0 {
            return Err(FasError::Config(
                "training epochs and batch_size must be positive".into(),
            ));
        }
        if self.training.lr <= 0.0 || !self.training.lr.is_finite() {
            return Err(FasError::Config("training lr must be positive".into()));
        }
        let w = self.losses.weights();
        if w.lambda_v == 0.0
            && w.lambda_d == 0.0
            && w.lambda_r == 0.0
            && w.lambda_m == 0.0
            && w.lambda_rec == 0.0
        {
            return Err(FasError::Config(
                "at least one of lambda_v/lambda_d/lambda_r/lambda_m/lambda_rec must be positive"
                    .into(),
            ));
        }
        if self.data.identities < self.model.identity_count {
            return Err(FasError::Config(format!(
                "data.identities {} below model.identity_count {}",
                self.data.identities, self.model.identity_count
            )));
        }
        Ok(())
    }
}

fn parse_override_value(raw: &str) -> serde_json::Value {
    // JSON literal when it parses, bare string otherwise
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}

fn set_path(root: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<()> {
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(FasError::Config(format!("malformed override key: {path}")));
    }
    for part in &parts[..parts.len() - 1] {
        if !cursor.is_object() {
            return Err(FasError::Config(format!(
                "override key {path} crosses a non-object"
            )));
        }
        cursor = cursor
            .as_object_mut()
            .expect("checked object")
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    match cursor.as_object_mut() {
        Some(map) => {
            map.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(FasError::Config(format!(
            "override key {path} crosses a non-object"
        ))),
    }
}

/// Parses a config document and applies dotted-key overrides on top.
/// An absent or empty file yields the full default configuration.
pub fn parse_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = match file {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| FasError::Io(format!("reading config {path:?}: {e}")))?,
        None => String::new(),
    };
    let trimmed = text.trim();
    let mut value: serde_json::Value = if trimmed.is_empty() {
        serde_json::Value::Object(Default::default())
    } else {
        serde_json::from_str(trimmed).map_err(|e| FasError::Config(format!("config JSON: {e}")))?
    };
    if !value.is_object() {
        return Err(FasError::Config("config root must be a JSON object".into()));
    }
    for (key, raw) in overrides {
        set_path(&mut value, key, parse_override_value(raw))?;
    }
    let config: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            FasError::Config(format!("unknown key: {inner}"))
        } else {
            FasError::Config(format!("{path}: {inner}"))
        }
    })?;
    config.validate()?;
    Ok(config)
}

/// Fully resolved config as a JSON value, for embedding into artifacts.
pub fn resolved_json(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}
