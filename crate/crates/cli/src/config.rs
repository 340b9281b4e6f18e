use std::path::{Path, PathBuf};

use compact_core::analysis::ShiftSpace;
use compact_core::corpus::{Style, TaskConfig, TeacherProfile};
use compact_core::model::ModelConfig;
use compact_core::objectives::LossConfig;
use compact_core::scoring::WeightingConfig;
use compact_core::seeds::derive_seed;
use compact_core::trainer::TrainerConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// A configuration problem, reported with the offending dot-path key.
#[derive(Debug, Error)]
#[error("config key `{key}`: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    fn new(key: impl Into<String>, message: impl ToString) -> Self {
        Self { key: key.into(), message: message.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    #[default]
    Ood,
    Id,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_n: usize,
    pub test_n: usize,
    pub task: TaskConfig,
    pub teachers: Vec<TeacherProfile>,
    /// Use an existing JSONL file instead of generating.
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_n: 500,
            test_n: 200,
            task: TaskConfig::default(),
            teachers: vec![
                TeacherProfile::new("concise", Style::Concise, 0.0),
                TeacherProfile::new("verbose", Style::Verbose, 0.0),
                TeacherProfile::new("stylized", Style::Stylized, 0.0),
                TeacherProfile::new("noisy", Style::Concise, 0.4),
            ],
            train_path: None,
            test_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub probe: ProbeKind,
    pub probe_n: usize,
    pub space: ShiftSpace,
    pub charts: bool,
    pub grad_check_instances: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { probe: ProbeKind::Ood, probe_n: 50, space: ShiftSpace::Projected, charts: true, grad_check_instances: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream; `model.seed` and `trainer.seed` are derived from it.
    pub seed: u64,
    pub model: ModelConfig,
    pub weighting: WeightingConfig,
    pub loss: LossConfig,
    pub trainer: TrainerConfig,
    pub data: DataConfig,
    pub analysis: AnalysisConfig,
}

impl RunConfig {
    pub fn data_seed(&self, split: &str) -> u64 {
        derive_seed(self.seed, &format!("data/{split}"), 0)
    }

    fn derive_seeds(&mut self) {
        self.model.seed = derive_seed(self.seed, "model", 0);
        self.trainer.seed = derive_seed(self.seed, "trainer", 0);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::new("model", e))?;
        self.weighting.validate().map_err(|e| ConfigError::new("weighting", e))?;
        self.loss.validate().map_err(|e| ConfigError::new("loss", e))?;
        self.trainer.validate().map_err(|e| ConfigError::new("trainer", e))?;
        self.data.task.validate().map_err(|e| ConfigError::new("data.task", e))?;
        if self.data.teachers.len() < 2 {
            return Err(ConfigError::new("data.teachers", "need at least two teachers"));
        }
        if self.data.train_n == 0 {
            return Err(ConfigError::new("data.train_n", "must be positive"));
        }
        if self.data.test_n == 0 {
            return Err(ConfigError::new("data.test_n", "must be positive"));
        }
        if self.analysis.probe_n < 3 {
            return Err(ConfigError::new("analysis.probe_n", "PCA needs at least 3 probes"));
        }
        Ok(())
    }

    /// Canonical JSON of the resolved config.
    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_value().to_string().as_bytes()))
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Parses `a.b.c=value`; the value is JSON when it parses as JSON, a string otherwise.
pub fn parse_override(arg: &str) -> Result<(String, Value), ConfigError> {
    let (key, raw) = arg.split_once('=').ok_or_else(|| ConfigError::new(arg, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::new(key, "malformed dot-path"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn apply_override(root: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| ConfigError::new(parts[..i].join("."), "is not an object"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// Defaults, then the config file, then `--set` overrides, then validation.
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut value = RunConfig::default().to_value();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("--config", format!("{}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| ConfigError::new("--config", format!("{}: {e}", path.display())))?;
        if !patch.is_object() {
            return Err(ConfigError::new("--config", "top level must be a JSON object"));
        }
        merge(&mut value, patch);
    }
    for arg in overrides {
        let (key, v) = parse_override(arg)?;
        apply_override(&mut value, &key, v)?;
    }
    let mut config: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::new(path, e.into_inner())
    })?;
    config.derive_seeds();
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_json_then_string() {
        assert_eq!(parse_override("a.b=3").unwrap(), ("a.b".into(), Value::from(3)));
        assert_eq!(parse_override("trainer.mode=direct_average").unwrap().1, Value::from("direct_average"));
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
    }

    #[test]
    fn resolve_applies_overrides_and_derives_seeds() {
        let c = resolve(None, &["seed=7".into(), "trainer.epochs=0".into(), "trainer.mode={\"single_teacher\":\"verbose\"}".into()]).unwrap();
        assert_eq!(c.trainer.epochs, 0);
        assert_eq!(c.model.seed, derive_seed(7, "model", 0));
        assert_eq!(c.trainer.mode, compact_core::trainer::TrainMode::SingleTeacher("verbose".into()));
        assert_eq!(c.sha256(), resolve(None, &["seed=7".into(), "trainer.epochs=0".into(), "trainer.mode={\"single_teacher\":\"verbose\"}".into()]).unwrap().sha256());
    }

    #[test]
    fn unknown_and_invalid_keys_are_named() {
        let e = resolve(None, &["model.d_modle=3".into()]).unwrap_err();
        assert!(e.to_string().contains("d_modle"), "{e}");
        let e = resolve(None, &["trainer.batch_size=\"four\"".into()]).unwrap_err();
        assert_eq!(e.key, "trainer.batch_size");
        let e = resolve(None, &["model.n_heads=3".into()]).unwrap_err();
        assert_eq!(e.key, "model");
        let e = resolve(None, &["data.train_n=0".into()]).unwrap_err();
        assert_eq!(e.key, "data.train_n");
    }

    #[test]
    fn file_is_merged_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 3, "model": {"d_model": 64}}"#).unwrap();
        let c = resolve(Some(&path), &[]).unwrap();
        assert_eq!((c.seed, c.model.d_model, c.model.n_layers), (3, 64, ModelConfig::default().n_layers));
    }
}
