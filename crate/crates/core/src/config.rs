//! Shared attack-training knobs and the flat key=value config file format.

use crate::error::{DfaError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Hyperparameters for perturbation and patch training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackConfig {
    pub steps: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    /// How many dataset images the attack trains against; their clean
    /// features are precomputed once and cached.
    pub train_subset: usize,
    /// Transformations averaged per optimization step (patch attack).
    pub transforms_per_step: usize,
    /// Random scaling augmentation in [0.8, 1.2] (patch attack).
    pub scale_aug: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            learning_rate: 0.01,
            batch_size: 1,
            train_subset: 48,
            transforms_per_step: 1,
            scale_aug: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(DfaError::InvalidArgument("steps must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(DfaError::InvalidArgument("learning rate must be > 0".into()));
        }
        if self.batch_size == 0 || self.train_subset == 0 || self.transforms_per_step == 0 {
            return Err(DfaError::InvalidArgument(
                "batch_size, train_subset and transforms_per_step must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Flat key = value config file (a TOML subset). Unknown keys are rejected
/// so typos surface immediately.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FileConfig {
    pub entries: Vec<(String, String)>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| DfaError::Format(format!("bad config file: {e}")))?;
        let mut entries = Vec::new();
        for (k, v) in table {
            let rendered = match v {
                toml::Value::String(s) => s,
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => f.to_string(),
                toml::Value::Boolean(b) => b.to_string(),
                other => {
                    return Err(DfaError::Format(format!(
                        "config key {k:?} has unsupported type: {other}"
                    )))
                }
            };
            entries.push((k, rendered));
        }
        entries.sort();
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DfaError::Format(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, key: &str, value: String) {
        if let Some(slot) = self.entries.iter_mut().find(|(k, _)| k == key) {
            slot.1 = value;
        } else {
            self.entries.push((key.to_string(), value));
            self.entries.sort();
        }
    }

    /// Deterministic snapshot of the resolved configuration.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            // strings that do not look like numbers/bools get quoted
            let plain = v.parse::<f64>().is_ok() || v == "true" || v == "false";
            if plain {
                out.push_str(v);
            } else {
                out.push('"');
                out.push_str(v);
                out.push('"');
            }
            out.push('\n');
        }
        out
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.render())?;
        Ok(())
    }
}
