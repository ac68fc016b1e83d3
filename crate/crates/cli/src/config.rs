//! Run configuration: a TOML file merged with `--set key=value` overrides.

use std::path::Path;

use laneseq_core::codec::SequenceFormat;
use laneseq_core::synthdata::SceneSpec;
use laneseq_model::ModelConfig;
use laneseq_train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Scenes taken from the end of the dataset for validation.
    pub holdout: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scene: SceneSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneSpec::default();
        let model = ModelConfig { image_height: scene.height, image_width: scene.width, ..ModelConfig::default() };
        Self { seed: 0, holdout: 64, model, train: TrainConfig::default(), scene }
    }
}

impl RunConfig {
    /// Defaults, then the file (if any), then overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut tree = toml::Value::try_from(RunConfig::default()).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
            let user: toml::Value =
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut tree, user);
        }
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: RunConfig = tree.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let need = SequenceFormat::Segmentation.sequence_len(self.train.max_lanes);
        if self.model.max_seq_len + 1 < need {
            return Err(CliError::Config(format!(
                "model.max_seq_len {} is too short for {} lanes ({need} tokens)",
                self.model.max_seq_len, self.train.max_lanes
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()).map_err(CliError::io(&path))
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=value`; the value is parsed as TOML, falling back to a string.
fn apply_override(tree: &mut toml::Value, item: &str) -> Result<(), CliError> {
    let (key, raw) = item.split_once('=').ok_or_else(|| CliError::Usage(format!("override {item:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = tree;
    let parts: Vec<&str> = key.trim().split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| CliError::Config(format!("{key}: {part} is not a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(CliError::Usage(format!("empty override key in {item:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_win_and_parse_types() {
        let cfg = RunConfig::resolve(
            None,
            &["train.learning_rate=0.003".into(), "seed=9".into(), "model.coord_init=random".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.learning_rate, 0.003);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.coord_init, laneseq_model::config::CoordInit::Random);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::resolve(None, &["train.lerning_rate=1".into()]).is_err());
        assert!(RunConfig::resolve(None, &["nonsense".into()]).is_err());
    }
}
