use std::path::Path;

use serde::{Deserialize, Serialize};

use wbc_core::config::StageConfig;
use wbc_core::data::SynthConfig;
use wbc_core::train::TrainConfig;
use wbc_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub folds: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { folds: 4 }
    }
}

/// Contents of a `--config` file. Every section is optional; command-line
/// flags override it. `train.seed` is always replaced by the global seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub stage: StageConfig,
    pub train: TrainConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Resolved settings echoed into the output directory.
pub struct Echo {
    table: toml::Table,
}

impl Echo {
    pub fn new(command: &str, seed: u64) -> Self {
        let mut table = toml::Table::new();
        table.insert("command".into(), command.into());
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
        Self { table }
    }

    pub fn input(mut self, key: &str, path: &Path) -> Self {
        self.table
            .insert(key.into(), path.display().to_string().into());
        self
    }

    pub fn value(mut self, key: &str, v: impl Into<toml::Value>) -> Self {
        self.table.insert(key.into(), v.into());
        self
    }

    pub fn section<T: Serialize>(mut self, key: &str, v: &T) -> Result<Self> {
        let value =
            toml::Value::try_from(v).map_err(|e| Error::Config(format!("echoing [{key}]: {e}")))?;
        self.table.insert(key.into(), value);
        Ok(self)
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        std::fs::create_dir_all(out)?;
        let text = toml::to_string(&self.table)
            .map_err(|e| Error::Config(format!("echoing config: {e}")))?;
        std::fs::write(out.join("config.toml"), text)?;
        Ok(())
    }
}
