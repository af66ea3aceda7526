//! Experiment configuration.
//!
//! The file is TOML. A complete example:
//!
//! ```toml
//! output_dir = "runs/spiral"
//!
//! [dataset]
//! kind = "synthetic-spirals"
//! n_per_class = 500
//! noise = 0.02
//! seed = 7
//!
//! [architecture]
//! preset = "mlp-d6-w64"       # or: layers = ["fc1 dense in=2 out=8 act=relu", ...]
//! activation = "relu"
//! init_seed = 1
//!
//! [policy]
//! epochs = 60
//! batch_size = 32
//! lr_milestones = [40]
//! seed = 1
//! optimizer = { kind = "adam", lr = 0.003 }
//!
//! [easier]
//! delta = 0.02
//!
//! [augment]
//! normalize = false
//! ```
//!
//! Any value can be replaced from the command line with a dotted key,
//! e.g. `easier.delta=0.05` or `policy.optimizer.lr=0.01`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Augmentation, Dataset, DatasetSource};
use crate::easier::EasierConfig;
use crate::engine::{Network, NetworkSpec, TrainPolicy};
use crate::error::{Error, Result};
use crate::presets;
use crate::rectifiers::ActivationKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: String,
    pub dataset: DatasetSource,
    pub architecture: ArchitectureConfig,
    pub policy: TrainPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub easier: Option<EasierConfig>,
    #[serde(default)]
    pub augment: Augmentation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Layer lines in the network text format; the input shape comes from the dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<String>>,
    /// Rectifier used by presets.
    #[serde(default = "default_activation")]
    pub activation: String,
    pub init_seed: u64,
}

fn default_activation() -> String {
    "relu".into()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text`, then applies `key=value` overrides.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml_with(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        self.activation()?;
        match (&self.architecture.preset, &self.architecture.layers) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(Error::Config("architecture needs exactly one of `preset` or `layers`".into())),
        }
        if let Some(e) = &self.easier {
            if let Some(p) = &e.finetune_policy {
                p.validate()?;
            }
        }
        let files: Vec<&String> = match &self.dataset {
            DatasetSource::IdxFiles { images, labels, .. } => vec![images, labels],
            DatasetSource::Csv { path, .. } => vec![path],
            _ => vec![],
        };
        for f in files {
            if !Path::new(f).is_file() {
                return Err(Error::Config(format!("dataset file `{f}` does not exist")));
            }
        }
        Ok(())
    }

    pub fn activation(&self) -> Result<ActivationKind> {
        self.architecture.activation.parse().map_err(Error::Config)
    }

    pub fn easier(&self) -> Result<&EasierConfig> {
        self.easier
            .as_ref()
            .ok_or_else(|| Error::Config("the [easier] table is required for this command".into()))
    }

    pub fn network_spec(&self, data: &Dataset) -> Result<NetworkSpec> {
        let shape = data.train.sample_shape();
        let spec = match (&self.architecture.preset, &self.architecture.layers) {
            (Some(name), _) => presets::architecture(name, shape, data.train.classes, self.activation()?)?,
            (None, Some(lines)) => {
                let dims: Vec<String> = shape.iter().map(ToString::to_string).collect();
                let text = format!("input {}\n{}\n", dims.join("x"), lines.join("\n"));
                text.parse()?
            }
            (None, None) => return Err(Error::Config("architecture is empty".into())),
        };
        if spec.classes()? != data.train.classes {
            return Err(Error::Config(format!(
                "architecture has {} outputs but the dataset has {} classes",
                spec.classes()?,
                data.train.classes
            )));
        }
        Ok(spec)
    }

    /// Freshly initialized network for `data`.
    pub fn build_network(&self, data: &Dataset) -> Result<Network> {
        Network::new(self.network_spec(data)?, self.architecture.init_seed)
    }
}

/// Sets a dotted key in a TOML table. The value is read as TOML when it
/// parses (numbers, booleans, arrays, quoted strings) and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
