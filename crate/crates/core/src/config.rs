//! Run configuration: named presets overlaid with TOML keys.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hot::{HotConfig, Normalization};
use crate::pagcn::NetworkConfig;
use crate::pose_io::{Protocol, Role};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Casiab,
    Oumvlp,
    Gait3d,
    Grew,
    Toy,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "casiab" => Ok(Preset::Casiab),
            "oumvlp" => Ok(Preset::Oumvlp),
            "gait3d" => Ok(Preset::Gait3d),
            "grew" => Ok(Preset::Grew),
            "toy" => Ok(Preset::Toy),
            _ => Err(Error::Config(format!(
                "unknown preset `{s}` (expected casiab, oumvlp, gait3d, grew or toy)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest roles used for training.
    pub train_roles: Vec<Role>,
    pub protocol: Protocol,
    pub metric: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub normalization: Normalization,
    pub hot: HotConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        // Class count 0 means "take it from the training data".
        let (network, train, protocol) = match preset {
            Preset::Casiab => (NetworkConfig::casiab(0), TrainConfig::casiab(), Protocol::Casiab),
            Preset::Gait3d => (NetworkConfig::casiab(0), TrainConfig::gait3d(), Protocol::Gait3d),
            Preset::Oumvlp => (NetworkConfig::oumvlp(0), TrainConfig::oumvlp(), Protocol::Oumvlp),
            Preset::Grew => (NetworkConfig::oumvlp(0), TrainConfig::grew(), Protocol::Grew),
            Preset::Toy => (NetworkConfig::toy(0), TrainConfig::toy(), Protocol::Simple),
        };
        let train_roles = if preset == Preset::Toy {
            vec![Role::Gallery]
        } else {
            vec![Role::Train]
        };
        Self {
            preset,
            seed: 0,
            normalization: Normalization::Hot,
            hot: HotConfig::default(),
            network,
            train,
            data: DataConfig {
                train_roles,
                protocol,
                metric: Metric::Euclidean,
            },
        }
    }

    /// Parse TOML text over a preset. The preset is `preset_override` if
    /// given, else the file's `preset` key, else `toy`.
    pub fn from_toml(text: &str, preset_override: Option<Preset>) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let preset = match (preset_override, user.get("preset")) {
            (Some(p), _) => p,
            (None, Some(toml::Value::String(s))) => s.parse()?,
            (None, Some(_)) => return Err(Error::Config("`preset` must be a string".into())),
            (None, None) => Preset::Toy,
        };
        let mut base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, user);
        base.insert("preset".into(), toml::Value::try_from(preset).unwrap());
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset_override: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("{}: not found", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::from_toml(&text, preset_override)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.hot.validate()?;
        self.train.validate()?;
        if self.data.train_roles.is_empty() {
            return Err(Error::Config("data.train_roles is empty".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
