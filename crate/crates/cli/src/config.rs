//! Run configuration: one TOML file with dotted keys such as
//! `train.batch_size = 4`, plus command-line overrides.

use std::path::{Path, PathBuf};

use pgsgan_core::{CannyParams, DiscriminatorConfig, GeneratorConfig, PhantomConfig, PhasePlan};
use serde::{Deserialize, Serialize};

/// Which manifest split an evaluation reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    #[default]
    Test,
    Train,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub extractor_seed: u64,
    pub split: Split,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            extractor_seed: pgsgan_core::metrics::EXTRACTOR_SEED,
            split: Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset directory written by `gen-data` and read by `train` and `eval`.
    pub data: PathBuf,
    /// Run directory written by `train`.
    pub run: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            run: PathBuf::from("run"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: PhantomConfig,
    pub canny: CannyParams,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: PhasePlan,
    pub eval: EvalOptions,
    pub paths: Paths,
}

/// A problem with the configuration or its overrides. The CLI reports these
/// as usage errors.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config file {path} not found")]
    Missing { path: PathBuf },
    #[error("cannot read config file {path}: {source}")]
    Unreadable { path: PathBuf, source: std::io::Error },
    #[error("config file {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{flag}: {message}")]
    Override { flag: String, message: String },
    #[error("invalid configuration: {field}: {reason}")]
    Invalid { field: String, reason: String },
}

impl RunConfig {
    /// Reads `path` (or the defaults when `None`), applies `overrides` in
    /// order and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[Override]) -> Result<Self, ConfigError> {
        let table = match path {
            Some(p) => read_table(p)?,
            None => toml::Table::new(),
        };
        Self::apply(table, overrides)
    }

    /// Applies `overrides` on top of an existing configuration.
    pub fn with_overrides(&self, overrides: &[Override]) -> Result<Self, ConfigError> {
        match toml::Value::try_from(self).expect("run config serializes") {
            toml::Value::Table(t) => Self::apply(t, overrides),
            _ => unreachable!("run config is a table"),
        }
    }

    fn apply(mut table: toml::Table, overrides: &[Override]) -> Result<Self, ConfigError> {
        let mut config = from_table(&table).map_err(|message| ConfigError::Invalid {
            field: "config".into(),
            reason: message,
        })?;
        // Applied one at a time so a bad value is blamed on its own flag.
        for o in overrides {
            let bad = |message: String| ConfigError::Override {
                flag: o.flag.clone(),
                message,
            };
            set_dotted(&mut table, &o.key, o.value.clone()).map_err(bad)?;
            config = from_table(&table).map_err(bad)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let scoped = |section: &str, r: pgsgan_core::Result<()>| match r {
            Err(pgsgan_core::Error::Config { field, reason }) => Err(ConfigError::Invalid {
                field: if field.starts_with(&format!("{section}.")) {
                    field
                } else {
                    format!("{section}.{field}")
                },
                reason,
            }),
            Err(other) => Err(ConfigError::Invalid {
                field: section.into(),
                reason: other.to_string(),
            }),
            Ok(()) => Ok(()),
        };
        scoped("data", self.data.validate())?;
        scoped("canny", self.canny.validate())?;
        scoped("generator", self.generator.validate())?;
        scoped("discriminator", self.discriminator.validate())?;
        scoped("train", self.train.validate())?;
        let t = &self.train;
        let mismatch = |field: &str, reason: String| {
            Err(ConfigError::Invalid {
                field: field.into(),
                reason,
            })
        };
        if self.generator.resolution != t.base_resolution {
            return mismatch(
                "generator.resolution",
                format!("must equal train.base_resolution ({})", t.base_resolution),
            );
        }
        if self.discriminator.resolution != t.base_resolution {
            return mismatch(
                "discriminator.resolution",
                format!("must equal train.base_resolution ({})", t.base_resolution),
            );
        }
        if self.data.image_size != t.grown_resolution {
            return mismatch(
                "data.image_size",
                format!("must equal train.grown_resolution ({})", t.grown_resolution),
            );
        }
        if self.generator.input_channels != 3 {
            return mismatch("generator.input_channels", "labels have 3 channels".into());
        }
        if self.discriminator.input_channels != self.generator.input_channels + self.generator.output_channels {
            return mismatch(
                "discriminator.input_channels",
                "must be generator.input_channels + generator.output_channels".into(),
            );
        }
        Ok(())
    }

    /// The configuration as TOML text.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Every leaf key in dotted form with its value, in file order.
    pub fn dotted_keys(&self) -> Vec<(String, String)> {
        let value = toml::Value::try_from(self).expect("run config serializes");
        let mut out = Vec::new();
        flatten("", &value, &mut out);
        out
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn from_table(table: &toml::Table) -> Result<RunConfig, String> {
    toml::Value::Table(table.clone())
        .try_into()
        .map_err(|e: toml::de::Error| e.message().to_string())
}

fn read_table(path: &Path) -> Result<toml::Table, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            ConfigError::Missing { path: path.into() }
        } else {
            ConfigError::Unreadable {
                path: path.into(),
                source: e,
            }
        }
    })?;
    // Typed parse first so unknown keys and type errors point at a line.
    toml::from_str::<RunConfig>(&text).map_err(|e| ConfigError::Parse {
        path: path.into(),
        message: e.to_string().trim_end().to_string(),
    })?;
    text.parse::<toml::Table>().map_err(|e| ConfigError::Parse {
        path: path.into(),
        message: e.to_string(),
    })
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), String> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(format!("malformed key {key:?}"));
        }
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| format!("{part} in {key:?} is not a table"))?;
    }
    Err(format!("malformed key {key:?}"))
}

/// One `key = value` override together with the flag that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub flag: String,
    pub key: String,
    pub value: toml::Value,
}

impl Override {
    pub fn new(flag: &str, key: &str, value: impl Into<toml::Value>) -> Self {
        Self {
            flag: flag.into(),
            key: key.into(),
            value: value.into(),
        }
    }

    /// Parses `KEY=VALUE` where VALUE is a TOML value; bare words are
    /// taken as strings.
    pub fn parse_set(arg: &str) -> Result<Self, ConfigError> {
        let bad = |message: String| ConfigError::Override {
            flag: format!("--set {arg}"),
            message,
        };
        let (key, raw) = arg
            .split_once('=')
            .ok_or_else(|| bad("expected KEY=VALUE".into()))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        if key.is_empty() {
            return Err(bad("empty key".into()));
        }
        Ok(Self {
            flag: format!("--set {arg}"),
            key: key.into(),
            value,
        })
    }
}
