use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maml::{InnerConfig, OuterConfig, TrainBundle};
use crate::metaopt::OptimizerSpec;
use crate::models::ModelSpec;
use crate::tasks::TaskDistribution;

/// Environment variable that replaces the configured seed list.
pub const SEED_ENV: &str = "METAGRAD_SEED";

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    #[default]
    Train,
    Ablate,
    Perturb,
    Collapse,
    Landscape,
}

/// A complete, serializable description of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub kind: ExperimentKind,
    pub model: ModelSpec,
    #[serde(default = "OptimizerSpec::identity")]
    pub optimizer: OptimizerSpec,
    pub tasks: TaskDistribution,
    pub inner: InnerConfig,
    #[serde(default)]
    pub eval_inner: Option<InnerConfig>,
    pub outer: OuterConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_eval_tasks")]
    pub eval_tasks: usize,
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub batched_population: bool,
    #[serde(default = "default_trajectory_every")]
    pub trajectory_every: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_name() -> String {
    "run".into()
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_eval_tasks() -> usize {
    100
}
fn default_trajectory_every() -> usize {
    10
}
fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    /// Applies `key=value` overrides. Keys are dotted paths into the
    /// config (`outer.beta`, `model.hidden`); values are TOML literals,
    /// with bare words read as strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root =
            toml::Value::try_from(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{item}` is not key=value")))?;
            set_path(&mut root, key.trim(), parse_literal(raw.trim()))?;
        }
        let cfg: ExperimentConfig = root
            .try_into()
            .map_err(|e| Error::config(format!("invalid override: {e}")))?;
        let back = toml::Value::try_from(&cfg).map_err(|e| Error::config(format!("cannot serialize config: {e}")))?;
        for item in overrides {
            let key = item.as_ref().split_once('=').map_or("", |(k, _)| k.trim());
            let known = key.split('.').try_fold(&back, |v, part| v.get(part)).is_some();
            if !known {
                return Err(Error::config(format!("unknown config key `{key}`")));
            }
        }
        Ok(cfg)
    }

    /// Replaces the seed list from `METAGRAD_SEED` when it is set.
    /// Accepts one seed or a comma-separated list.
    pub fn with_seed_env(&self, value: Option<&str>) -> Result<Self> {
        let Some(v) = value else {
            return Ok(self.clone());
        };
        let seeds = v
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::config(format!("{SEED_ENV} must be a list of integers, got `{v}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ExperimentConfig { seeds, ..self.clone() })
    }

    pub fn bundle(&self) -> TrainBundle {
        TrainBundle {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            tasks: self.tasks.clone(),
            inner: self.inner.clone(),
            eval_inner: self.eval_inner.clone(),
            outer: self.outer.clone(),
            eval_tasks: self.eval_tasks,
            eval_every: self.eval_every,
            batched_population: self.batched_population,
            trajectory_every: self.trajectory_every,
        }
    }

    pub fn eval_cfg(&self) -> &InnerConfig {
        self.eval_inner.as_ref().unwrap_or(&self.inner)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.eval_tasks == 0 {
            return Err(Error::config("eval_tasks must be positive"));
        }
        self.bundle().validate()
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override key `{key}`: `{part}` is not inside a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::config("empty override key"))
}

/// The shipped experiment configurations, by name.
pub const PRESETS: &[(&str, &str)] = &[
    ("logistic-lr", include_str!("../../configs/logistic-lr.toml")),
    ("logistic-linnet3", include_str!("../../configs/logistic-linnet3.toml")),
    ("logistic-kfo0", include_str!("../../configs/logistic-kfo0.toml")),
    (
        "regression-shallow",
        include_str!("../../configs/regression-shallow.toml"),
    ),
    ("regression-deep", include_str!("../../configs/regression-deep.toml")),
];

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
        let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
        Error::config(format!("unknown preset `{name}`; available: {}", names.join(", ")))
    })?;
    ExperimentConfig::from_toml_str(text)
}
