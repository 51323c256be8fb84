//! Experiment configuration: a TOML document with one section per concern,
//! `--set section.key=value` overrides and the `MIRU_DATA_DIR` variable.

use std::path::{Path, PathBuf};

use miru::cells::CoeffSpec;
use miru::continual::DilConfig;
use miru::network::ModelConfig;
use miru::optim::OptimConfig;
use miru::train::FitConfig;
use miru::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DATA_DIR_ENV: &str = "MIRU_DATA_DIR";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    /// One run per seed.
    pub seeds: Vec<u64>,
    /// Train on a seeded random subset of this many images.
    #[serde(default)]
    pub train_subset: Option<usize>,
    /// Train on a seeded random fraction of the images (continual runs).
    #[serde(default)]
    pub train_fraction: Option<f64>,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub precision: Precision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinualSection {
    pub tasks: usize,
    /// Items offered to the reservoir per mini-batch.
    pub store_k: usize,
    /// Items replayed per mini-batch; defaults to `store_k`.
    #[serde(default)]
    pub replay_k: Option<usize>,
    /// Reservoir size per task.
    pub capacity: usize,
    /// Seed of the pixel permutations; defaults to each run's seed.
    #[serde(default)]
    pub task_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub coefficients: CoeffSpec,
    pub optimizer: OptimConfig,
    pub training: TrainingSection,
    #[serde(default)]
    pub continual: Option<ContinualSection>,
    pub data: DataSection,
    pub output: OutputSection,
}

fn parse_value(raw: &str) -> toml::Value {
    // Bare words that are not valid TOML literals are taken as strings.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies one `a.b.c=value` override to a TOML document; `none` removes the
/// key (TOML has no null).
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override key {path:?} is malformed")));
    }
    let (last, parents) = keys.split_last().expect("split yields one key");
    let mut table = doc;
    for k in parents {
        let entry = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {path:?}: {k} is not a section")))?;
    }
    if raw.trim() == "none" {
        table.remove(*last);
    } else {
        table.insert(last.to_string(), parse_value(raw.trim()));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parses `text`, then applies the data-dir variable (if given) and the
    /// overrides in order, then validates.
    pub fn from_toml(text: &str, data_dir_env: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(dir) = data_dir_env {
            apply_override(&mut doc, &format!("data.dir={}", toml::Value::String(dir.to_string())))?;
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        if let Some(toml::Value::Table(c)) = doc.get("coefficients") {
            if c.get("mode").and_then(|m| m.as_str()) == Some("random") {
                if let Some(k) = c.keys().find(|k| *k != "mode") {
                    return Err(Error::Config(format!("coefficients: unknown field `{k}` for mode \"random\"")));
                }
            }
        }
        let cfg: ExperimentConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let env = std::env::var(DATA_DIR_ENV).ok();
        Self::from_toml(&text, env.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.coefficients.validate().map_err(|e| Error::Config(e.to_string()))?;
        let t = &self.training;
        if t.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be at least 1".into()));
        }
        if t.seeds.is_empty() {
            return Err(Error::Config("training.seeds must list at least one seed".into()));
        }
        if t.train_subset.is_some() && t.train_fraction.is_some() {
            return Err(Error::Config("set at most one of training.train_subset and training.train_fraction".into()));
        }
        if t.train_subset == Some(0) {
            return Err(Error::Config("training.train_subset must be at least 1".into()));
        }
        if let Some(f) = t.train_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("training.train_fraction = {f} outside (0, 1]")));
            }
        }
        if let Some(c) = t.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("training.clip_norm = {c} must be positive")));
            }
        }
        if let Some(c) = &self.continual {
            self.dil(self.training.seeds[0], c)?.validate()?;
        }
        Ok(())
    }

    pub fn fit(&self, seed: u64) -> FitConfig {
        FitConfig {
            model: self.model.clone(),
            coeffs: self.coefficients,
            optim: self.optimizer.clone(),
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            seed,
            clip_norm: self.training.clip_norm,
        }
    }

    pub fn continual(&self) -> Result<&ContinualSection> {
        self.continual
            .as_ref()
            .ok_or_else(|| Error::Config("this command needs a [continual] section".into()))
    }

    pub fn dil(&self, seed: u64, c: &ContinualSection) -> Result<DilConfig> {
        if self.training.train_subset.is_some() {
            return Err(Error::Config("continual runs take training.train_fraction, not train_subset".into()));
        }
        Ok(DilConfig {
            model: self.model.clone(),
            coeffs: self.coefficients,
            optim: self.optimizer.clone(),
            tasks: c.tasks,
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            store_k: c.store_k,
            replay_k: c.replay_k.unwrap_or(c.store_k),
            capacity: c.capacity,
            train_fraction: self.training.train_fraction.unwrap_or(1.0),
            seed,
            task_seed: c.task_seed,
            clip_norm: self.training.clip_norm,
        })
    }

    /// Canonical JSON of the resolved config.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn sha256(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
