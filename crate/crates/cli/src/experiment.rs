//! Experiment files: one JSON document describing data, protocol and analysis.

use std::fs;
use std::path::{Path, PathBuf};

use densediff::eval::AblationAxis;
use densediff::numerics::RandomSource;
use densediff::scenes::DatasetSpec;
use densediff::train::ProtocolConfig;
use densediff::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const SCHEMA_VERSION: u32 = 1;

/// Protocol given as a named preset plus field overrides, or (without a
/// preset) as a complete configuration in `overrides`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub overrides: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub axis: AblationAxis,
    /// Defaults to the axis' standard values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Noise seeds for trajectory and uncertainty studies.
    pub n_seeds: usize,
    /// Held-out images analysed (at most the held-out count).
    pub images: usize,
    pub band_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationSection>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { n_seeds: 8, images: 32, band_size: 64, ablation: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub schema_version: u32,
    /// Every stream of the experiment derives from this seed.
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub held_out: DatasetSpec,
    pub protocol: ProtocolSection,
    #[serde(default)]
    pub eval: EvalSection,
    pub output_dir: PathBuf,
}

/// Seed of one consumer of the top-level seed.
pub fn fan_out(seed: u64, label: &str) -> u64 {
    RandomSource::new(seed, 0).derive_named(label).stream
}

/// An experiment with every derived value filled in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub file: ExperimentFile,
    pub dataset: DatasetSpec,
    pub held_out: DatasetSpec,
    pub protocol: ProtocolConfig,
    pub output_dir: PathBuf,
}

impl Resolved {
    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn held_out_dir(&self) -> PathBuf {
        self.output_dir.join("held_out")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("checkpoint.bin")
    }

    /// Writes the resolved configuration next to the outputs.
    pub fn write_copy(&self) -> Result<()> {
        fs::create_dir_all(&self.output_dir).map_err(|e| io(&self.output_dir, e))?;
        let path = self.output_dir.join("resolved_config.json");
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).map_err(|e| io(&path, e))
    }
}

pub fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn field_error(field: &str, e: impl std::fmt::Display) -> Error {
    Error::InvalidArgument(format!("{field}: {e}"))
}

impl ExperimentFile {
    pub fn parse(text: &str) -> Result<Self> {
        let exp: ExperimentFile = serde_json::from_str(text)?;
        if exp.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                exp.schema_version
            )));
        }
        Ok(exp)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
        Self::parse(&text)
    }

    /// Applies flag overrides, derives seeds and builds the protocol.
    /// Relative output paths are taken relative to `base_dir`.
    pub fn resolve(mut self, base_dir: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<Resolved> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.output_dir = o.to_path_buf();
        }
        let mut dataset = self.dataset.clone();
        dataset.seed = fan_out(self.seed, "train-data");
        dataset.validate().map_err(|e| field_error("dataset", e))?;
        let mut held_out = self.held_out.clone();
        held_out.seed = fan_out(self.seed, "held-out-data");
        held_out.validate().map_err(|e| field_error("held_out", e))?;

        let mut value = match &self.protocol.preset {
            Some(name) => {
                serde_json::to_value(ProtocolConfig::preset(name).map_err(|e| field_error("protocol.preset", e))?)?
            }
            None => Value::Object(Map::new()),
        };
        let obj = value.as_object_mut().expect("protocol serializes to an object");
        for (k, v) in &self.protocol.overrides {
            obj.insert(k.clone(), v.clone());
        }
        obj.insert("seed".into(), Value::from(fan_out(self.seed, "training")));
        let mut protocol: ProtocolConfig = serde_json::from_value(value).map_err(|e| field_error("protocol", e))?;
        protocol.net.variant = protocol.variant;
        protocol.net.total_steps = protocol.schedule.total_steps;
        protocol.validate().map_err(|e| field_error("protocol", e))?;
        if self.eval.n_seeds < 2 {
            return Err(field_error("eval.n_seeds", "must be >= 2"));
        }
        if !self.eval.band_size.is_power_of_two() || self.eval.band_size < dataset.height.max(dataset.width) {
            return Err(field_error("eval.band_size", "must be a power of two covering the image"));
        }
        let output_dir =
            if self.output_dir.is_absolute() { self.output_dir.clone() } else { base_dir.join(&self.output_dir) };
        Ok(Resolved { dataset, held_out, protocol, output_dir, file: self })
    }
}
