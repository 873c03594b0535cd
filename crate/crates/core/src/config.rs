//! Run configuration: one JSON file plus `key.path=value` overrides.
//!
//! Every section rejects unknown keys; errors name the full key path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use crate::diffusion::TrainConfig;
use crate::diffusion::{NoiseSchedule, PrecisionPolicy, ScheduleConfig};
use crate::error::{Error, Result};
use crate::eval::DatasetConfig;
use crate::numerics::PrecisionFormat;
use crate::qat::QatConfig;
use crate::unet::UnetConfig;

/// Sampling steps and which format runs at the boundary and middle steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub steps: usize,
    pub boundary: usize,
    pub high: PrecisionFormat,
    pub low: PrecisionFormat,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { steps: 50, boundary: 3, high: PrecisionFormat::Bf16, low: PrecisionFormat::Int8 }
    }
}

impl PolicyConfig {
    pub fn policy(&self) -> Result<PrecisionPolicy> {
        PrecisionPolicy::new(self.steps, self.boundary, self.high, self.low)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Generated images per configuration and seed.
    pub images: usize,
    pub seeds: Vec<u64>,
    /// Calibration batches for the post-training-quantization baseline.
    pub ptq_batches: usize,
    pub ptq_seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { images: 500, seeds: vec![0, 1, 2, 3, 4], ptq_batches: 8, ptq_seed: 3 }
    }
}

/// Latency benchmark on a wider network than the toy model, so that GEMMs
/// dominate the step time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub unet: UnetConfig,
    pub warmup: usize,
    pub repeats: usize,
    /// Images per timed sample.
    pub batch: usize,
    /// Repeats of each kernel micro-benchmark.
    pub kernel_repeats: usize,
    /// `[N, C, H, W]` of the GroupNorm micro-benchmark.
    pub groupnorm_shape: [usize; 4],
    pub groupnorm_groups: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            unet: UnetConfig { base_channels: 64, groups: 4, ..UnetConfig::default() },
            warmup: 3,
            repeats: 20,
            batch: 1,
            kernel_repeats: 20,
            groupnorm_shape: [8, 64, 128, 128],
            groupnorm_groups: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Worker threads; `None` uses every logical core.
    pub threads: Option<usize>,
    pub unet: UnetConfig,
    pub schedule: ScheduleConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub qat: QatConfig,
    pub policy: PolicyConfig,
    pub eval: EvalSettings,
    pub bench: BenchSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            threads: None,
            unet: UnetConfig::default(),
            schedule: ScheduleConfig::default(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            qat: QatConfig::default(),
            policy: PolicyConfig::default(),
            eval: EvalSettings::default(),
            bench: BenchSettings::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `overrides` of the form
    /// `a.b.c=value`, then deserializes and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: invalid JSON: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let config: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.bench.unet.validate()?;
        NoiseSchedule::new(&self.schedule).map_err(as_config)?;
        self.qat.validate().map_err(as_config)?;
        self.policy.policy().map_err(as_config)?;
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if self.dataset.image_size != self.unet.image_size {
            return Err(Error::Config(format!(
                "dataset.image_size {} differs from unet.image_size {}",
                self.dataset.image_size, self.unet.image_size
            )));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.eval.images < 2 || self.eval.seeds.is_empty() || self.eval.ptq_batches == 0 {
            return Err(Error::Config("eval needs images >= 2, at least one seed, and ptq_batches >= 1".into()));
        }
        if self.bench.repeats == 0 || self.bench.batch == 0 || self.bench.kernel_repeats == 0 {
            return Err(Error::Config("bench repeats, batch and kernel_repeats must be >= 1".into()));
        }
        Ok(())
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// Sets `key.path=value` inside a JSON object. The value is parsed as JSON
/// when possible and taken as a plain string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` has an empty component")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(Error::Config(format!("override `{key}`: `{}` is not an object", parts[..i].join("."))));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one component")
}
