//! Run configuration shared by every subcommand.
//!
//! Files are TOML; `print-config` emits them as flat dotted keys, which
//! parse back to the same values.

use std::fs;
use std::path::Path;

use octflow::dataset::{AugmentConfig, BaseMapParams};
use octflow::estimator::{ClassicalParams, ConvConfig, PipelineModel, StageKind, DEFAULT_LEVELS};
use octflow::trainer::{EvalConfig, TrainConfig};
use octflow::{Error, Result, Scalar};
use serde::{Deserialize, Serialize};

pub const RUN_CONFIG_FILE: &str = "run.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub bases: usize,
    pub width: usize,
    pub height: usize,
    /// Seeds the base maps; motion draws use `augment.seed`.
    pub base_seed: u64,
    pub base: BaseMapParams,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            bases: 4,
            width: 512,
            height: 512,
            base_seed: 0,
            base: BaseMapParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: StageKind,
    pub levels: usize,
    pub seed: u64,
    pub classical: ClassicalParams,
    pub conv: ConvConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: StageKind::Classical,
            levels: DEFAULT_LEVELS,
            seed: 0,
            classical: ClassicalParams::default(),
            conv: ConvConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn build<T: Scalar>(&self) -> Result<PipelineModel<T>> {
        match self.kind {
            StageKind::Classical => PipelineModel::classical(self.levels, self.classical),
            StageKind::Convolutional => PipelineModel::convolutional(self.levels, self.conv, self.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Rays of input volumes whose maximum is below this are invalid.
    pub min_intensity: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { min_intensity: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub width: usize,
    pub height: usize,
    pub runs: usize,
    pub warmup: usize,
    pub budget_ms: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            runs: 100,
            warmup: 5,
            budget_ms: 40.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub infer: InferConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.train.validate()?;
        self.model.conv.validate()?;
        self.model.classical.validate()?;
        if self.gen.bases < 3 {
            return Err(Error::Config("gen.bases must be >= 3".into()));
        }
        if self.model.levels == 0 {
            return Err(Error::Config("model.levels must be >= 1".into()));
        }
        if self.bench.runs == 0 {
            return Err(Error::Config("bench.runs must be >= 1".into()));
        }
        if !(self.bench.budget_ms.is_finite() && self.bench.budget_ms >= 0.0) {
            return Err(Error::Config("bench.budget_ms must be >= 0".into()));
        }
        if !(self.eval.voxel_pitch_um.is_finite() && self.eval.voxel_pitch_um > 0.0) {
            return Err(Error::Config("eval.voxel_pitch_um must be > 0".into()));
        }
        Ok(())
    }

    /// Flat `section.key = value` lines.
    pub fn to_dotted(&self) -> Result<String> {
        let value = toml::Value::try_from(self).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = String::new();
        flatten("", &value, &mut out);
        Ok(out)
    }

    /// Writes the dotted form to `dir/run.toml`.
    pub fn write_into(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(RUN_CONFIG_FILE);
        fs::write(&path, self.to_dotted()?).map_err(|e| Error::Io { path, source: e })
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut String) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        leaf => {
            out.push_str(&format!("{prefix} = {leaf}\n"));
        }
    }
}
