//! File-level run configuration shared by the command line, the server and
//! the acceptance suite.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::InversionConfig;
use crate::io::sha256_hex;
use crate::pipeline::TrainConfig;
use crate::scenes::SceneSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub records: usize,
    /// Samples per ray for ground-truth renders.
    pub samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { records: 200, samples: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Records used for part training.
    pub records: usize,
    /// Further records kept out of training for evaluation.
    pub heldout: usize,
    pub samples: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            records: 200,
            heldout: 50,
            samples: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub samples: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { samples: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Composites scored per sampling mode for the critic gap.
    pub critic_samples: usize,
    /// Composites per model for the whiteness statistic.
    pub white_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            critic_samples: 500,
            white_samples: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: String,
    pub distilled: String,
    pub models: String,
    pub baseline: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data: "data".into(),
            distilled: "distilled".into(),
            models: "models".into(),
            baseline: "baseline".into(),
        }
    }
}

fn default_scene() -> SceneSpec {
    SceneSpec::face_like(2).expect("two-part face scene")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub scene: SceneSpec,
    pub data: DataConfig,
    pub distill: DistillConfig,
    pub render: RenderConfig,
    pub inversion: InversionConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            scene: default_scene(),
            data: DataConfig::default(),
            distill: DistillConfig::default(),
            render: RenderConfig::default(),
            inversion: InversionConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("{}: {}", origin.display(), e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.scene.validate()?;
        self.inversion.validate()?;
        if self.data.records == 0 || self.data.samples < 2 || self.distill.records == 0 || self.distill.samples < 2 || self.render.samples < 2 {
            return Err(Error::Config("record counts must be positive and sample counts at least 2".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }
}
