use std::fs;
use std::path::Path;

use anyhow::{anyhow, Result};
use serde::{Deserialize, Serialize};
use vdpm::align::AlignOptions;
use vdpm::eval::{AblationOptions, DepthPoseOptions};
use vdpm::loss::LossConfig;
use vdpm::model::ModelConfig;
use vdpm::scenegen::GeneratorConfig;
use vdpm::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoViewOptions {
    pub margin: usize,
    pub trials: usize,
}

impl Default for TwoViewOptions {
    fn default() -> Self {
        Self { margin: 2, trials: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingOptions {
    pub frames: usize,
    pub spacing: usize,
    pub trials: usize,
}

impl Default for TrackingOptions {
    fn default() -> Self {
        Self {
            frames: 10,
            spacing: 2,
            trials: 100,
        }
    }
}

/// Snippets written by `gen` and `export-ply` when no snippet is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnippetOptions {
    pub frames: usize,
    pub spacing: usize,
}

impl Default for SnippetOptions {
    fn default() -> Self {
        Self { frames: 5, spacing: 2 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub generator: GeneratorConfig,
    pub snippets: SnippetOptions,
    pub two_view: TwoViewOptions,
    pub tracking: TrackingOptions,
    pub depth_pose: DepthPoseOptions,
    pub align: AlignOptions,
    pub ablation: AblationOptions,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let inner = e.into_inner();
            if key == "." {
                anyhow!("config {origin}: {inner}")
            } else {
                anyhow!("config {origin}: key `{key}`: {inner}")
            }
        })
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| anyhow!("config {}: {e}", p.display()))?;
                Self::parse(&text, &p.display().to_string())
            }
        }
    }

    /// Sets the run seed everywhere randomness is drawn.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self.depth_pose.seed = self.seed;
        self.ablation.seed = self.seed;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
