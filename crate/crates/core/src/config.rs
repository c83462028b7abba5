//! Run configuration: one JSON document covering scenes, model, training,
//! benchmarking and file locations. Every field has a default, so `{}` is a
//! complete configuration; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrainConfig};
use crate::scene::SceneConfig;
use crate::view::{DepthBins, VoxelGridSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Seed of the first generated scene; scene `i` uses `seed + i`.
    pub seed: u64,
    pub samples: usize,
    pub fov_deg: f64,
    pub camera_height: f64,
    pub boxes: [usize; 2],
    pub walls: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SceneConfig::default();
        Self { seed: 0, samples: 8, fov_deg: s.fov_deg, camera_height: s.camera_height, boxes: s.boxes, walls: s.walls }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub seed: u64,
    pub backbone_widths: [usize; 3],
    pub encoder: EncoderConfig,
    pub ema_alpha: f64,
    pub decode_iterations: usize,
    pub frames: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            seed: 0,
            backbone_widths: m.backbone_widths,
            encoder: m.encoder,
            ema_alpha: m.decoder.ema_alpha,
            decode_iterations: m.decoder.decode_iterations,
            frames: m.frames,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub reps: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { reps: 5, warmup: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Training log (TSV).
    pub log: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: VoxelGridSpec,
    /// Classes including the empty class (last index).
    pub num_classes: usize,
    pub depth_bins: DepthBins,
    pub cameras: usize,
    /// `[H, W]`.
    pub image_size: [usize; 2],
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SceneConfig::default();
        Self {
            grid: s.grid,
            num_classes: s.num_classes,
            depth_bins: s.depth_bins,
            cameras: s.cameras,
            image_size: s.image_size,
            data: DataConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            grid: self.grid.clone(),
            num_classes: self.num_classes,
            cameras: self.cameras,
            image_size: self.image_size,
            fov_deg: self.data.fov_deg,
            camera_height: self.data.camera_height,
            depth_bins: self.depth_bins.clone(),
            boxes: self.data.boxes,
            walls: self.data.walls,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            grid: self.grid.clone(),
            depth_bins: self.depth_bins.clone(),
            image_size: self.image_size,
            backbone_widths: self.model.backbone_widths,
            encoder: self.model.encoder.clone(),
            decoder: DecoderConfig {
                num_classes: self.num_classes,
                ema_alpha: self.model.ema_alpha,
                decode_iterations: self.model.decode_iterations,
            },
            frames: self.model.frames,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene_config().validate()?;
        self.model_config().validate()?;
        self.train.validate()?;
        if self.bench.reps == 0 {
            return Err(Error::Config("bench.reps must be positive".into()));
        }
        Ok(())
    }

    /// Parse and validate.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
