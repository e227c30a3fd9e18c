//! Flat JSON run configuration.
//!
//! Every tunable is a top-level key; omitted keys take the defaults below
//! and unknown keys are rejected by name, all of them at once, so a typo
//! cannot silently fall back to a default.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use cov3d_core::augment::{AugmentConfig, JitterRange, ResizedCropRange};
use cov3d_core::model::ModelConfig;
use cov3d_core::optim::OptimHyper;
use cov3d_core::train::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Model preset: "tiny3d" or "resnest50_3d".
    pub model: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Master switch for the random train-time stages (crop, rotation,
    /// jitter). The depth crop applies regardless, since it sets the input
    /// depth.
    pub augment: bool,
    /// 0 disables depth cropping.
    pub depth_crop: usize,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub crop_aspect_min: f64,
    pub crop_aspect_max: f64,
    pub rotation_deg: f64,
    pub brightness_delta: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub eval_depth: usize,
    pub resize_depth: usize,
    pub resize_height: usize,
    pub resize_width: usize,
    pub prune: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: "resnest50_3d".to_string(),
            epochs: 100,
            batch_size: 2,
            accum_steps: 1,
            seed: 0,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            augment: true,
            depth_crop: 64,
            crop_scale_min: 0.7,
            crop_scale_max: 1.0,
            crop_aspect_min: 0.75,
            crop_aspect_max: 4.0 / 3.0,
            rotation_deg: 10.0,
            brightness_delta: 0.1,
            contrast_min: 0.8,
            contrast_max: 1.2,
            eval_depth: 64,
            resize_depth: 128,
            resize_height: 256,
            resize_width: 256,
            prune: true,
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "model",
    "epochs",
    "batch_size",
    "accum_steps",
    "seed",
    "learning_rate",
    "weight_decay",
    "beta1",
    "beta2",
    "epsilon",
    "augment",
    "depth_crop",
    "crop_scale_min",
    "crop_scale_max",
    "crop_aspect_min",
    "crop_aspect_max",
    "rotation_deg",
    "brightness_delta",
    "contrast_min",
    "contrast_max",
    "eval_depth",
    "resize_depth",
    "resize_height",
    "resize_width",
    "prune",
];

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Usage(msg) => CliError::Usage(format!("config {}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::Usage(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| CliError::Usage("top level must be a JSON object".to_string()))?;

        let unknown: Vec<&str> = obj
            .keys()
            .map(String::as_str)
            .filter(|k| !KNOWN_KEYS.contains(k))
            .collect();
        if !unknown.is_empty() {
            let mut msg = format!("unknown config keys: {}", unknown.join(", "));
            write!(msg, "; known keys: {}", KNOWN_KEYS.join(", ")).unwrap();
            return Err(CliError::Usage(msg));
        }

        let mut merged = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        merged
            .as_object_mut()
            .expect("defaults are an object")
            .extend(obj.clone());
        let cfg: RunConfig =
            serde_json::from_value(merged).map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.model_config()?;
        cfg.train_config()
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        match self.model.as_str() {
            "tiny3d" => Ok(ModelConfig::tiny3d()),
            "resnest50_3d" => Ok(ModelConfig::resnest50_3d()),
            other => Err(CliError::Usage(format!(
                "unknown model preset {other:?}; available: tiny3d, resnest50_3d"
            ))),
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        let depth_crop_to = (self.depth_crop > 0).then_some(self.depth_crop);
        if self.augment {
            AugmentConfig {
                resized_crop: Some(ResizedCropRange {
                    scale: (self.crop_scale_min, self.crop_scale_max),
                    aspect: (self.crop_aspect_min, self.crop_aspect_max),
                }),
                depth_crop_to,
                rotation_deg: Some(self.rotation_deg),
                jitter: Some(JitterRange {
                    brightness_delta: self.brightness_delta,
                    contrast_factor: (self.contrast_min, self.contrast_max),
                }),
            }
        } else {
            AugmentConfig { depth_crop_to, ..AugmentConfig::disabled() }
        }
    }

    pub fn hyper(&self) -> OptimHyper {
        OptimHyper {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            augment: self.augment_config(),
            hyper: self.hyper(),
            accum_steps: self.accum_steps,
            eval_depth: self.eval_depth,
        }
    }

    pub fn resize_target(&self) -> (usize, usize, usize) {
        (self.resize_depth, self.resize_height, self.resize_width)
    }
}
