//! Run configuration: one TOML file drives data generation, training,
//! evaluation, and the inspection commands. Every field is validated on
//! load and unknown keys are rejected, so a config that parses is a config
//! the pipeline can run.

use crate::camera::CameraConfig;
use crate::fields::AggregationMode;
use crate::silhouette::DecoderWeights;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config invalid: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature channels C used by the encoder latent, the field output, and
    /// the rendered map.
    pub channels: usize,
    /// Input image side S (images are S x S x 3).
    pub image_size: usize,
    /// Side of the rendered feature map.
    pub feature_map_res: usize,
    /// Depth samples per ray.
    pub n_depth_samples: usize,
    /// Positional-encoding levels for sample positions (inclusive upper
    /// frequency index).
    pub levels_x: usize,
    /// Positional-encoding levels for view directions.
    pub levels_r: usize,
    /// Hidden width of the field MLP.
    pub field_width: usize,
    /// Hidden width of the parameter regressor.
    pub regressor_hidden: usize,
    /// Refinement iterations of the regressor.
    pub regressor_iterations: usize,
    /// Foreground attention pooling on the encoder grid (plain average when
    /// off).
    pub attention: bool,
    /// How the rendered map condenses into the regressor input.
    pub aggregation: AggregationMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 32,
            image_size: 32,
            feature_map_res: 4,
            n_depth_samples: 32,
            levels_x: 10,
            levels_r: 4,
            field_width: 64,
            regressor_hidden: 64,
            regressor_iterations: 3,
            attention: true,
            aggregation: AggregationMode::Conv,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_2d: f64,
    pub lambda_3d: f64,
    pub lambda_pose: f64,
    pub lambda_shape: f64,
    pub lambda_silhouette: f64,
    /// Arbitrary-azimuth supervision on 3d-labeled examples.
    pub imagination: bool,
    /// Cross-view agreement on 2d-only examples.
    pub consistency: bool,
    /// Silhouette guidance inside the imagination term (training only).
    pub silhouette: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_2d: 300.0,
            lambda_3d: 300.0,
            lambda_pose: 60.0,
            lambda_shape: 0.06,
            lambda_silhouette: 30.0,
            imagination: true,
            consistency: true,
            silhouette: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 5e-5, batch_size: 16, epochs: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_examples: usize,
    /// Fraction of examples carrying 3d labels (the rest are 2d-only).
    pub fraction_3d: f64,
    /// Half-width of the uniform per-joint pose perturbation (radians).
    pub pose_spread: f64,
    /// Half-width of the uniform shape coefficient draw.
    pub shape_spread: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { n_examples: 2048, fraction_3d: 0.5, pose_spread: 0.6, shape_spread: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub camera: CameraConfig,
    pub model: ModelConfig,
    pub losses: LossConfig,
    pub training: TrainConfig,
    pub dataset: DatasetConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.camera.validate().map_err(ConfigError::Invalid)?;
        let m = &self.model;
        if m.channels < 1 || m.field_width < 1 || m.regressor_hidden < 1 {
            return bad("model widths must be at least 1".into());
        }
        if m.image_size < 4 {
            return bad(format!("image_size {} too small; need at least 4", m.image_size));
        }
        if !matches!(m.feature_map_res, 1 | 2 | 4 | 6) {
            return bad(format!("feature_map_res {} not in {{1, 2, 4, 6}}", m.feature_map_res));
        }
        if m.n_depth_samples < 1 {
            return bad("n_depth_samples must be at least 1".into());
        }
        if m.regressor_iterations < 1 {
            return bad("regressor_iterations must be at least 1".into());
        }
        let l = &self.losses;
        for (name, v) in [
            ("lambda_2d", l.lambda_2d),
            ("lambda_3d", l.lambda_3d),
            ("lambda_pose", l.lambda_pose),
            ("lambda_shape", l.lambda_shape),
            ("lambda_silhouette", l.lambda_silhouette),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if l.imagination && l.silhouette && !DecoderWeights::<f64>::supported_res(m.feature_map_res) {
            return bad(format!(
                "silhouette guidance needs a feature_map_res that doubles to {}; {} does not",
                crate::silhouette::SILHOUETTE_RES,
                m.feature_map_res
            ));
        }
        let t = &self.training;
        if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", t.learning_rate));
        }
        if t.batch_size < 1 || t.epochs < 1 {
            return bad("batch_size and epochs must be at least 1".into());
        }
        let d = &self.dataset;
        if d.n_examples < 1 {
            return bad("n_examples must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&d.fraction_3d) {
            return bad(format!("fraction_3d must lie in [0,1], got {}", d.fraction_3d));
        }
        if !(d.pose_spread.is_finite() && d.pose_spread >= 0.0) || !(d.shape_spread.is_finite() && d.shape_spread >= 0.0) {
            return bad("dataset spreads must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
