use serde::{Deserialize, Serialize};

use crate::deform::NetConfig;
use crate::error::{Error, Result};
use crate::gidm::SeedConfig;
use crate::losses::LossWeights;
use crate::raster::RenderConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Position rate at step 0, multiplied by the scene extent.
    pub position_init: f64,
    pub position_final: f64,
    /// Steps of the log-linear position decay; defaults to the run length.
    pub position_decay_steps: Option<u64>,
    pub color: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub net: f64,
    /// When set, the net rate decays log-linearly to this value.
    pub net_final: Option<f64>,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            position_decay_steps: None,
            color: 2.5e-3,
            opacity: 5e-2,
            scale: 5e-3,
            rotation: 1e-3,
            net: 1.5e-5,
            net_final: None,
        }
    }
}

/// `exp((1 - s) ln a + s ln b)` with `s = step / steps` clamped to `[0, 1]`.
pub fn log_linear(a: f64, b: f64, step: u64, steps: u64) -> f64 {
    if steps == 0 || a <= 0.0 || b <= 0.0 {
        return b;
    }
    let s = (step as f64 / steps as f64).clamp(0.0, 1.0);
    ((1.0 - s) * a.ln() + s * b.ln()).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    pub enabled: bool,
    pub start: u64,
    pub end: u64,
    pub interval: u64,
    /// Mean view-space positional gradient (NDC units) that triggers
    /// cloning or splitting.
    pub grad_threshold: f64,
    /// Largest scale, as a fraction of the scene extent, that is cloned
    /// rather than split.
    pub percent_dense: f64,
    pub split_samples: usize,
    pub split_scale_divisor: f64,
    pub prune_opacity: f64,
    pub max_gaussians: Option<usize>,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            start: 500,
            end: 15_000,
            interval: 100,
            grad_threshold: 2e-4,
            percent_dense: 0.01,
            split_samples: 2,
            split_scale_divisor: 1.6,
            prune_opacity: 0.005,
            max_gaussians: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub seed: u64,
    /// Iterations with the deformation forced to identity and frozen.
    pub warmup_iterations: u64,
    pub lr: LearningRates,
    pub densify: DensifyConfig,
    pub weights: LossWeights,
    pub net: NetConfig,
    pub init: SeedConfig,
    pub render: RenderConfig,
    pub neighbors: usize,
    pub graph_rebuild_interval: u64,
    pub checkpoint_interval: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 40_000,
            seed: 0,
            warmup_iterations: 1_000,
            lr: LearningRates::default(),
            densify: DensifyConfig::default(),
            weights: LossWeights::default(),
            net: NetConfig::default(),
            init: SeedConfig::default(),
            render: RenderConfig::default(),
            neighbors: 5,
            graph_rebuild_interval: 1_000,
            checkpoint_interval: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.neighbors == 0 {
            return bad("neighbors must be positive");
        }
        if self.net.width == 0 || self.net.hidden_layers == 0 {
            return bad("deformation net needs at least one hidden layer of positive width");
        }
        if let Some(s) = self.net.skip_layer {
            if s == 0 || s >= self.net.hidden_layers {
                return bad("skip layer must lie in 1..hidden_layers");
            }
        }
        if self.render.tile_size == 0 {
            return bad("tile size must be positive");
        }
        if self.densify.enabled && (self.densify.interval == 0 || self.densify.split_samples == 0) {
            return bad("densify interval and split samples must be positive");
        }
        if !(self.densify.split_scale_divisor > 0.0) {
            return bad("split scale divisor must be positive");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
