//! Declarative run configuration, loaded from TOML. Every field has a
//! default, so a config file only needs the values it changes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Per-point feature width `C`.
    pub feature_dim: usize,
    /// Ball-query radii of the three set-abstraction layers (m).
    pub sa_radii: [f64; 3],
    /// Neighbours gathered per ball query.
    pub group_size: usize,
    /// Points produced by the shape generator.
    pub shape_points: usize,
    /// Neighbours in the EdgeConv feature-space graph.
    pub edge_k: usize,
    /// Voxel edge length (m).
    pub voxel_size: f64,
    /// Seed of the weight initializer.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            sa_radii: [0.3, 0.5, 0.7],
            group_size: 16,
            shape_points: 2048,
            edge_k: 8,
            voxel_size: 0.3,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_beta: f64,
    /// Heatmap probabilities are clamped to `[eps, 1 − eps]` before logs.
    pub heatmap_eps: f64,
    /// Half-width `r` (cells) of the supervised offset square.
    pub offset_radius: usize,
    pub lambda_shape: f64,
    pub lambda_center: f64,
    pub lambda_z: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_alpha: 2.0,
            focal_beta: 4.0,
            heatmap_eps: 1e-6,
            offset_radius: 2,
            lambda_shape: 1e-6,
            lambda_center: 1.0,
            lambda_z: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateScheme {
    FirstGt,
    PreviousResult,
    FirstAndPrevious,
    AllPrevious,
}

impl TemplateScheme {
    pub const ALL: [TemplateScheme; 4] = [
        TemplateScheme::FirstGt,
        TemplateScheme::PreviousResult,
        TemplateScheme::FirstAndPrevious,
        TemplateScheme::AllPrevious,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateScheme::FirstGt => "first_gt",
            TemplateScheme::PreviousResult => "previous_result",
            TemplateScheme::FirstAndPrevious => "first_and_previous",
            TemplateScheme::AllPrevious => "all_previous",
        }
    }
}

impl std::str::FromStr for TemplateScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown template scheme `{s}` (expected one of first_gt, previous_result, first_and_previous, all_previous)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackConfig {
    pub scheme: TemplateScheme,
    /// Template budget `N`.
    pub template_points: usize,
    /// Search-area budget `M`.
    pub search_points: usize,
    /// Search footprint enlargement per side in x and y (m).
    pub search_margin: f64,
    /// Half-height of the search region around the reference center (m).
    pub z_half_extent: f64,
    /// Training-time jitter bounds of the reference box.
    pub offset_xy: f64,
    pub offset_z: f64,
    pub offset_yaw_deg: f64,
    pub seed: u64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            scheme: TemplateScheme::FirstAndPrevious,
            template_points: 512,
            search_points: 1024,
            search_margin: 2.0,
            z_half_extent: 2.0,
            offset_xy: 0.3,
            offset_z: 0.1,
            offset_yaw_deg: 5.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplicative decay applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    /// Optional hard cap on optimizer steps.
    pub max_iterations: Option<usize>,
    /// Draw a fresh jitter for every visit of a sample instead of fixing
    /// one per sample.
    pub resample_each_epoch: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_decay: 0.2,
            decay_every: 6,
            epochs: 20,
            max_iterations: None,
            resample_each_epoch: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Step-decayed learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let period = self.decay_every.max(1);
        self.lr * self.lr_decay.powi((epoch / period) as i32)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub track: TrackConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let t = &self.track;
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if m.feature_dim == 0 || m.group_size == 0 || m.shape_points == 0 || m.edge_k == 0 {
            return bad("model widths and counts must be positive");
        }
        if !(m.voxel_size > 0.0) || m.sa_radii.iter().any(|r| !(*r > 0.0)) {
            return bad("voxel size and radii must be positive");
        }
        if t.template_points < 8 || t.search_points < 8 {
            return bad("point budgets must be at least 8");
        }
        if !(t.search_margin >= 0.0) || !(t.z_half_extent > 0.0) {
            return bad("search margin must be non-negative and z extent positive");
        }
        if t.offset_xy < 0.0 || t.offset_z < 0.0 || t.offset_yaw_deg < 0.0 {
            return bad("augmentation bounds must be non-negative");
        }
        Ok(())
    }
}
