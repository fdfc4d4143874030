//! Shared data model: poses, boxes, detections, tracks and engine configuration.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::nn::Tensor;
use crate::spapde::HeatmapSet;

/// Confidence above which a keypoint counts as visible even without an explicit flag.
pub const VISIBILITY_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    #[serde(default)]
    pub visible: bool,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, confidence: f64, visible: bool) -> Self {
        Self {
            x,
            y,
            confidence,
            visible,
        }
    }

    pub fn visible_at(x: f64, y: f64) -> Self {
        Self::new(x, y, 1.0, true)
    }

    pub fn missing() -> Self {
        Self::new(0.0, 0.0, 0.0, false)
    }

    pub fn is_visible(&self) -> bool {
        self.visible || self.confidence > VISIBILITY_THRESHOLD
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub keypoints: Vec<Keypoint>,
}

impl Pose {
    pub fn new(keypoints: Vec<Keypoint>) -> Self {
        Self { keypoints }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn num_visible(&self) -> usize {
        self.keypoints.iter().filter(|k| k.is_visible()).count()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Pose {
        Pose::new(
            self.keypoints
                .iter()
                .map(|k| Keypoint { x: k.x + dx, y: k.y + dy, ..*k })
                .collect(),
        )
    }

    /// Checks coordinate finiteness, confidence range and that at least one keypoint is visible.
    pub fn validate(&self) -> Result<(), String> {
        for (i, k) in self.keypoints.iter().enumerate() {
            if !k.x.is_finite() || !k.y.is_finite() {
                return Err(format!("keypoint {i} has non-finite coordinates"));
            }
            if !(0.0..=1.0).contains(&k.confidence) {
                return Err(format!("keypoint {i} confidence {} outside [0, 1]", k.confidence));
            }
        }
        if self.num_visible() == 0 {
            return Err("pose has no visible keypoint".into());
        }
        Ok(())
    }
}

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BoundingBox {
        BoundingBox::new(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)
    }

    /// Tight box around the visible keypoints, padded by `pad` pixels.
    pub fn around_pose(pose: &Pose, pad: f64) -> Option<BoundingBox> {
        let vis: Vec<_> = pose.keypoints.iter().filter(|k| k.is_visible()).collect();
        if vis.is_empty() {
            return None;
        }
        let x_min = vis.iter().map(|k| k.x).fold(f64::INFINITY, f64::min);
        let x_max = vis.iter().map(|k| k.x).fold(f64::NEG_INFINITY, f64::max);
        let y_min = vis.iter().map(|k| k.y).fold(f64::INFINITY, f64::min);
        let y_max = vis.iter().map(|k| k.y).fold(f64::NEG_INFINITY, f64::max);
        Some(BoundingBox::new(x_min - pad, y_min - pad, x_max + pad, y_max + pad))
    }
}

/// One person hypothesis in a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub pose: Pose,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heatmaps: Option<HeatmapSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub appearance: Option<Vec<f64>>,
    /// RGB crop (3×H×W) for the toy backbone path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<Tensor>,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, pose: Pose, score: f64) -> Self {
        Self {
            bbox,
            pose,
            heatmaps: None,
            appearance: None,
            crop: None,
            score,
        }
    }

    pub fn with_appearance(mut self, appearance: Vec<f64>) -> Self {
        self.appearance = Some(appearance);
        self
    }

    pub fn validate(&self, cfg: &EngineConfig) -> Result<(), String> {
        if !self.bbox.is_valid() {
            return Err("box must satisfy x_min < x_max and y_min < y_max".into());
        }
        if self.pose.len() != cfg.num_keypoints {
            return Err(format!(
                "pose has {} keypoints, config expects {}",
                self.pose.len(),
                cfg.num_keypoints
            ));
        }
        self.pose.validate()?;
        if !(0.0..=1.0).contains(&self.score) {
            return Err(format!("score {} outside [0, 1]", self.score));
        }
        if let Some(app) = &self.appearance {
            if app.len() != cfg.embed_dim {
                return Err(format!(
                    "appearance has length {}, expected {}",
                    app.len(),
                    cfg.embed_dim
                ));
            }
            if app.iter().any(|v| !v.is_finite()) {
                return Err("appearance has non-finite entries".into());
            }
        }
        if let Some(h) = &self.heatmaps {
            let shape = h.grid.shape();
            if shape != [cfg.num_keypoints, cfg.crop_height, cfg.crop_width] {
                return Err(format!("heatmap grid {shape:?} does not match config"));
            }
        }
        Ok(())
    }
}

pub type TrackId = u64;

/// A persistent identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: TrackId,
    pub embedding: Vec<f64>,
    pub last_pose: Pose,
    pub last_box: BoundingBox,
    pub frames_since_match: usize,
    pub active: bool,
}

/// How track poses/boxes are carried into the current frame before computing edge features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "name", rename_all = "snake_case")]
pub enum WarpMode {
    Identity,
    Pluggable(String),
}

/// Input to the per-stage edge embedding update network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeUpdate {
    /// Gate the appearance and edge logits with alpha before the softmax.
    GatedLogits,
    /// Use the fused attention probabilities without the null column.
    GatedWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub embed_dim: usize,
    pub edge_dim: usize,
    pub num_keypoints: usize,
    pub encoder_stages: usize,
    pub decoder_stages: usize,
    pub heads: usize,
    pub alpha: f64,
    pub tau_dup: f64,
    pub tau_age: usize,
    pub ffn_hidden: usize,
    /// Hidden width of the track and new-track embedding heads.
    pub head_hidden: usize,
    /// Hidden width of the edge embedding head and of the edge update networks.
    pub edge_hidden: usize,
    /// Gaussian std in pixels of a 256-pixel-high reference crop.
    pub heatmap_kernel_width: f64,
    pub crop_height: usize,
    pub crop_width: usize,
    pub oks_kappas: Vec<f64>,
    pub warp_mode: WarpMode,
    pub edge_update: EdgeUpdate,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            embed_dim: 256,
            edge_dim: 256,
            num_keypoints: 15,
            encoder_stages: 2,
            decoder_stages: 2,
            heads: 1,
            alpha: 0.3,
            tau_dup: 0.4,
            tau_age: 60,
            ffn_hidden: 1024,
            head_hidden: 512,
            edge_hidden: 256,
            heatmap_kernel_width: 10.0,
            crop_height: 64,
            crop_width: 32,
            oks_kappas: default_kappas(15),
            warp_mode: WarpMode::Identity,
            edge_update: EdgeUpdate::GatedLogits,
        }
    }
}

impl EngineConfig {
    /// Desk-scale configuration used by tests and toy training.
    pub fn small() -> Self {
        Self {
            embed_dim: 16,
            edge_dim: 16,
            ffn_hidden: 32,
            head_hidden: 32,
            edge_hidden: 16,
            ..Self::default()
        }
    }

    pub fn with_keypoints(mut self, k: usize) -> Self {
        self.num_keypoints = k;
        self.oks_kappas = default_kappas(k);
        self
    }

    /// Heatmap std scaled from the 256-pixel reference crop to the configured crop height.
    pub fn heatmap_sigma(&self) -> f64 {
        self.heatmap_kernel_width * self.crop_height as f64 / 256.0
    }
}

/// COCO per-keypoint sigmas (17-keypoint order).
pub const COCO_SIGMAS: [f64; 17] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
];

/// Per-keypoint OKS constants. The COCO kernel uses kappa = 2 * sigma.
///
/// K = 17 is the COCO skeleton. K = 15 is the PoseTrack skeleton (nose, head bottom, head top,
/// then the COCO body joints without ears); head bottom/top take the eye slots' sigmas.
/// Any other K falls back to a uniform sigma of 0.07.
pub fn default_kappas(k: usize) -> Vec<f64> {
    let sigmas: Vec<f64> = match k {
        17 => COCO_SIGMAS.to_vec(),
        15 => COCO_SIGMAS[..3]
            .iter()
            .chain(COCO_SIGMAS[5..].iter())
            .copied()
            .collect(),
        _ => vec![0.07; k],
    };
    sigmas.into_iter().map(|s| 2.0 * s).collect()
}

/// Returns the config unchanged when every invariant holds, otherwise the first violation.
pub fn validate_config(cfg: EngineConfig) -> Result<EngineConfig, ConfigError> {
    if !(0.0..=1.0).contains(&cfg.alpha) || cfg.alpha.is_nan() {
        return Err(ConfigError::AlphaOutOfRange(cfg.alpha));
    }
    if !(0.0..=1.0).contains(&cfg.tau_dup) || cfg.tau_dup.is_nan() {
        return Err(ConfigError::TauDupOutOfRange(cfg.tau_dup));
    }
    if cfg.embed_dim == 0 {
        return Err(ConfigError::ZeroEmbeddingDim);
    }
    let dims = [
        ("edge_dim", cfg.edge_dim),
        ("num_keypoints", cfg.num_keypoints),
        ("decoder_stages", cfg.decoder_stages),
        ("heads", cfg.heads),
        ("ffn_hidden", cfg.ffn_hidden),
        ("head_hidden", cfg.head_hidden),
        ("edge_hidden", cfg.edge_hidden),
        ("crop_height", cfg.crop_height),
        ("crop_width", cfg.crop_width),
    ];
    for (name, v) in dims {
        if v == 0 {
            return Err(ConfigError::ZeroDim(name));
        }
    }
    if cfg.oks_kappas.len() != cfg.num_keypoints {
        return Err(ConfigError::KappaCount {
            expected: cfg.num_keypoints,
            found: cfg.oks_kappas.len(),
        });
    }
    if let Some((index, &value)) = cfg
        .oks_kappas
        .iter()
        .enumerate()
        .find(|(_, &k)| !(k > 0.0 && k.is_finite()))
    {
        return Err(ConfigError::NonPositiveKappa { index, value });
    }
    if !(cfg.heatmap_kernel_width > 0.0 && cfg.heatmap_kernel_width.is_finite()) {
        return Err(ConfigError::KernelWidth(cfg.heatmap_kernel_width));
    }
    if let WarpMode::Pluggable(name) = &cfg.warp_mode {
        if name.is_empty() {
            return Err(ConfigError::EmptyWarperName);
        }
    }
    Ok(cfg)
}
