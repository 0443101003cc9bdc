//! Run configuration: JSON file with defaults for every field, flag
//! overrides, and pure resolution into the concrete model/training/data
//! parameter sets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentOptions, PreprocessParams};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::motion::EncoderConfig;
use crate::optim::default_lr_decay;
use crate::train::{AlphaMode, TrainSettings};

/// Model-size preset: block/layer counts, window and temporal downsampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 2 encoder blocks, 2 GCN layers, window 1, 30 Hz downsampling.
    Small,
    /// 4 encoder blocks, 4 GCN layers, window 2, no downsampling.
    Large,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Preset::Small),
            "large" => Ok(Preset::Large),
            other => Err(Error::Usage(format!(
                "unknown preset '{other}' (expected small or large)"
            ))),
        }
    }
}

impl Preset {
    pub fn n_blocks(&self) -> usize {
        match self {
            Preset::Small => 2,
            Preset::Large => 4,
        }
    }

    pub fn n_gcn_layers(&self) -> usize {
        match self {
            Preset::Small => 2,
            Preset::Large => 4,
        }
    }

    pub fn window(&self) -> usize {
        match self {
            Preset::Small => 1,
            Preset::Large => 2,
        }
    }

    pub fn downsample_hz(&self) -> Option<f64> {
        match self {
            Preset::Small => Some(30.0),
            Preset::Large => None,
        }
    }
}

fn default_lr_decay_field() -> f64 {
    default_lr_decay()
}

/// The on-disk run configuration. Every field has a default; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub manifest: String,
    pub out_dir: String,
    pub preset: Preset,
    pub variant: Variant,
    /// Worker threads; 0 means one per core.
    pub jobs: usize,

    // training
    pub epochs: usize,
    pub lr0: f64,
    #[serde(default = "default_lr_decay_field")]
    pub lr_decay: f64,
    pub batch_size: usize,
    pub focal_gamma: f64,
    pub alpha: AlphaMode,
    pub weight_decay: f64,
    pub augment: bool,

    // data
    pub target_len: usize,
    pub frame_size: usize,
    pub in_channels: usize,
    pub n_classes: usize,

    // model
    pub patch_size: usize,
    pub feature_dim: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub lambda_local: f64,
    pub lambda_global: f64,
    pub tau: f64,
    pub forgetting: f64,
    pub residual: bool,

    // preset-driven unless set explicitly
    pub n_blocks: Option<usize>,
    pub n_gcn_layers: Option<usize>,
    pub window: Option<usize>,
    pub downsample_hz: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            manifest: "data/manifest.csv".into(),
            out_dir: "out".into(),
            preset: Preset::Small,
            variant: Variant::Full,
            jobs: 0,
            epochs: 50,
            lr0: 1e-4,
            lr_decay: default_lr_decay(),
            batch_size: 4,
            focal_gamma: 2.0,
            alpha: AlphaMode::InverseFrequency,
            weight_decay: 0.01,
            augment: false,
            target_len: 16,
            frame_size: 32,
            in_channels: 1,
            n_classes: 3,
            patch_size: 8,
            feature_dim: 64,
            n_heads: 4,
            mlp_hidden: 128,
            lambda_local: 1.0,
            lambda_global: 2.0,
            tau: 10.0,
            forgetting: 0.5,
            residual: true,
            n_blocks: None,
            n_gcn_layers: None,
            window: None,
            downsample_hz: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))
    }

    /// Resolve presets into a concrete, fully-specified configuration.
    /// Pure: the same config resolves to the same result, byte for byte.
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let n_blocks = self.n_blocks.unwrap_or_else(|| self.preset.n_blocks());
        let n_gcn_layers = self.n_gcn_layers.unwrap_or_else(|| self.preset.n_gcn_layers());
        let window = self.window.unwrap_or_else(|| self.preset.window());
        let downsample_hz = self.downsample_hz.or_else(|| self.preset.downsample_hz());
        let model = ModelConfig {
            encoder: EncoderConfig {
                in_channels: self.in_channels,
                frame_h: self.frame_size,
                frame_w: self.frame_size,
                patch_size: self.patch_size,
                feature_dim: self.feature_dim,
                n_heads: self.n_heads,
                n_blocks,
                mlp_hidden: self.mlp_hidden,
            },
            seq_len: self.target_len,
            n_gcn_layers,
            n_classes: self.n_classes,
            window,
            tau: self.tau,
            lambda_local: self.lambda_local,
            lambda_global: self.lambda_global,
            forgetting: vec![self.forgetting; n_gcn_layers],
            residual: self.residual,
        };
        model.validate()?;
        let train = TrainSettings {
            epochs: self.epochs,
            lr0: self.lr0,
            lr_decay: self.lr_decay,
            batch_size: self.batch_size,
            focal_gamma: self.focal_gamma,
            weight_decay: self.weight_decay,
            alpha: self.alpha.clone(),
            seed: self.seed,
            variant: self.variant,
            augment: if self.augment {
                AugmentOptions::default()
            } else {
                AugmentOptions::disabled()
            },
        };
        train.validate()?;
        Ok(ResolvedConfig {
            seed: self.seed,
            manifest: self.manifest.clone(),
            out_dir: self.out_dir.clone(),
            preset: self.preset,
            jobs: self.jobs,
            preprocess: PreprocessParams {
                target_len: self.target_len,
                target_h: self.frame_size,
                target_w: self.frame_size,
                downsample_hz,
            },
            train,
            model: ResolvedModel {
                in_channels: self.in_channels,
                frame_size: self.frame_size,
                patch_size: self.patch_size,
                feature_dim: self.feature_dim,
                n_heads: self.n_heads,
                n_blocks,
                mlp_hidden: self.mlp_hidden,
                target_len: self.target_len,
                n_gcn_layers,
                n_classes: self.n_classes,
                window,
                tau: self.tau,
                lambda_local: self.lambda_local,
                lambda_global: self.lambda_global,
                forgetting: self.forgetting,
                residual: self.residual,
            },
            model_config: model,
        })
    }
}

/// Concrete model description as echoed in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedModel {
    pub in_channels: usize,
    pub frame_size: usize,
    pub patch_size: usize,
    pub feature_dim: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub mlp_hidden: usize,
    pub target_len: usize,
    pub n_gcn_layers: usize,
    pub n_classes: usize,
    pub window: usize,
    pub tau: f64,
    pub lambda_local: f64,
    pub lambda_global: f64,
    pub forgetting: f64,
    pub residual: bool,
}

/// Fully-resolved configuration: every preset expanded, every field concrete.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig {
    pub seed: u64,
    pub manifest: String,
    pub out_dir: String,
    pub preset: Preset,
    pub jobs: usize,
    pub preprocess: PreprocessParams,
    pub train: TrainSettings,
    pub model: ResolvedModel,
    #[serde(skip)]
    pub model_config: ModelConfig,
}

impl ResolvedConfig {
    /// Canonical echo of the resolved configuration.
    pub fn echo_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }
}
