use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diff::AdamConfig;
use crate::error::{Error, Result};
use crate::metrics::MiouMode;
use crate::refine::{InitMode, Modality, PipelineConfig};

/// Optimizer settings shared by `train` and `fit`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Peak learning rate reached after warmup (default 2e-4).
    pub lr: f64,
    /// Linear warmup steps (default 500).
    pub warmup_steps: u64,
    /// Moments, epsilon and decoupled weight decay (default 0.01).
    pub adam: AdamConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            warmup_steps: 500,
            adam: AdamConfig::default(),
        }
    }
}

impl OptimizerConfig {
    fn validate(&self, what: &str) -> Result<()> {
        let a = &self.adam;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("{what}.lr must be positive")));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::Config(format!("{what}.adam betas must lie in [0, 1)")));
        }
        if !(a.eps > 0.0) || !(a.weight_decay >= 0.0) {
            return Err(Error::Config(format!("{what}.adam needs eps > 0 and weight_decay >= 0")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Optimizer steps (default 10000).
    pub steps: u64,
    /// Scenes per step, processed in parallel (default 1).
    pub batch_size: usize,
    /// Trailing scenes held out for evaluation (default 1).
    pub held_out: usize,
    /// Held-out evaluation period in steps; 0 evaluates only at the start and end (default 500).
    pub eval_every: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint (default 1000).
    pub checkpoint_every: u64,
    /// Window of the smoothed loss reported at the end (default 50).
    pub smoothing_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 1,
            held_out: 1,
            eval_every: 500,
            checkpoint_every: 1000,
            smoothing_window: 50,
        }
    }
}

/// Direct Gaussian fitting against a scene's ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Gaussians `P`, initialized on scene points (default 512).
    pub gaussians: usize,
    /// Adam steps (default 500).
    pub steps: u64,
    /// Initial isotropic scale in meters (default 0.5).
    pub init_scale: f64,
    /// Initial opacity (default 0.5).
    pub init_opacity: f64,
    /// Optimizer; its defaults differ from training (lr 0.05, warmup 0, no decay).
    pub optimizer: OptimizerConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            gaussians: 512,
            steps: 500,
            init_scale: 0.5,
            init_opacity: 0.5,
            optimizer: OptimizerConfig {
                lr: 0.05,
                warmup_steps: 0,
                adam: AdamConfig {
                    weight_decay: 0.0,
                    ..AdamConfig::default()
                },
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Scene set directory (as written by `gen-scenes`).
    pub scenes: Option<PathBuf>,
    /// Output directory.
    pub out: Option<PathBuf>,
}

/// Everything a run needs, loaded from one TOML file. Every key is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub fit: FitConfig,
    pub paths: PathsConfig,
    /// mIoU convention for reports (default `exclude_absent`).
    pub miou_mode: MiouMode,
}

impl RunConfig {
    /// Small pipeline sized for `SceneSpec::toy()` scenes: 2 blocks,
    /// P = 256, width 32, camera + lidar BEV, point initialization,
    /// lr 2e-3 with 50 warmup steps, 4 held-out scenes, 200 steps.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        let p = &mut cfg.pipeline;
        p.blocks = 2;
        p.gaussian_count = 256;
        p.width = 32;
        p.feature_channels = 20;
        p.modalities = vec![Modality::Camera, Modality::LidarBev];
        p.init = InitMode::Points;
        p.init_scale_range = [0.3, 0.8];
        p.encoder.offset_hidden = p.width;
        cfg.optimizer.lr = 2e-3;
        cfg.optimizer.warmup_steps = 50;
        cfg.train.steps = 200;
        cfg.train.held_out = 4;
        cfg.train.eval_every = 0;
        cfg.train.checkpoint_every = 0;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.optimizer.validate("optimizer")?;
        self.fit.optimizer.validate("fit.optimizer")?;
        let t = &self.train;
        if t.batch_size == 0 || t.held_out == 0 || t.smoothing_window == 0 {
            return Err(Error::Config("train.batch_size, train.held_out and train.smoothing_window must be positive".into()));
        }
        let f = &self.fit;
        if f.gaussians == 0 {
            return Err(Error::Config("fit.gaussians must be positive".into()));
        }
        if !(f.init_scale > 0.0) || !(f.init_opacity > 0.0 && f.init_opacity < 1.0) {
            return Err(Error::Config("fit.init_scale must be positive and fit.init_opacity in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}
