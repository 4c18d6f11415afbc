use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::init::{init_gaussians, InitMode, LearnableInit};
use super::{refine_step, set_from_tape, set_leaves, RefineConfig, RefineParams};
use crate::diff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::encoder::{encode_modality, EncoderConfig, EncoderParams, FeaturePyramid};
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionParams, DEFAULT_FUSION_VOXEL_SIZE};
use crate::geometry::Vec3;
use crate::model::{GaussianSet, GridSpec, SemanticGrid, DEFAULT_CHANNEL_WIDTH, DEFAULT_NUM_CLASSES};
use crate::splat::{label_voxels, splat_on_tape, SplatConfig, SplatVars};

/// Sensor modality. The derived order is the fixed concatenation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Camera,
    LidarBev,
    RadarBev,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Camera, Modality::LidarBev, Modality::RadarBev];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Camera => "camera",
            Modality::LidarBev => "lidar_bev",
            Modality::RadarBev => "radar_bev",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub blocks: usize,
    pub gaussian_count: usize,
    /// Query / feature width `D`.
    pub width: usize,
    pub num_classes: usize,
    /// Channels `Cf` of every sensor feature map.
    pub feature_channels: usize,
    pub modalities: Vec<Modality>,
    pub init: InitMode,
    pub seed: u64,
    /// Log-uniform range of initial scales (meters).
    pub init_scale_range: [f64; 2],
    pub init_opacity: f64,
    /// Standard deviation of the initial queries.
    pub query_std: f64,
    pub fusion_voxel_size: f64,
    pub encoder: EncoderConfig,
    pub refine: RefineConfig,
    pub splat: SplatConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            gaussian_count: 6400,
            width: DEFAULT_CHANNEL_WIDTH,
            num_classes: DEFAULT_NUM_CLASSES,
            feature_channels: 32,
            modalities: Modality::ALL.to_vec(),
            init: InitMode::Random,
            seed: 0,
            init_scale_range: [0.5, 2.0],
            init_opacity: 0.1,
            query_std: 0.02,
            fusion_voxel_size: DEFAULT_FUSION_VOXEL_SIZE,
            encoder: EncoderConfig::default(),
            refine: RefineConfig::default(),
            splat: SplatConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.blocks == 0 {
            return bad("blocks must be at least 1");
        }
        if self.gaussian_count == 0 {
            return bad("gaussian_count must be at least 1");
        }
        if self.width == 0 || self.feature_channels == 0 {
            return bad("width and feature_channels must be positive");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2 (empty plus one class)");
        }
        if self.modalities.is_empty() {
            return bad("modalities must not be empty");
        }
        let mut sorted = self.modalities.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.modalities.len() {
            return bad("modalities contain duplicates");
        }
        let [lo, hi] = self.init_scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("init_scale_range must satisfy 0 < lo <= hi");
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return bad("init_opacity must lie in (0, 1)");
        }
        if !(self.query_std >= 0.0 && self.query_std.is_finite()) {
            return bad("query_std must be finite and non-negative");
        }
        if !(self.fusion_voxel_size > 0.0) {
            return bad("fusion_voxel_size must be positive");
        }
        self.encoder.validate()?;
        self.refine.validate()?;
        self.splat.validate()
    }

    /// Modalities in concatenation order.
    pub fn ordered_modalities(&self) -> Vec<Modality> {
        let mut m = self.modalities.clone();
        m.sort();
        m
    }
}

/// Learnable weights of one block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    /// One encoder per modality, in concatenation order.
    pub encoders: Vec<EncoderParams>,
    pub fusion: FusionParams,
    pub refine: RefineParams,
}

/// Parameters and structure of a full pipeline over one grid.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: PipelineConfig,
    pub grid: GridSpec,
    pub modalities: Vec<Modality>,
    pub store: ParamStore,
    pub blocks: Vec<BlockParams>,
    pub learnable: Option<LearnableInit>,
}

impl Model {
    pub fn new(config: PipelineConfig, grid: GridSpec) -> Result<Self> {
        config.validate()?;
        grid.validate()?;
        let modalities = config.ordered_modalities();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let encoders = modalities
                .iter()
                .map(|m| {
                    EncoderParams::new(
                        &mut store,
                        &format!("block{b}.{m}"),
                        config.encoder.clone(),
                        config.width,
                        config.feature_channels,
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let fusion = FusionParams::new(
                &mut store,
                &format!("block{b}.fusion"),
                modalities.len(),
                config.width,
                config.fusion_voxel_size,
                &mut rng,
            )?;
            let refine = RefineParams::new(&mut store, &format!("block{b}.refine"), config.width, config.num_classes, config.refine, &mut rng)?;
            blocks.push(BlockParams { encoders, fusion, refine });
        }
        let learnable = match config.init {
            InitMode::Learnable => Some(LearnableInit::register(&mut store, &init_gaussians(&config, &grid, None)?)),
            _ => None,
        };
        Ok(Self {
            config,
            grid,
            modalities,
            store,
            blocks,
            learnable,
        })
    }

    pub fn check_inputs(&self, inputs: &SceneInputs) -> Result<()> {
        for m in &self.modalities {
            match inputs.sensors.get(m) {
                Some(p) if !p.is_empty() => {}
                _ => return Err(Error::Config(format!("scene has no {m} input"))),
            }
        }
        if self.config.init == InitMode::Points && inputs.points.is_empty() {
            return Err(Error::Config("points initialization needs a scene point cloud".into()));
        }
        Ok(())
    }
}

/// Everything one scene feeds into the pipeline.
#[derive(Clone, Debug, Default)]
pub struct SceneInputs {
    pub sensors: BTreeMap<Modality, Vec<FeaturePyramid>>,
    pub points: Vec<Vec3>,
}

/// Tape handles of one block's intermediate results.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    /// Queries the block's encoders consumed.
    pub queries_in: Var,
    /// Fused queries `Q`, carried into the next block.
    pub fused: Var,
    pub gaussians: SplatVars,
    /// `N × (1 + C)` splat output.
    pub splat: Var,
}

#[derive(Clone, Debug)]
pub struct PipelineTrace {
    pub initial: SplatVars,
    pub initial_queries: Var,
    pub blocks: Vec<BlockTrace>,
}

impl PipelineTrace {
    pub fn splats(&self) -> Vec<Var> {
        self.blocks.iter().map(|b| b.splat).collect()
    }
}

fn means_of(t: &Tensor) -> Vec<Vec3> {
    t.data().chunks_exact(3).map(|m| [m[0], m[1], m[2]]).collect()
}

/// Runs all blocks (encode → fuse → refine → splat) on the tape.
pub fn run_pipeline(tape: &mut Tape, model: &Model, bound: &Bound, inputs: &SceneInputs) -> Result<PipelineTrace> {
    model.check_inputs(inputs)?;
    let (initial, initial_queries) = match &model.learnable {
        Some(l) => l.on_tape(tape, bound)?,
        None => {
            let set = init_gaussians(&model.config, &model.grid, Some(&inputs.points))?;
            let q = tape.constant(Tensor::matrix(set.len(), set.channel_width, set.queries.clone())?);
            (set_leaves(tape, &set, false), q)
        }
    };
    let (mut g, mut q) = (initial, initial_queries);
    let mut blocks = Vec::with_capacity(model.blocks.len());
    for block in &model.blocks {
        let feats = model
            .modalities
            .iter()
            .zip(&block.encoders)
            .map(|(m, enc)| encode_modality(tape, bound, enc, &g, q, &inputs.sensors[m]))
            .collect::<Result<Vec<_>>>()?;
        let means = means_of(tape.value(g.means));
        let fused = fuse(tape, bound, &block.fusion, &feats, &means)?;
        let refined = refine_step(tape, bound, &block.refine, &g, fused)?;
        let splat = splat_on_tape(tape, &refined, &model.grid, &model.config.splat)?;
        blocks.push(BlockTrace {
            queries_in: q,
            fused,
            gaussians: refined,
            splat,
        });
        g = refined;
        q = fused;
    }
    Ok(PipelineTrace {
        initial,
        initial_queries,
        blocks,
    })
}

/// Converts an `N × (1 + C)` splat tensor into a labelled grid.
pub fn splat_tensor_to_grid(t: &Tensor, spec: GridSpec, threshold: f64) -> Result<SemanticGrid> {
    let c = t.cols() - 1;
    if t.rows() != spec.num_voxels() {
        return Err(Error::shape("splat_tensor_to_grid", format!("{} rows for {} voxels", t.rows(), spec.num_voxels())));
    }
    let occupancy: Vec<f64> = t.data().chunks_exact(c + 1).map(|r| r[0]).collect();
    let probs: Vec<f64> = t.data().chunks_exact(c + 1).flat_map(|r| r[1..].to_vec()).collect();
    let labels = label_voxels(&occupancy, &probs, c, threshold);
    Ok(SemanticGrid {
        spec,
        num_classes: c,
        occupancy,
        class_probs: Some(probs),
        labels,
    })
}

/// Inference: every block's Gaussian set and grid.
pub fn predict(model: &Model, inputs: &SceneInputs) -> Result<(Vec<GaussianSet>, Vec<SemanticGrid>)> {
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape, false);
    let trace = run_pipeline(&mut tape, model, &bound, inputs)?;
    let mut sets = Vec::new();
    let mut grids = Vec::new();
    for b in &trace.blocks {
        sets.push(set_from_tape(&tape, &b.gaussians, b.fused)?);
        grids.push(splat_tensor_to_grid(tape.value(b.splat), model.grid, model.config.splat.occupancy_threshold)?);
    }
    Ok((sets, grids))
}
