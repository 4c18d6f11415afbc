use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::pipeline::PipelineConfig;
use crate::diff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{Vec3, IDENTITY_QUAT};
use crate::model::{GaussianSet, GridSpec, SemanticGaussian};
use crate::splat::SplatVars;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    Random,
    Learnable,
    Points,
}

/// Stream separating initialization draws from weight draws of the same seed.
const INIT_STREAM: u64 = 0x1b17;

fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    rng
}

fn log_uniform(rng: &mut impl Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        return range[0];
    }
    rng.random_range(range[0].ln()..range[1].ln()).exp()
}

/// Initial Gaussians and queries. `points` is required (and used for the
/// means) in points mode; fewer points than Gaussians are drawn with
/// replacement.
pub fn init_gaussians(cfg: &PipelineConfig, spec: &GridSpec, points: Option<&[Vec3]>) -> Result<GaussianSet> {
    let p = cfg.gaussian_count;
    let c = cfg.num_classes;
    let mut rng = init_rng(cfg.seed);
    let lo = spec.min_corner;
    let hi = spec.max_corner();
    let means: Vec<Vec3> = match cfg.init {
        InitMode::Random | InitMode::Learnable => (0..p)
            .map(|_| [0, 1, 2].map(|a| rng.random_range(lo[a]..hi[a])))
            .collect(),
        InitMode::Points => {
            let pts = points.ok_or_else(|| Error::Config("points initialization needs a point cloud".into()))?;
            if pts.is_empty() {
                return Err(Error::Config("points initialization got an empty point cloud".into()));
            }
            if pts.len() >= p {
                let mut idx = index::sample(&mut rng, pts.len(), p).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| pts[i]).collect()
            } else {
                (0..p).map(|_| pts[rng.random_range(0..pts.len())]).collect()
            }
        }
    };
    let gaussians = means
        .into_iter()
        .map(|mean| {
            let scale = [0, 1, 2].map(|_| log_uniform(&mut rng, cfg.init_scale_range));
            SemanticGaussian::new(mean, scale, IDENTITY_QUAT, cfg.init_opacity, vec![0.0; c])
        })
        .collect::<Result<Vec<_>>>()?;
    let queries = (0..p * cfg.width)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * cfg.query_std
        })
        .collect();
    GaussianSet::new(gaussians, queries, cfg.width)
}

/// Trainable raw parameters of the initial Gaussians and queries.
#[derive(Clone, Copy, Debug)]
pub struct LearnableInit {
    pub means: ParamId,
    pub log_scales: ParamId,
    pub rotations: ParamId,
    pub opacity_logits: ParamId,
    pub logits: ParamId,
    pub queries: ParamId,
}

impl LearnableInit {
    /// Registers `set` as raw leaves: log-scales, unnormalized quaternions,
    /// opacity logits.
    pub fn register(store: &mut ParamStore, set: &GaussianSet) -> Self {
        let [m, s, r, a, c] = super::set_tensors(set);
        let logit = |x: f64| (x / (1.0 - x)).ln();
        Self {
            means: store.add("init.means", m, false),
            log_scales: store.add("init.log_scales", s.map(f64::ln), false),
            rotations: store.add("init.rotations", r, false),
            opacity_logits: store.add("init.opacity_logits", a.map(logit), false),
            logits: store.add("init.logits", c, false),
            queries: store.add(
                "init.queries",
                Tensor::matrix(set.len(), set.channel_width, set.queries.clone()).expect("dims"),
                false,
            ),
        }
    }

    /// Constrained Gaussian variables and queries on the tape.
    pub fn on_tape(&self, tape: &mut Tape, bound: &crate::diff::Bound) -> Result<(SplatVars, Var)> {
        let scales = tape.exp(bound[self.log_scales]);
        let rotations = tape.normalize_rows(bound[self.rotations])?;
        let opacities = tape.sigmoid(bound[self.opacity_logits]);
        Ok((
            SplatVars {
                means: bound[self.means],
                scales,
                rotations,
                opacities,
                logits: bound[self.logits],
            },
            bound[self.queries],
        ))
    }
}
