use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diff::Tape;
use crate::encoder::encode_modality;
use crate::error::{Error, Result};
use crate::fusion::fuse;
use crate::model::GridSpec;
use crate::refine::{init_gaussians, refine_step, run_pipeline, set_leaves, InitMode, Model, PipelineConfig};
use crate::scenes::{gen_scene, CameraRig, SceneSpec};
use crate::splat::{cull, splat_dense, splat_forward, splat_on_tape, GaussianArrays, SplatConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchPreset {
    /// 200×200×16 at 0.5 m, 6400 Gaussians, width 128.
    Paper,
    /// 64×64×8, 512 Gaussians, width 64.
    Desk,
    /// 32×32×8, 256 Gaussians, width 32.
    Toy,
}

impl BenchPreset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            "toy" => Ok(Self::Toy),
            _ => Err(Error::Config(format!("unknown bench preset {s:?} (expected paper, desk or toy)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Paper => "paper",
            Self::Desk => "desk",
            Self::Toy => "toy",
        }
    }

    pub fn grid(self) -> GridSpec {
        match self {
            Self::Paper => GridSpec::paper_scale(),
            Self::Desk => GridSpec::desk_scale(),
            Self::Toy => SceneSpec::toy().grid,
        }
    }

    pub fn gaussians(self) -> usize {
        match self {
            Self::Paper => 6400,
            Self::Desk => 512,
            Self::Toy => 256,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Self::Paper => 128,
            Self::Desk => 64,
            Self::Toy => 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    /// Timed runs per stage; the median is reported.
    pub repeats: usize,
    /// Include the brute-force dense splat (slow at paper scale).
    pub dense: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { repeats: 5, dense: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub stage: String,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub runs_ms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub preset: BenchPreset,
    pub grid_dims: [usize; 3],
    pub voxels: usize,
    pub gaussians: usize,
    pub width: usize,
    pub repeats: usize,
    pub entries: Vec<BenchEntry>,
    /// Median dense time over median culled time (occupancy only).
    pub culled_speedup: Option<f64>,
    /// Voxel-Gaussian pairs visited by culled splatting relative to dense.
    pub culled_pair_fraction: f64,
    /// Peak resident set size of the process, when the OS reports it.
    pub peak_rss_bytes: Option<u64>,
    /// Size of the dominant buffers: splat output plus Gaussian state.
    pub estimated_bytes: u64,
}

impl BenchReport {
    pub fn entry(&self, stage: &str) -> Option<&BenchEntry> {
        self.entries.iter().find(|e| e.stage == stage)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "preset {} | grid {:?} ({} voxels) | P = {} | D = {} | {} runs",
            self.preset.as_str(),
            self.grid_dims,
            self.voxels,
            self.gaussians,
            self.width,
            self.repeats
        );
        let _ = writeln!(s, "{:<24} {:>12} {:>12} {:>12}", "stage", "median ms", "min ms", "max ms");
        for e in &self.entries {
            let _ = writeln!(s, "{:<24} {:>12.3} {:>12.3} {:>12.3}", e.stage, e.median_ms, e.min_ms, e.max_ms);
        }
        if let Some(x) = self.culled_speedup {
            let _ = writeln!(s, "culled vs dense speedup: {x:.1}x");
        }
        let _ = writeln!(s, "culled pair fraction: {:.4}", self.culled_pair_fraction);
        if let Some(b) = self.peak_rss_bytes {
            let _ = writeln!(s, "peak RSS: {:.1} MiB", b as f64 / (1024.0 * 1024.0));
        }
        let _ = writeln!(s, "estimated buffers: {:.1} MiB", self.estimated_bytes as f64 / (1024.0 * 1024.0));
        s
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_stage(stage: &str, repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<BenchEntry> {
    // untimed warm-up: first touch of buffers and caches
    f()?;
    let mut runs = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        runs.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(BenchEntry {
        stage: stage.to_string(),
        median_ms: median(&runs),
        min_ms: runs.iter().copied().fold(f64::INFINITY, f64::min),
        max_ms: runs.iter().copied().fold(0.0, f64::max),
        runs_ms: runs,
    })
}

/// Peak resident set size from `/proc/self/status`, where available.
pub fn peak_rss_bytes() -> Option<u64> {
    let s = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = s.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Times splatting (dense and culled), each pipeline stage and a full block
/// on a fixed synthetic scene.
pub fn bench(preset: BenchPreset, opts: BenchOptions) -> Result<BenchReport> {
    let grid = preset.grid();
    let p = preset.gaussians();
    let d = preset.width();
    let scene_spec = SceneSpec {
        seed: 7,
        grid,
        object_count: [4, 12],
        rig: CameraRig {
            image_dims: [32, 48],
            ..CameraRig::default()
        },
        point_count: 2 * p,
        ..SceneSpec::default()
    };
    let bundle = gen_scene(&scene_spec)?;
    let inputs = bundle.inputs();
    let config = PipelineConfig {
        blocks: 1,
        gaussian_count: p,
        width: d,
        feature_channels: scene_spec.feature_channels,
        init: InitMode::Random,
        seed: 3,
        ..PipelineConfig::default()
    };
    let set = init_gaussians(&config, &grid, None)?;
    let arrays = GaussianArrays::from_set(&set);
    let splat_cfg = SplatConfig::default();
    let r = opts.repeats;
    let mut entries = Vec::new();

    let culled = time_stage("splat_culled", r, || {
        black_box(splat_forward(&arrays, &grid, &splat_cfg, false)?);
        Ok(())
    })?;
    let speedup = if opts.dense {
        let dense = time_stage("splat_dense", r, || {
            black_box(splat_dense(&arrays, &grid, &splat_cfg, false)?);
            Ok(())
        })?;
        let x = dense.median_ms / culled.median_ms;
        entries.push(dense);
        Some(x)
    } else {
        None
    };
    entries.push(culled);
    entries.push(time_stage("splat_culled_semantic", r, || {
        black_box(splat_forward(&arrays, &grid, &splat_cfg, true)?);
        Ok(())
    })?);
    entries.push(time_stage("splat_forward_backward", r, || {
        let mut tape = Tape::new();
        let vars = set_leaves(&mut tape, &set, true);
        let out = splat_on_tape(&mut tape, &vars, &grid, &splat_cfg)?;
        let s = tape.sum(out, None)?;
        tape.backward(s)?;
        Ok(())
    })?);

    let model = Model::new(config.clone(), grid)?;
    let block = &model.blocks[0];
    let q0 = crate::diff::Tensor::matrix(p, d, set.queries.clone())?;
    for (k, m) in model.modalities.iter().enumerate() {
        entries.push(time_stage(&format!("encoder_{m}"), r, || {
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape, false);
            let g = set_leaves(&mut tape, &set, false);
            let q = tape.constant(q0.clone());
            black_box(encode_modality(&mut tape, &bound, &block.encoders[k], &g, q, &inputs.sensors[m])?);
            Ok(())
        })?);
    }
    let means: Vec<_> = set.gaussians.iter().map(|g| g.mean).collect();
    entries.push(time_stage("fusion", r, || {
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape, false);
        let feats: Vec<_> = model.modalities.iter().map(|_| tape.constant(q0.clone())).collect();
        black_box(fuse(&mut tape, &bound, &block.fusion, &feats, &means)?);
        Ok(())
    })?);
    entries.push(time_stage("refine", r, || {
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape, false);
        let g = set_leaves(&mut tape, &set, false);
        let q = tape.constant(q0.clone());
        black_box(refine_step(&mut tape, &bound, &block.refine, &g, q)?);
        Ok(())
    })?);
    entries.push(time_stage("block_forward", r, || {
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape, false);
        black_box(run_pipeline(&mut tape, &model, &bound, &inputs)?);
        Ok(())
    })?);

    let pairs = cull(&arrays, &grid, &splat_cfg).total_volume() as f64;
    let n = grid.num_voxels();
    let c = config.num_classes;
    let estimated_bytes = (n * (1 + c) * 8 + p * (11 + c + d) * 8) as u64;
    Ok(BenchReport {
        preset,
        grid_dims: grid.dims,
        voxels: n,
        gaussians: p,
        width: d,
        repeats: r,
        entries,
        culled_speedup: speedup,
        culled_pair_fraction: pairs / (n as f64 * p as f64),
        peak_rss_bytes: peak_rss_bytes(),
        estimated_bytes,
    })
}
