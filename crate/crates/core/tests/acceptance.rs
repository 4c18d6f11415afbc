//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run a subset by number: `cargo test -p gsocc --test acceptance -- 1 3 5`.

use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::{Matrix3, Quaternion, SymmetricEigen, UnitQuaternion, Vector3};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gsocc::diff::{check_gradients, Bound, GradCheckConfig, ParamStore, Tape, Tensor, Var};
use gsocc::encoder::{
    attention_weights, deformable_attention, encode_modality, intrinsics_for_fov, look_extrinsics, EncoderConfig, EncoderParams, FeaturePyramid,
    SensorModel,
};
use gsocc::fusion::{fuse, FusionParams};
use gsocc::geometry::axis_angle;
use gsocc::harness::{self, bench, fit_scene, gen_scene_set, BenchOptions, BenchPreset, RunConfig, TrainOptions};
use gsocc::losses::{bce_occupancy, bce_value, compose_class_distribution, lovasz_per_class, lovasz_softmax, total_loss};
use gsocc::metrics::{evaluate, evaluate_grids, MiouMode};
use gsocc::model::{build_covariance, read_gaussians_binary, write_gaussians_binary, GaussianSet, GridSpec, SemanticGaussian, SemanticGrid};
use gsocc::refine::{refine_step, refine_values, set_tensors, Modality, RefineConfig, RefineParams};
use gsocc::scenes::{gen_scene, occlusion_preset, SceneSpec};
use gsocc::splat::{splat_dense, splat_occupancy, splat_on_tape, GaussianArrays, SplatConfig, SplatVars};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "gradient suite", gradient_suite),
        (2, "splatting oracle", splatting_oracle),
        (3, "metric oracle", metric_oracle),
        (4, "lovasz property", lovasz_property),
        (5, "deformable-attention oracle", attention_oracle),
        (6, "direct-fit experiment", direct_fit),
        (7, "toy pipeline training", toy_training),
        (8, "fusion direction", fusion_direction),
        (9, "performance", performance),
        (10, "invariant suites", invariant_suites),
    ];
    // Failures are reported through the criterion lines.
    panic::set_hook(Box::new(|_| {}));
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Magnitudes in [0.05, 1.5) with random sign, away from relu/clamp kinks.
fn rand_signed(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, shape, 0.05, 1.5);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn rand_probs(rng: &mut impl Rng, n: usize, c: usize) -> Tensor {
    let mut d = Vec::with_capacity(n * c);
    for _ in 0..n {
        let e: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0f64..2.0).exp()).collect();
        let s: f64 = e.iter().sum();
        d.extend(e.iter().map(|x| x / s));
    }
    Tensor::matrix(n, c, d).unwrap()
}

fn rand_labels(rng: &mut impl Rng, n: usize, c: usize) -> Vec<u16> {
    (0..n).map(|_| rng.random_range(0..c as u16)).collect()
}

fn rand_quat(rng: &mut impl Rng) -> [f64; 4] {
    let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0)];
    axis_angle(&axis, rng.random_range(-3.0..3.0))
}

fn rand_gaussian(rng: &mut impl Rng, lo: [f64; 3], hi: [f64; 3], scale: (f64, f64), c: usize) -> SemanticGaussian {
    let mean = [0, 1, 2].map(|a| rng.random_range(lo[a]..hi[a]));
    let s = [0, 1, 2].map(|_| rng.random_range(scale.0..scale.1));
    let logits = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
    SemanticGaussian::new(mean, s, rand_quat(rng), rng.random_range(0.05..0.95), logits).unwrap()
}

/// Set with one zero query channel per Gaussian.
fn set_of(gs: Vec<SemanticGaussian>) -> GaussianSet {
    let p = gs.len();
    GaussianSet::new(gs, vec![0.0; p], 1).unwrap()
}

fn randomize_biases(store: &mut ParamStore, rng: &mut impl Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with(".bias") {
            for v in store.get_mut(id).data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
}

fn splat_vars(v: &[Var]) -> SplatVars {
    SplatVars {
        means: v[0],
        scales: v[1],
        rotations: v[2],
        opacities: v[3],
        logits: v[4],
    }
}

fn front_camera(h: usize, w: usize) -> SensorModel {
    SensorModel::Camera {
        intrinsics: intrinsics_for_fov(h, w, 1.4),
        extrinsics: look_extrinsics([0.0, 0.0, 0.0], 0.0, 0.0),
        image_dims: (h, w),
    }
}

fn bev_sensor(n: usize) -> SensorModel {
    SensorModel::Bev {
        extent_min: [-10.0, -10.0],
        extent_max: [10.0, 10.0],
        map_dims: (n, n),
    }
}

fn rand_pyramid(rng: &mut impl Rng, sensor: SensorModel, cf: usize, levels: usize) -> FeaturePyramid {
    let (h, w) = sensor.dims();
    let maps = (0..levels)
        .map(|l| rand_tensor(rng, &[cf, (h >> l).max(1), (w >> l).max(1)], -1.0, 1.0))
        .collect();
    FeaturePyramid::new(sensor, maps).unwrap()
}

// ---------------------------------------------------------------- 1

struct FdTally {
    failures: Vec<String>,
    lines: Vec<String>,
}

impl FdTally {
    fn run<F>(&mut self, op: &str, instances: usize, mut one: F)
    where
        F: FnMut(u64) -> Result<gsocc::diff::GradCheckReport, gsocc::Error>,
    {
        let mut worst = 0.0f64;
        let mut checked = 0;
        let mut ok = 0;
        for i in 0..instances {
            match one(i as u64) {
                Ok(r) => {
                    worst = worst.max(r.max_rel_error);
                    checked += r.checked;
                    if r.passed {
                        ok += 1;
                    } else {
                        self.failures.push(format!("{op} instance {i}: {:?}", r.worst));
                    }
                }
                Err(e) => self.failures.push(format!("{op} instance {i}: {e}")),
            }
        }
        self.lines.push(format!("{op} {ok}/{instances} ({checked} partials, worst rel above floor {worst:.1e})"));
    }
}

const PRIMITIVE_TOL: GradCheckConfig = GradCheckConfig {
    eps: 1e-5,
    rel_tol: 1e-6,
    abs_floor: 1e-9,
};

const COMPOSITE_TOL: GradCheckConfig = GradCheckConfig {
    eps: 1e-5,
    rel_tol: 1e-5,
    abs_floor: 1e-8,
};

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let mut tally = FdTally {
        failures: vec![],
        lines: vec![],
    };
    const N: usize = 20;
    let rng_for = |tag: u64, i: u64| ChaCha8Rng::seed_from_u64(tag * 1000 + i);

    tally.run("matmul", N, |i| {
        let mut r = rng_for(1, i);
        let (a, b) = (rand_tensor(&mut r, &[3, 4], -1.0, 1.0), rand_tensor(&mut r, &[4, 2], -1.0, 1.0));
        check_gradients(&[a, b], |t, v| t.matmul(v[0], v[1]), PRIMITIVE_TOL)
    });
    tally.run("add/sub/mul (broadcast)", N, |i| {
        let mut r = rng_for(2, i);
        let (a, b) = (rand_tensor(&mut r, &[3, 2], -1.0, 1.0), rand_tensor(&mut r, &[2], -1.0, 1.0));
        let c = rand_tensor(&mut r, &[3, 2], -1.0, 1.0);
        check_gradients(
            &[a, b, c],
            |t, v| {
                let s = t.add(v[0], v[1])?;
                let d = t.sub(s, v[2])?;
                let m = t.mul(d, v[1])?;
                t.mul(m, v[2])
            },
            PRIMITIVE_TOL,
        )
    });
    tally.run("scale/concat/slice/reshape/sum", N, |i| {
        let mut r = rng_for(3, i);
        let (a, b) = (rand_tensor(&mut r, &[2, 3, 2], -1.0, 1.0), rand_tensor(&mut r, &[2, 1, 2], -1.0, 1.0));
        let axis = (i % 3) as usize;
        check_gradients(
            &[a, b],
            |t, v| {
                let c = t.concat(&[v[0], v[1]], 1)?;
                let s = t.slice(c, 1, 1, 4)?;
                let k = t.scale(s, -1.7);
                let rs = t.reshape(k, vec![6, 2])?;
                let r3 = t.reshape(rs, vec![2, 3, 2])?;
                t.sum(r3, Some(axis))
            },
            PRIMITIVE_TOL,
        )
    });
    for (name, tag) in [("relu", 4), ("sigmoid", 5), ("tanh", 6), ("softplus", 7), ("exp", 8), ("log", 9), ("clamp", 10)] {
        tally.run(name, N, |i| {
            let mut r = rng_for(tag, i);
            let x = if name == "log" {
                rand_tensor(&mut r, &[3, 3], 0.2, 2.0)
            } else {
                rand_signed(&mut r, &[3, 3])
            };
            let x = x.map(|v| if (v.abs() - 0.7).abs() < 0.02 { v + 0.1 } else { v });
            check_gradients(
                &[x],
                |t, v| {
                    Ok(match name {
                        "relu" => t.relu(v[0]),
                        "sigmoid" => t.sigmoid(v[0]),
                        "tanh" => t.tanh(v[0]),
                        "softplus" => t.softplus(v[0]),
                        "exp" => t.exp(v[0]),
                        "log" => t.log(v[0]),
                        _ => t.clamp(v[0], -0.7, 0.7),
                    })
                },
                PRIMITIVE_TOL,
            )
        });
    }
    tally.run("softmax", N, |i| {
        let mut r = rng_for(11, i);
        let x = rand_tensor(&mut r, &[2, 4, 3], -2.0, 2.0);
        let axis = (i % 3) as usize;
        check_gradients(&[x], |t, v| t.softmax(v[0], axis), PRIMITIVE_TOL)
    });
    tally.run("normalize_rows", N, |i| {
        let mut r = rng_for(12, i);
        check_gradients(&[rand_signed(&mut r, &[3, 4])], |t, v| t.normalize_rows(v[0]), PRIMITIVE_TOL)
    });
    tally.run("bilinear_sample2d", N, |i| {
        let mut r = rng_for(13, i);
        let (h, w) = (5, 7);
        let map = rand_tensor(&mut r, &[3, h, w], -1.0, 1.0);
        let mut uv = Vec::new();
        for _ in 0..6 {
            for n in [w, h] {
                let px = r.random_range(0..n - 1) as f64 + r.random_range(0.1..0.9);
                uv.push((px + 0.5) / n as f64);
            }
        }
        let uv = Tensor::matrix(6, 2, uv).unwrap();
        check_gradients(&[map, uv], |t, v| t.bilinear_sample2d(v[0], v[1]), PRIMITIVE_TOL)
    });

    // Splatting: wide cutoff so perturbations never toggle a contribution.
    let spec = GridSpec::new([0.0; 3], 0.5, [6, 6, 6]).unwrap();
    let wide = SplatConfig {
        cutoff_sigma: 9.0,
        ..SplatConfig::default()
    };
    tally.run("splat_backward", N, |i| {
        let mut r = rng_for(20, i);
        let gs: Vec<_> = (0..4).map(|_| rand_gaussian(&mut r, [0.0; 3], [3.0; 3], (0.3, 1.0), 3)).collect();
        let set = set_of(gs);
        check_gradients(&set_tensors(&set), |t, v| splat_on_tape(t, &splat_vars(v), &spec, &wide), COMPOSITE_TOL)
    });

    tally.run("encoder", N, |i| {
        let mut r = rng_for(21, i);
        let cfg = EncoderConfig {
            num_refs: 2,
            num_samples: 2,
            num_levels: 2,
            offset_hidden: 4,
        };
        let (d, cf) = (4, 3);
        let mut store = ParamStore::new();
        let params = EncoderParams::new(&mut store, "enc", cfg, d, cf, &mut r).unwrap();
        randomize_biases(&mut store, &mut r);
        let sensor = if i % 2 == 0 { front_camera(16, 24) } else { bev_sensor(16) };
        let pyramids = vec![rand_pyramid(&mut r, sensor, cf, 2)];
        let gs: Vec<_> = (0..2).map(|_| rand_gaussian(&mut r, [4.0, -1.0, -0.5], [8.0, 1.0, 0.5], (0.2, 0.6), 2)).collect();
        let [m, s, rot, a, c] = set_tensors(&set_of(gs));
        let q = rand_tensor(&mut r, &[2, d], -1.0, 1.0);
        let mut inputs = vec![m, s, rot, q];
        inputs.extend(store.ids().map(|id| store.get(id).clone()));
        check_gradients(
            &inputs,
            |t, v| {
                let bound = Bound::from_vars(v[4..].to_vec());
                let vars = SplatVars {
                    means: v[0],
                    scales: v[1],
                    rotations: v[2],
                    opacities: t.constant(a.clone()),
                    logits: t.constant(c.clone()),
                };
                encode_modality(t, &bound, &params, &vars, v[3], &pyramids)
            },
            COMPOSITE_TOL,
        )
    });

    tally.run("fusion", N, |i| {
        let mut r = rng_for(22, i);
        let (n_mod, d) = (2, 3);
        let mut store = ParamStore::new();
        let params = FusionParams::new(&mut store, "fuse", n_mod, d, 2.0, &mut r).unwrap();
        randomize_biases(&mut store, &mut r);
        // Two Gaussians share a cell so the scatter-mean path is exercised.
        let mut means: Vec<[f64; 3]> = (0..4).map(|_| [0, 1, 2].map(|_| r.random_range(-1.5..1.5))).collect();
        means[3] = means[0];
        let mut inputs = vec![rand_tensor(&mut r, &[4, d], -1.0, 1.0), rand_tensor(&mut r, &[4, d], -1.0, 1.0)];
        inputs.extend(store.ids().map(|id| store.get(id).clone()));
        check_gradients(&inputs, |t, v| fuse(t, &Bound::from_vars(v[2..].to_vec()), &params, &v[..2], &means), COMPOSITE_TOL)
    });

    tally.run("refine", N, |i| {
        let mut r = rng_for(23, i);
        let (d, c) = (3, 2);
        let mut store = ParamStore::new();
        let params = RefineParams::new(
            &mut store,
            "refine",
            d,
            c,
            RefineConfig {
                scale_max: 1.0,
                ..RefineConfig::default()
            },
            &mut r,
        )
        .unwrap();
        randomize_biases(&mut store, &mut r);
        let gs: Vec<_> = (0..3).map(|_| rand_gaussian(&mut r, [-2.0; 3], [2.0; 3], (0.2, 0.8), c)).collect();
        let [m, ..] = set_tensors(&set_of(gs));
        let q = rand_tensor(&mut r, &[3, d], -1.0, 1.0);
        let mut inputs = vec![m, q];
        inputs.extend(store.ids().map(|id| store.get(id).clone()));
        check_gradients(
            &inputs,
            |t, v| {
                let bound = Bound::from_vars(v[2..].to_vec());
                let fixed = |t: &mut Tape, cols: usize| t.constant(Tensor::zeros(vec![3, cols]));
                let g = SplatVars {
                    means: v[0],
                    scales: fixed(t, 3),
                    rotations: fixed(t, 4),
                    opacities: fixed(t, 1),
                    logits: fixed(t, c),
                };
                let out = refine_step(t, &bound, &params, &g, v[1])?;
                t.concat(&[out.means, out.scales, out.rotations, out.opacities, out.logits], 1)
            },
            COMPOSITE_TOL,
        )
    });

    tally.run("lovasz_softmax", N, |i| {
        let mut r = rng_for(24, i);
        let labels = rand_labels(&mut r, 8, 3);
        let p = rand_probs(&mut r, 8, 3);
        check_gradients(&[p], |t, v| lovasz_softmax(t, v[0], &labels), COMPOSITE_TOL)
    });
    tally.run("bce_occupancy", N, |i| {
        let mut r = rng_for(25, i);
        let labels = rand_labels(&mut r, 10, 3);
        let a = rand_tensor(&mut r, &[10, 1], 0.05, 0.95);
        check_gradients(&[a], |t, v| bce_occupancy(t, v[0], &labels), COMPOSITE_TOL)
    });
    tally.run("class composition", N, |i| {
        let mut r = rng_for(26, i);
        let x = rand_tensor(&mut r, &[6, 4], 0.0, 1.0);
        check_gradients(&[x], |t, v| compose_class_distribution(t, v[0]), PRIMITIVE_TOL)
    });
    tally.run("total loss over splat", N, |i| {
        let mut r = rng_for(27, i);
        let gs: Vec<_> = (0..3).map(|_| rand_gaussian(&mut r, [0.0; 3], [3.0; 3], (0.4, 1.0), 3)).collect();
        let set = set_of(gs);
        let labels = rand_labels(&mut r, spec.num_voxels(), 3);
        check_gradients(
            &set_tensors(&set)[3..],
            |t, v| {
                let [m, s, rot, ..] = set_tensors(&set);
                let vars = SplatVars {
                    means: t.constant(m),
                    scales: t.constant(s),
                    rotations: t.constant(rot),
                    opacities: v[0],
                    logits: v[1],
                };
                let out = splat_on_tape(t, &vars, &spec, &wide)?;
                Ok(total_loss(t, &[out, out], &labels)?.0)
            },
            COMPOSITE_TOL,
        )
    });

    let secs = t0.elapsed().as_secs_f64();
    ensure(tally.failures.is_empty(), || tally.failures.join("; "))?;
    ensure(secs < 120.0, || format!("took {secs:.1} s, limit 120 s"))?;
    Ok(format!("{} ops × {N} instances in {secs:.1} s: {}", tally.lines.len(), tally.lines.join(", ")))
}

// ---------------------------------------------------------------- 2

/// Brute-force occupancy from the covariance built independently with nalgebra.
fn occupancy_oracle(gs: &[SemanticGaussian], spec: &GridSpec) -> Vec<f64> {
    let inv: Vec<Matrix3<f64>> = gs
        .iter()
        .map(|g| {
            let [w, x, y, z] = g.rotation;
            let r = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)).to_rotation_matrix().into_inner();
            let s2 = Matrix3::from_diagonal(&Vector3::from(g.scale.map(|s| s * s)));
            (r * s2 * r.transpose()).try_inverse().unwrap()
        })
        .collect();
    let [nx, ny, nz] = spec.dims;
    let mut out = Vec::with_capacity(spec.num_voxels());
    // x varies fastest in the grid's linear order.
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let c = Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * spec.voxel_size + Vector3::from(spec.min_corner);
                let keep: f64 = gs
                    .iter()
                    .zip(&inv)
                    .map(|(g, si)| {
                        let d = c - Vector3::from(g.mean);
                        1.0 - g.opacity * (-0.5 * (d.transpose() * si * d)[0]).exp()
                    })
                    .product();
                out.push(1.0 - keep);
            }
        }
    }
    out
}

fn splatting_oracle() -> Outcome {
    let spec = GridSpec::new([0.0; 3], 0.5, [16, 16, 16]).unwrap();
    let mut lines = vec![];
    for cutoff in [2.0, 3.0, 4.0, 6.0] {
        let cfg = SplatConfig {
            cutoff_sigma: cutoff,
            ..SplatConfig::default()
        };
        let mut worst_ratio = 0.0f64;
        let mut worst_abs = 0.0f64;
        for seed in 0..20u64 {
            let mut r = ChaCha8Rng::seed_from_u64(7000 + seed);
            let p = r.random_range(1..=64);
            let gs: Vec<_> = (0..p).map(|_| rand_gaussian(&mut r, [-1.0; 3], [9.0; 3], (0.2, 2.0), 2)).collect();
            let arrays = GaussianArrays::from_gaussians(&gs);
            let oracle = occupancy_oracle(&gs, &spec);
            let culled = splat_occupancy(&arrays, &spec, &cfg).map_err(|e| e.to_string())?;
            let dense = splat_dense(&arrays, &spec, &cfg, false).map_err(|e| e.to_string())?;
            let diff = culled.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let dense_diff = dense.occupancy.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            ensure(dense_diff < 1e-12, || format!("dense splat differs from oracle by {dense_diff:e} (seed {seed})"))?;
            let bound = (-0.5 * cutoff * cutoff).exp() * p as f64;
            ensure(diff <= bound, || format!("cutoff {cutoff} seed {seed}: error {diff:e} above bound {bound:e}"))?;
            if cutoff == 4.0 {
                ensure(diff <= 1e-3, || format!("cutoff 4 seed {seed}: error {diff:e} above 1e-3"))?;
            }
            worst_abs = worst_abs.max(diff);
            worst_ratio = worst_ratio.max(diff / bound);
        }
        lines.push(format!("cutoff {cutoff}: max err {worst_abs:.1e} ({:.0}% of bound)", 100.0 * worst_ratio));
    }
    Ok(format!("20 sets per cutoff, P ≤ 64 on 16³; {}", lines.join(", ")))
}

// ---------------------------------------------------------------- 3

/// Per-voxel enumeration: (IoU, mIoU over classes present, mIoU over all classes).
fn naive_metrics(pred: &[u16], gt: &[u16], c: usize) -> (f64, f64, f64) {
    let mut present = vec![];
    let mut all = 0.0;
    for k in 1..c as u16 {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for v in 0..pred.len() {
            match (pred[v] == k, gt[v] == k) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        if tp + fp + fn_ > 0 {
            let iou = tp as f64 / (tp + fp + fn_) as f64;
            present.push(iou);
            all += iou;
        }
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for v in 0..pred.len() {
        match (pred[v] != 0, gt[v] != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let iou = tp as f64 / (tp + fp + fn_) as f64;
    (iou, present.iter().sum::<f64>() / present.len() as f64, all / (c - 1) as f64)
}

fn metric_oracle() -> Outcome {
    let spec = GridSpec::new([0.0; 3], 1.0, [6, 6, 6]).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for i in 0..100 {
        let c = r.random_range(2..8);
        let mut labels = || -> Vec<u16> { (0..216).map(|_| if r.random_bool(0.4) { 0 } else { r.random_range(1..c as u16) }).collect() };
        let (gt, pred) = (labels(), labels());
        let (iou, miou, all) = naive_metrics(&pred, &gt, c);
        let g = SemanticGrid::from_labels(spec, c, gt).map_err(|e| e.to_string())?;
        let p = SemanticGrid::from_labels(spec, c, pred.clone()).map_err(|e| e.to_string())?;
        let e = evaluate_grids(&p, &g, MiouMode::ExcludeAbsent).map_err(|e| e.to_string())?;
        let e_all = evaluate(&pred, &g.labels, c, MiouMode::AllClasses).map_err(|e| e.to_string())?;
        ensure(e.iou == iou && e.miou == miou && e_all.miou == all, || {
            format!("grid {i}: ({}, {}, {}) vs enumeration ({iou}, {miou}, {all})", e.iou, e.miou, e_all.miou)
        })?;
    }
    let e = evaluate(&[1, 1, 1, 0, 1], &[1, 1, 1, 1, 0], 2, MiouMode::ExcludeAbsent).map_err(|e| e.to_string())?;
    ensure(e.iou == 0.6, || format!("spot value TP=3 FP=1 FN=1 gave {}", e.iou))?;
    Ok("100 random 6³ grids match enumeration exactly; TP=3, FP=1, FN=1 gives 0.6".into())
}

// ---------------------------------------------------------------- 4

fn jaccard(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    inter as f64 / union as f64
}

fn lovasz_property() -> Outcome {
    let mut compared = 0;
    for gt_bits in 0u32..16 {
        for pred_bits in 0u32..16 {
            let gt: Vec<u16> = (0..4).map(|v| ((gt_bits >> v) & 1) as u16).collect();
            let pred: Vec<f64> = (0..4).map(|v| ((pred_bits >> v) & 1) as f64).collect();
            let probs = Tensor::matrix(4, 2, pred.iter().flat_map(|&p| [1.0 - p, p]).collect()).unwrap();
            let (losses, _) = lovasz_per_class(&probs, &gt).map_err(|e| e.to_string())?;
            for c in 0..2u16 {
                let g: Vec<bool> = gt.iter().map(|&l| l == c).collect();
                let p: Vec<bool> = pred.iter().map(|&x| (x == 1.0) == (c == 1)).collect();
                match losses[c as usize] {
                    Some(l) => {
                        let want = 1.0 - jaccard(&p, &g);
                        ensure(l == want, || format!("gt {gt_bits:04b} pred {pred_bits:04b} class {c}: {l} vs {want}"))?;
                        compared += 1;
                    }
                    None => ensure(!g.contains(&true), || format!("gt {gt_bits:04b}: class {c} present but not scored"))?,
                }
            }
        }
    }
    let mut worst_perfect = 0.0f64;
    let mut r = ChaCha8Rng::seed_from_u64(4);
    for case in 0..64 {
        let (n, c) = if case < 16 { (4, 2) } else { (r.random_range(1..40), r.random_range(2..7)) };
        let labels: Vec<u16> = if case < 16 {
            (0..4).map(|v| ((case >> v) & 1) as u16).collect()
        } else {
            rand_labels(&mut r, n, c)
        };
        let mut d = vec![0.0; n * c];
        for (v, &l) in labels.iter().enumerate() {
            d[v * c + l as usize] = 1.0;
        }
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::matrix(n, c, d).unwrap());
        let l = lovasz_softmax(&mut tape, p, &labels).map_err(|e| e.to_string())?;
        worst_perfect = worst_perfect.max(tape.value(l).item());
    }
    ensure(worst_perfect <= 1e-9, || format!("perfect prediction loss {worst_perfect:e}"))?;
    Ok(format!(
        "all 256 patterns: {compared} scored class losses equal 1 − Jaccard exactly; perfect predictions ≤ {worst_perfect:e}"
    ))
}

// ---------------------------------------------------------------- 5

/// Tent-kernel bilinear interpolation by enumerating every texel.
fn oracle_bilinear(map: &Tensor, c: usize, u: f64, v: f64) -> f64 {
    let (h, w) = (map.shape()[1], map.shape()[2]);
    let px = (u * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let py = (v * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let mut s = 0.0;
    for y in 0..h {
        for x in 0..w {
            let k = (1.0 - (px - x as f64).abs()).max(0.0) * (1.0 - (py - y as f64).abs()).max(0.0);
            s += k * map.data()[(c * h + y) * w + x];
        }
    }
    s
}

/// Explicit enumeration of every (level, sample) term of one attention call.
fn oracle_attention(store: &ParamStore, params: &EncoderParams, q: &[f64], uv: [f64; 2], pyr: &FeaturePyramid, r: usize) -> Vec<f64> {
    let cfg = &params.config;
    let wa = store.get(params.attention.weight);
    let ba = store.get(params.attention.bias.unwrap());
    let n_out = wa.cols();
    let head: Vec<f64> = (0..n_out)
        .map(|j| ba.data()[j] + (0..q.len()).map(|i| q[i] * wa.data()[i * n_out + j]).sum::<f64>())
        .collect();
    let base = r * cfg.num_levels * cfg.num_samples * 3;
    let mut terms = vec![];
    for l in 0..cfg.num_levels {
        let (h, w) = pyr.level_dims(l);
        for s in 0..cfg.num_samples {
            let k = base + (l * cfg.num_samples + s) * 3;
            terms.push((l, uv[0] + head[k] / w as f64, uv[1] + head[k + 1] / h as f64, head[k + 2]));
        }
    }
    let z: f64 = terms.iter().map(|t| t.3.exp()).sum();
    let cf = params.feature_channels;
    let mut feat = vec![0.0; cf];
    for &(l, u, v, logit) in &terms {
        for (c, f) in feat.iter_mut().enumerate() {
            *f += logit.exp() / z * oracle_bilinear(&pyr.levels[l], c, u, v);
        }
    }
    let vp = store.get(params.value_proj);
    (0..params.width).map(|j| (0..cf).map(|c| feat[c] * vp.data()[c * params.width + j]).sum()).collect()
}

fn attention_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut r = ChaCha8Rng::seed_from_u64(500 + seed);
        let cfg = EncoderConfig {
            num_refs: r.random_range(1..4),
            num_samples: r.random_range(1..5),
            num_levels: r.random_range(1..4),
            offset_hidden: 4,
        };
        let (d, cf) = (r.random_range(2..9), r.random_range(1..6));
        let mut store = ParamStore::new();
        let params = EncoderParams::new(&mut store, "enc", cfg.clone(), d, cf, &mut r).unwrap();
        randomize_biases(&mut store, &mut r);
        let sensor = if seed % 2 == 0 { front_camera(16, 24) } else { bev_sensor(20) };
        let pyr = rand_pyramid(&mut r, sensor, cf, cfg.num_levels);
        let q: Vec<f64> = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
        let uv = [r.random_range(0.0..1.0), r.random_range(0.0..1.0)];
        let k = r.random_range(0..cfg.num_refs);
        let got = deformable_attention(&store, &params, &q, uv, &pyr, k).map_err(|e| e.to_string())?;
        let want = oracle_attention(&store, &params, &q, uv, &pyr, k);
        let diff = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(diff <= 1e-9, || format!("instance {seed}: differs by {diff:e}"))?;
        worst = worst.max(diff);
    }

    // One-hot: a single dominant slot with zero offsets is one bilinear sample.
    let cfg = EncoderConfig {
        num_refs: 1,
        num_samples: 3,
        num_levels: 2,
        offset_hidden: 4,
    };
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let params = EncoderParams::new(&mut store, "enc", cfg, 4, 4, &mut r).unwrap();
    store.get_mut(params.attention.weight).data_mut().fill(0.0);
    let bias = store.get_mut(params.attention.bias.unwrap()).data_mut();
    bias.fill(0.0);
    bias[(3 + 2) * 3 + 2] = 1000.0;
    let vp = store.get_mut(params.value_proj).data_mut();
    vp.fill(0.0);
    for i in 0..4 {
        vp[i * 4 + i] = 1.0;
    }
    let pyr = rand_pyramid(&mut r, front_camera(16, 24), 4, 2);
    let uv = [0.37, 0.61];
    let q: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
    let out = deformable_attention(&store, &params, &q, uv, &pyr, 0).map_err(|e| e.to_string())?;
    for (c, &o) in out.iter().enumerate() {
        let want = oracle_bilinear(&pyr.levels[1], c, uv[0], uv[1]);
        ensure((o - want).abs() <= 1e-9, || format!("one-hot channel {c}: {o} vs {want}"))?;
    }
    Ok(format!("50 random instances within {worst:.1e}; one-hot case equals a single bilinear sample"))
}

// ---------------------------------------------------------------- 6

/// Baseline on this machine: IoU 0.9998, mIoU 0.9989 in about 70 s.
const FIT_IOU_PIN: f64 = 0.95;
const FIT_MIOU_PIN: f64 = 0.90;

fn direct_fit() -> Outcome {
    let t = Instant::now();
    let bundle = gen_scene(&SceneSpec {
        seed: 1,
        ..SceneSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let cfg = RunConfig::default();
    ensure(bundle.gt.spec.dims == [64, 64, 8] && cfg.fit.gaussians == 512 && cfg.fit.steps == 500, || "unexpected fit setup".into())?;
    let out = fit_scene(&bundle, &cfg, None).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let (iou, miou) = (out.evaluation.iou, out.evaluation.miou);
    let detail = format!("IoU {iou:.4}, mIoU {miou:.4}, loss {:.4} -> {:.4}, {secs:.0} s", out.initial_loss, out.final_loss);
    ensure(secs < 300.0, || format!("{detail}: over 5 min"))?;
    ensure(iou >= 0.6 && miou >= 0.5, || format!("{detail}: below 0.6 / 0.5"))?;
    ensure(iou >= FIT_IOU_PIN && miou >= FIT_MIOU_PIN, || format!("{detail}: below pinned {FIT_IOU_PIN} / {FIT_MIOU_PIN}"))?;
    Ok(format!("{detail} (floors 0.6 / 0.5, pinned {FIT_IOU_PIN} / {FIT_MIOU_PIN})"))
}

// ---------------------------------------------------------------- 7

fn toy_training() -> Outcome {
    let t = Instant::now();
    let scenes = gen_scene_set(&SceneSpec::toy(), 32, 100).map_err(|e| e.to_string())?;
    let cfg = RunConfig::toy();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let report = harness::train(
        &cfg,
        &scenes,
        TrainOptions {
            out: dir.path(),
            resume: None,
        },
    )
    .map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let (l0, l1) = (report.initial_smoothed_loss.unwrap_or(f64::NAN), report.final_smoothed_loss.unwrap_or(f64::NAN));
    let untrained = report.untrained.ok_or("no untrained evaluation")?.miou;
    let fin = report.final_eval.miou;
    let detail = format!(
        "{} steps, 2 blocks, P = 256, camera + lidar_bev, 32 scenes: smoothed loss {l0:.4} -> {l1:.4}, held-out mIoU {untrained:.4} -> {fin:.4}, {secs:.0} s",
        report.steps
    );
    ensure(cfg.pipeline.blocks == 2 && cfg.pipeline.gaussian_count == 256, || "unexpected toy config".into())?;
    ensure(l1 < l0, || format!("{detail}: loss did not decrease"))?;
    ensure(fin >= 2.0 * untrained, || format!("{detail}: mIoU below 2× untrained"))?;
    ensure(secs < 1800.0, || format!("{detail}: over 30 min"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn median3(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn fusion_direction() -> Outcome {
    let mut fused = vec![];
    let mut camera = vec![];
    for (scene_seed, model_seed) in [(200u64, 0u64), (300, 1), (400, 2)] {
        let spec = occlusion_preset(&SceneSpec::toy());
        let scenes = gen_scene_set(&spec, 32, scene_seed).map_err(|e| e.to_string())?;
        for (modalities, sink) in [(vec![Modality::Camera, Modality::LidarBev], &mut fused), (vec![Modality::Camera], &mut camera)] {
            let mut cfg = RunConfig::toy();
            cfg.pipeline.modalities = modalities;
            cfg.pipeline.seed = model_seed;
            cfg.train.steps = 300;
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let report = harness::train(
                &cfg,
                &scenes,
                TrainOptions {
                    out: dir.path(),
                    resume: None,
                },
            )
            .map_err(|e| e.to_string())?;
            sink.push(report.final_eval.miou);
        }
    }
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    let (mf, mc) = (median3(fused.clone()), median3(camera.clone()));
    let detail = format!(
        "median held-out mIoU camera+lidar_bev {mf:.4} ({}) vs camera-only {mc:.4} ({}), margin {:+.4}",
        fmt(&fused),
        fmt(&camera),
        mf - mc
    );
    ensure(mf >= mc, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn performance() -> Outcome {
    let opts = BenchOptions { repeats: 5, dense: true };
    let a = bench(BenchPreset::Paper, opts).map_err(|e| e.to_string())?;
    let b = bench(BenchPreset::Paper, opts).map_err(|e| e.to_string())?;
    let speed = |r: &gsocc::harness::BenchReport| r.culled_speedup.unwrap_or(0.0);
    ensure(speed(&a) >= 10.0 && speed(&b) >= 10.0, || format!("culled speedup {:.1}× / {:.1}×", speed(&a), speed(&b)))?;
    let mut worst = ("", 0.0f64);
    for ea in &a.entries {
        let eb = b.entry(&ea.stage).ok_or_else(|| format!("stage {} missing from second run", ea.stage))?;
        let rel = (ea.median_ms - eb.median_ms).abs() / ea.median_ms.min(eb.median_ms);
        if rel > worst.1 {
            worst = (&ea.stage, rel);
        }
    }
    ensure(a.entries.len() == b.entries.len(), || "runs report different stages".into())?;
    let detail = format!(
        "P = 6400 on 200×200×16: culled speedup {:.1}× / {:.1}×, largest run-to-run difference {:.1}% ({})",
        speed(&a),
        speed(&b),
        100.0 * worst.1,
        worst.0
    );
    ensure(worst.1 < 0.2, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 10

fn prop<S: Strategy>(name: &str, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let mut runner = TestRunner::new_with_rng(
        PropConfig {
            cases: 100,
            failure_persistence: None,
            ..PropConfig::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    );
    runner.run(&strategy, test).map_err(|e| format!("{name}: {e}"))
}

fn invariant_suites() -> Outcome {
    let mut names = vec![];
    let mut check = |name: &'static str, r: Result<(), String>| -> Result<(), String> {
        names.push(name);
        r
    };

    check(
        "covariance is symmetric with eigenvalues scale²",
        prop("covariance", any::<u64>(), |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let g = rand_gaussian(&mut r, [-5.0; 3], [5.0; 3], (0.05, 3.0), 2);
            let c = build_covariance(&g.scale, &g.rotation).unwrap();
            let m = Matrix3::from_fn(|i, j| c[i][j]);
            prop_assert!((m - m.transpose()).amax() < 1e-12);
            let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
            let mut s2: Vec<f64> = g.scale.iter().map(|s| s * s).collect();
            ev.sort_by(f64::total_cmp);
            s2.sort_by(f64::total_cmp);
            for (a, b) in ev.iter().zip(&s2) {
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b));
            }
            Ok(())
        }),
    )?;

    check(
        "Gaussian sets round-trip byte-identically",
        prop("gocc round trip", (any::<u64>(), 0usize..20, 1usize..6), |(seed, p, c)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let gs: Vec<_> = (0..p).map(|_| rand_gaussian(&mut r, [-5.0; 3], [5.0; 3], (0.1, 2.0), c)).collect();
            let q: Vec<f64> = (0..p * 3).map(|_| r.random_range(-1.0..1.0)).collect();
            let set = GaussianSet::new(gs, q, 3).unwrap();
            let mut a = vec![];
            write_gaussians_binary(&mut a, &set).unwrap();
            let back = read_gaussians_binary(&mut a.as_slice()).unwrap();
            let mut b = vec![];
            write_gaussians_binary(&mut b, &back).unwrap();
            prop_assert_eq!(a, b);
            Ok(())
        }),
    )?;

    check(
        "reverse mode is linear in the loss",
        prop("gradient linearity", (any::<u64>(), -2.0f64..2.0, -2.0f64..2.0), |(seed, alpha, beta)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
            let w = rand_tensor(&mut r, &[4, 2], -1.0, 1.0);
            let grad = |a: f64, b: f64| {
                let mut t = Tape::new();
                let xv = t.leaf(x.clone(), true);
                let wv = t.constant(w.clone());
                let h = t.matmul(xv, wv).unwrap();
                let f1 = t.tanh(h);
                let f1 = t.sum(f1, None).unwrap();
                let s = t.sigmoid(xv);
                let f2 = t.mul(s, xv).unwrap();
                let f2 = t.sum(f2, None).unwrap();
                let f1 = t.scale(f1, a);
                let f2 = t.scale(f2, b);
                let l = t.add(f1, f2).unwrap();
                t.backward(l).unwrap();
                t.grad_or_zeros(xv)
            };
            let (g1, g2, g) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(alpha, beta));
            for i in 0..g.len() {
                prop_assert!((g.data()[i] - alpha * g1.data()[i] - beta * g2.data()[i]).abs() < 1e-12);
            }
            Ok(())
        }),
    )?;

    let spec = GridSpec::new([0.0; 3], 0.5, [8, 8, 8]).unwrap();
    check(
        "occupancy lies in [0, 1] and never drops when a Gaussian is added",
        prop("splat monotonicity", (any::<u64>(), 1usize..12), |(seed, p)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let gs: Vec<_> = (0..=p).map(|_| rand_gaussian(&mut r, [0.0; 3], [4.0; 3], (0.2, 1.5), 2)).collect();
            let cfg = SplatConfig::default();
            let fewer = splat_occupancy(&GaussianArrays::from_gaussians(&gs[..p]), &spec, &cfg).unwrap();
            let more = splat_occupancy(&GaussianArrays::from_gaussians(&gs), &spec, &cfg).unwrap();
            for (a, b) in fewer.iter().zip(&more) {
                prop_assert!((0.0..=1.0).contains(a) && (0.0..=1.0).contains(b));
                prop_assert!(b >= a);
            }
            Ok(())
        }),
    )?;

    check(
        "attention weights of every reference point sum to one",
        prop("attention weights", (any::<u64>(), 0.1f64..50.0), |(seed, mag)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let params = EncoderParams::new(&mut store, "enc", EncoderConfig::default(), 6, 3, &mut r).unwrap();
            let q: Vec<f64> = (0..6).map(|_| r.random_range(-mag..mag)).collect();
            for k in 0..params.config.num_refs {
                let w = attention_weights(&store, &params, &q, k);
                prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            Ok(())
        }),
    )?;

    check(
        "fusion is equivariant to permuting Gaussians",
        prop("fusion permutation", any::<u64>(), |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let (p, d) = (8, 3);
            let mut store = ParamStore::new();
            let params = FusionParams::new(&mut store, "fuse", 2, d, 1.0, &mut r).unwrap();
            let means: Vec<[f64; 3]> = (0..p).map(|_| [0, 1, 2].map(|_| r.random_range(-2.0..2.0))).collect();
            let feats = [rand_tensor(&mut r, &[p, d], -1.0, 1.0), rand_tensor(&mut r, &[p, d], -1.0, 1.0)];
            let mut perm: Vec<usize> = (0..p).collect();
            perm.reverse();
            perm.swap(0, r.random_range(0..p));
            let run = |feats: &[Tensor], means: &[[f64; 3]]| {
                let mut t = Tape::new();
                let bound = store.bind(&mut t, false);
                let vars: Vec<Var> = feats.iter().map(|f| t.constant(f.clone())).collect();
                let out = fuse(&mut t, &bound, &params, &vars, means).unwrap();
                t.value(out).clone()
            };
            let permute = |x: &Tensor| Tensor::matrix(p, d, perm.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap();
            let base = run(&feats, &means);
            let moved = run(&[permute(&feats[0]), permute(&feats[1])], &perm.iter().map(|&i| means[i]).collect::<Vec<_>>());
            for (k, &i) in perm.iter().enumerate() {
                for (a, b) in moved.row(k).iter().zip(base.row(i)) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
            Ok(())
        }),
    )?;

    check(
        "refined Gaussians stay valid",
        prop("refine validity", (any::<u64>(), 0.1f64..4.0), |(seed, mag)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let (d, c, p) = (4, 3, 5);
            let cfg = RefineConfig::default();
            let mut store = ParamStore::new();
            let params = RefineParams::new(&mut store, "refine", d, c, cfg, &mut r).unwrap();
            let gs: Vec<_> = (0..p).map(|_| rand_gaussian(&mut r, [-3.0; 3], [3.0; 3], (0.1, 1.0), c)).collect();
            let set = GaussianSet::new(gs, vec![0.0; p * d], d).unwrap();
            let q = rand_tensor(&mut r, &[p, d], -mag, mag);
            let out = refine_values(&store, &params, &set, &q).unwrap();
            for (a, b) in set.gaussians.iter().zip(&out.gaussians) {
                prop_assert!(b.validate().is_ok());
                prop_assert!(b.scale.iter().all(|s| (cfg.scale_min..=cfg.scale_max).contains(s)));
                prop_assert!((b.rotation.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
                prop_assert!(b.opacity > 0.0 && b.opacity < 1.0);
                prop_assert!((0..3).all(|k| (b.mean[k] - a.mean[k]).abs() <= cfg.offset_range + 1e-12));
            }
            Ok(())
        }),
    )?;

    check(
        "per-class Lovász lies in [0, 1] and BCE is non-negative",
        prop("loss ranges", (any::<u64>(), 1usize..30, 2usize..6), |(seed, n, c)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let labels = rand_labels(&mut r, n, c);
            let (losses, _) = lovasz_per_class(&rand_probs(&mut r, n, c), &labels).unwrap();
            prop_assert!(losses.iter().flatten().all(|l| (0.0..=1.0).contains(l)));
            let alpha: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
            prop_assert!(bce_value(&alpha, &labels).unwrap() >= 0.0);
            Ok(())
        }),
    )?;

    check(
        "IoU and mIoU lie in [0, 1] and equal 1 on identical grids",
        prop("metric ranges", (any::<u64>(), 2usize..8), |(seed, c)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let gt = rand_labels(&mut r, 216, c);
            let pred = rand_labels(&mut r, 216, c);
            let e = evaluate(&pred, &gt, c, MiouMode::ExcludeAbsent).unwrap();
            prop_assert!((0.0..=1.0).contains(&e.iou) && (0.0..=1.0).contains(&e.miou));
            let same = evaluate(&gt, &gt, c, MiouMode::ExcludeAbsent).unwrap();
            if gt.iter().any(|&l| l != 0) {
                prop_assert_eq!((same.iou, same.miou), (1.0, 1.0));
            }
            Ok(())
        }),
    )?;

    check(
        "scene generation is deterministic with ground on the bottom layer",
        prop("scene determinism", 0u64..1_000_000, |seed| {
            let mut spec = SceneSpec::toy();
            spec.seed = seed;
            spec.rig.image_dims = [8, 12];
            spec.point_count = 64;
            let a = gen_scene(&spec).unwrap();
            let b = gen_scene(&spec).unwrap();
            prop_assert_eq!(&a.gt.labels, &b.gt.labels);
            prop_assert_eq!(&a.points, &b.points);
            let [nx, ny, _] = a.gt.spec.dims;
            for i in 0..nx {
                for j in 0..ny {
                    prop_assert!(a.gt.label_at([i, j, 0]) != 0);
                }
            }
            Ok(())
        }),
    )?;

    check(
        "run configs round-trip through TOML",
        prop("config round trip", (1usize..6, 1usize..4096, 1e-6f64..1e-1, 1u64..100_000), |(blocks, p, lr, steps)| {
            let mut cfg = RunConfig::toy();
            cfg.pipeline.blocks = blocks;
            cfg.pipeline.gaussian_count = p;
            cfg.optimizer.lr = lr;
            cfg.train.steps = steps;
            let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            prop_assert_eq!(back, cfg);
            Ok(())
        }),
    )?;

    Ok(format!("{} properties × 100 cases: {}", names.len(), names.join("; ")))
}
