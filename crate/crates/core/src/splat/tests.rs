use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diff::{check_gradients, GradCheckConfig, Tensor};
use crate::geometry::{self, axis_angle};
use crate::model::{gaussian_weight, GridSpec, SemanticGaussian};

fn random_gaussian(rng: &mut impl Rng, spec: &GridSpec, c: usize, scale_range: (f64, f64)) -> SemanticGaussian {
    let hi = spec.max_corner();
    let mean = [0, 1, 2].map(|a| rng.random_range(spec.min_corner[a]..hi[a]));
    let scale = [0, 1, 2].map(|_| rng.random_range(scale_range.0..scale_range.1));
    let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0)];
    let rotation = axis_angle(&axis, rng.random_range(-3.0..3.0));
    let logits = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
    SemanticGaussian::new(mean, scale, rotation, rng.random_range(0.05..0.95), logits).unwrap()
}

fn random_arrays(seed: u64, p: usize, spec: &GridSpec, c: usize, scale_range: (f64, f64)) -> GaussianArrays {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gs: Vec<_> = (0..p).map(|_| random_gaussian(&mut rng, spec, c, scale_range)).collect();
    GaussianArrays::from_gaussians(&gs)
}

/// Brute-force occupancy over every voxel and every Gaussian, through the
/// model-level density rather than the kernel.
fn dense_oracle(g: &GaussianArrays, spec: &GridSpec) -> Vec<f64> {
    let gs = g.to_gaussians();
    (0..spec.num_voxels())
        .map(|v| {
            let x = spec.center_unchecked(spec.unravel(v));
            let keep: f64 = gs
                .iter()
                .map(|gi| 1.0 - (gi.opacity * gaussian_weight(&x, gi).unwrap()).min(MAX_CONTRIBUTION))
                .product();
            1.0 - keep
        })
        .collect()
}

fn cube(n: usize, size: f64) -> GridSpec {
    GridSpec::new([0.0; 3], size, [n, n, n]).unwrap()
}

#[test]
fn cull_outside_grid_is_empty() {
    let spec = cube(8, 1.0);
    let g = GaussianArrays::from_gaussians(&[SemanticGaussian::isotropic([30.0, 4.0, 4.0], 1.0, 0.5, 2)]);
    assert_eq!(cull(&g, &spec, &SplatConfig::default()).boxes, vec![None]);
}

#[test]
fn cull_isotropic_spans_four_sigma() {
    let spec = cube(40, 1.0);
    // Centre 20.5 with σ = 2: 4σ covers centres 12.5..=28.5.
    let g = GaussianArrays::from_gaussians(&[SemanticGaussian::isotropic([20.5, 20.5, 20.5], 2.0, 0.5, 2)]);
    let b = cull(&g, &spec, &SplatConfig::default()).boxes[0].unwrap();
    assert_eq!(b.lo, [12; 3]);
    assert_eq!(b.hi, [29; 3]);
}

#[test]
fn cull_is_conservative_against_brute_force_scan() {
    let spec = cube(12, 0.5);
    let cfg = SplatConfig::default();
    let threshold = (-0.5 * cfg.cutoff_sigma * cfg.cutoff_sigma).exp();
    for seed in 0..20 {
        let g = random_arrays(seed, 6, &spec, 3, (0.1, 1.0));
        let boxes = cull(&g, &spec, &cfg).boxes;
        for (i, gi) in g.to_gaussians().iter().enumerate() {
            for v in 0..spec.num_voxels() {
                let idx = spec.unravel(v);
                if gaussian_weight(&spec.center_unchecked(idx), gi).unwrap() > threshold {
                    assert!(boxes[i].is_some_and(|b| b.contains(idx)), "seed {seed} gaussian {i} voxel {idx:?}");
                }
            }
        }
    }
}

#[test]
fn single_gaussian_at_voxel_centre_gives_its_opacity() {
    let spec = cube(5, 1.0);
    let g = GaussianArrays::from_gaussians(&[SemanticGaussian::isotropic([2.5, 2.5, 2.5], 0.7, 0.37, 2)]);
    let occ = splat_occupancy(&g, &spec, &SplatConfig::default()).unwrap();
    assert!((occ[spec.linear_index([2, 2, 2])] - 0.37).abs() < 1e-15);
}

#[test]
fn two_half_contributions_superpose_to_three_quarters() {
    let spec = cube(5, 1.0);
    let a = SemanticGaussian::isotropic([2.5, 2.5, 2.5], 1.0, 0.5, 2);
    let b = SemanticGaussian::isotropic([2.5, 2.5, 2.5], 2.0, 0.5, 2);
    let occ = splat_occupancy(&GaussianArrays::from_gaussians(&[a, b]), &spec, &SplatConfig::default()).unwrap();
    assert!((occ[spec.linear_index([2, 2, 2])] - 0.75).abs() < 1e-15);
}

#[test]
fn culled_matches_dense_oracle_on_random_sets() {
    let spec = cube(8, 0.5);
    let cfg = SplatConfig::default();
    for seed in 0..10 {
        let g = random_arrays(seed, 8, &spec, 3, (0.2, 1.5));
        let occ = splat_occupancy(&g, &spec, &cfg).unwrap();
        let oracle = dense_oracle(&g, &spec);
        let err = occ.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-3, "seed {seed}: {err}");
        let dense = splat_dense(&g, &spec, &cfg, false).unwrap().occupancy;
        let err = dense.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-12, "library dense path disagrees: {err}");
    }
}

#[test]
fn semantics_one_hot_at_mean() {
    let spec = cube(5, 1.0);
    let mut g = SemanticGaussian::isotropic([2.5, 2.5, 2.5], 0.3, 1.0, 5);
    g.logits = vec![-50.0, -50.0, -50.0, 50.0, -50.0];
    let cfg = SplatConfig::default();
    let (probs, labels) = splat_semantics(&GaussianArrays::from_gaussians(&[g]), &spec, &cfg).unwrap();
    let v = spec.linear_index([2, 2, 2]);
    assert!((probs[v * 5 + 3] - 1.0).abs() < 1e-7);
    assert_eq!(labels[v], 3);
    // Far corner: nothing within the cutoff.
    assert_eq!(labels[spec.linear_index([0, 0, 0])], 0);
    assert!(probs[..5].iter().all(|&p| p == 0.0));
}

#[test]
fn semantics_equal_mixture_breaks_ties_low() {
    let spec = cube(5, 1.0);
    let mk = |class: usize| {
        let mut g = SemanticGaussian::isotropic([2.5, 2.5, 2.5], 0.5, 0.9, 4);
        g.logits = (0..4).map(|c| if c == class { 60.0 } else { -60.0 }).collect();
        g
    };
    let cfg = SplatConfig::default();
    let (probs, labels) = splat_semantics(&GaussianArrays::from_gaussians(&[mk(3), mk(2)]), &spec, &cfg).unwrap();
    let v = spec.linear_index([2, 2, 2]);
    assert!((probs[v * 4 + 2] - 0.5).abs() < 1e-7);
    assert!((probs[v * 4 + 3] - 0.5).abs() < 1e-7);
    assert_eq!(labels[v], 2);
}

#[test]
fn occupancy_gradient_wrt_opacity_closed_form() {
    let spec = cube(4, 1.0);
    let cfg = SplatConfig::default();
    let g = random_arrays(5, 3, &spec, 2, (0.8, 1.5));
    let fwd = splat_forward(&g, &spec, &cfg, false).unwrap();
    let v = spec.linear_index([1, 2, 1]);
    let mut upstream = vec![0.0; spec.num_voxels()];
    upstream[v] = 1.0;
    let grads = splat_backward(&g, &spec, &cfg, &fwd, &upstream, None).unwrap();
    let x = spec.center_unchecked([1, 2, 1]);
    let gs = g.to_gaussians();
    let dens: Vec<f64> = gs.iter().map(|gi| gaussian_weight(&x, gi).unwrap()).collect();
    for i in 0..3 {
        let others: f64 = (0..3).filter(|&j| j != i).map(|j| 1.0 - gs[j].opacity * dens[j]).product();
        assert!((grads.opacities[i] - dens[i] * others).abs() < 1e-12);
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let spec = cube(4, 1.0);
    let cfg = SplatConfig::default();
    let g = random_arrays(6, 3, &spec, 3, (0.5, 1.5));
    let fwd = splat_forward(&g, &spec, &cfg, true).unwrap();
    let n = spec.num_voxels();
    let grads = splat_backward(&g, &spec, &cfg, &fwd, &vec![0.0; n], Some(&vec![0.0; n * 3])).unwrap();
    for v in [&grads.means, &grads.scales, &grads.rotations, &grads.opacities, &grads.logits] {
        assert!(v.iter().all(|&x| x == 0.0));
    }
}

fn splat_inputs(g: &GaussianArrays) -> Vec<Tensor> {
    let p = g.len();
    vec![
        Tensor::matrix(p, 3, g.means.clone()).unwrap(),
        Tensor::matrix(p, 3, g.scales.clone()).unwrap(),
        Tensor::matrix(p, 4, g.rotations.clone()).unwrap(),
        Tensor::matrix(p, 1, g.opacities.clone()).unwrap(),
        Tensor::matrix(p, g.num_classes, g.logits.clone()).unwrap(),
    ]
}

fn fd_splat(g: &GaussianArrays, spec: &GridSpec, cfg: &SplatConfig) {
    let report = check_gradients(
        &splat_inputs(g),
        |tape, v| {
            let vars = SplatVars {
                means: v[0],
                scales: v[1],
                rotations: v[2],
                opacities: v[3],
                logits: v[4],
            };
            // The kernel reads q / |q|, so finite differences see the
            // tangent-projected gradient.
            splat_on_tape(tape, &vars, spec, cfg)
        },
        GradCheckConfig {
            rel_tol: 1e-5,
            abs_floor: 1e-8,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn splat_gradients_match_finite_differences() {
    let spec = cube(6, 0.5);
    // Wide cutoff: cull boxes cover every voxel with a non-negligible
    // weight, so perturbations never toggle a contribution on or off.
    let cfg = SplatConfig {
        cutoff_sigma: 9.0,
        ..Default::default()
    };
    for seed in 0..20 {
        fd_splat(&random_arrays(100 + seed, 4, &spec, 3, (0.3, 1.0)), &spec, &cfg);
    }
}

#[test]
fn splat_gradients_at_default_cutoff_when_boxes_cover_grid() {
    let spec = cube(6, 0.5);
    let cfg = SplatConfig::default();
    for seed in 0..5 {
        fd_splat(&random_arrays(200 + seed, 4, &spec, 3, (2.0, 3.0)), &spec, &cfg);
    }
}

#[test]
fn results_do_not_depend_on_tiling() {
    let spec = GridSpec::new([0.0; 3], 0.5, [13, 9, 7]).unwrap();
    let cfg = SplatConfig::default();
    let g = random_arrays(9, 12, &spec, 4, (0.2, 1.2));
    let base = kernel::splat_forward_tiled(&g, &spec, &cfg, true, 8).unwrap();
    for tile in [1, 3, 5, 16] {
        let other = kernel::splat_forward_tiled(&g, &spec, &cfg, true, tile).unwrap();
        assert_eq!(other.occupancy, base.occupancy);
        assert_eq!(other.class_probs, base.class_probs);
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn occupancy_monotone_in_opacity(seed in any::<u64>(), which in 0usize..5, bump in 0.0f64..0.5) {
        let spec = cube(6, 0.5);
        let cfg = SplatConfig::default();
        let g = random_arrays(seed, 5, &spec, 2, (0.2, 1.0));
        let before = splat_occupancy(&g, &spec, &cfg).unwrap();
        let mut h = g.clone();
        h.opacities[which] = (h.opacities[which] + bump).min(1.0);
        let after = splat_occupancy(&h, &spec, &cfg).unwrap();
        prop_assert!(before.iter().zip(&after).all(|(b, a)| *a >= *b));
    }

    #[test]
    fn appending_a_gaussian_never_lowers_occupancy(seed in any::<u64>()) {
        let spec = cube(6, 0.5);
        let cfg = SplatConfig::default();
        let g = random_arrays(seed, 5, &spec, 2, (0.2, 1.0));
        let mut gs = g.to_gaussians();
        let before = splat_occupancy(&GaussianArrays::from_gaussians(&gs), &spec, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        gs.push(random_gaussian(&mut rng, &spec, 2, (0.2, 1.0)));
        let after = splat_occupancy(&GaussianArrays::from_gaussians(&gs), &spec, &cfg).unwrap();
        prop_assert!(before.iter().zip(&after).all(|(b, a)| *a >= *b));
    }

    #[test]
    fn occupancy_in_unit_interval_and_zero_outside_boxes(seed in any::<u64>()) {
        let spec = cube(7, 0.5);
        let cfg = SplatConfig::default();
        let g = random_arrays(seed, 4, &spec, 2, (0.05, 0.4));
        let out = splat_forward(&g, &spec, &cfg, false).unwrap();
        for v in 0..spec.num_voxels() {
            let a = out.occupancy[v];
            prop_assert!((0.0..=1.0).contains(&a));
            let idx = spec.unravel(v);
            if !out.cull.boxes.iter().flatten().any(|b| b.contains(idx)) {
                prop_assert_eq!(a, 0.0);
            }
        }
    }

    #[test]
    fn truncation_stays_within_analytic_bound(seed in any::<u64>(), cutoff_pick in 0usize..4) {
        let cutoff = [2.0, 3.0, 4.0, 6.0][cutoff_pick];
        let spec = cube(8, 0.5);
        let cfg = SplatConfig { cutoff_sigma: cutoff, ..Default::default() };
        let p = 16;
        let g = random_arrays(seed, p, &spec, 2, (0.2, 1.0));
        let culled = splat_occupancy(&g, &spec, &cfg).unwrap();
        let oracle = dense_oracle(&g, &spec);
        let bound = (-0.5 * cutoff * cutoff).exp() * p as f64;
        prop_assert!(max_diff(&culled, &oracle) <= bound);
    }

    #[test]
    fn field_is_rigid_motion_equivariant(seed in any::<u64>()) {
        let spec = cube(6, 0.5);
        let cfg = SplatConfig::default();
        let g = random_arrays(seed, 6, &spec, 3, (0.2, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let motion = axis_angle(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0], rng.random_range(-3.0..3.0));
        let rm = geometry::quat_to_mat(&motion);
        let shift = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let moved: Vec<_> = g.to_gaussians().into_iter().map(|mut gi| {
            gi.mean = geometry::add(&geometry::mat_vec(&rm, &gi.mean), &shift);
            gi.rotation = geometry::quat_mul(&motion, &gi.rotation);
            gi
        }).collect();
        let moved = GaussianArrays::from_gaussians(&moved);
        for _ in 0..8 {
            let x = [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)];
            let y = geometry::add(&geometry::mat_vec(&rm, &x), &shift);
            let (a0, p0) = field_at(&g, &x, &cfg);
            let (a1, p1) = field_at(&moved, &y, &cfg);
            prop_assert!((a0 - a1).abs() <= 1e-9);
            prop_assert!(max_diff(&p0, &p1) <= 1e-9);
        }
    }

    #[test]
    fn labels_are_deterministic(seed in any::<u64>()) {
        let spec = cube(6, 0.5);
        let cfg = SplatConfig::default();
        // Quantized logits make exact class ties common.
        let mut g = random_arrays(seed, 6, &spec, 4, (0.3, 1.0));
        g.logits.iter_mut().for_each(|l| *l = l.round());
        let (_, a) = splat_semantics(&g, &spec, &cfg).unwrap();
        let (_, b) = splat_semantics(&g, &spec, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }
}
