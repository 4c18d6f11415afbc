use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diff::{check_gradients, GradCheckConfig};

fn random_probs(rng: &mut impl Rng, n: usize, c: usize) -> Tensor {
    let mut d = Vec::with_capacity(n * c);
    for _ in 0..n {
        let e: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0f64..2.0).exp()).collect();
        let s: f64 = e.iter().sum();
        d.extend(e.iter().map(|x| x / s));
    }
    Tensor::matrix(n, c, d).unwrap()
}

fn random_labels(rng: &mut impl Rng, n: usize, c: usize) -> Vec<u16> {
    (0..n).map(|_| rng.random_range(0..c as u16)).collect()
}

fn jaccard(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    inter as f64 / union as f64
}

#[test]
fn bce_closed_forms() {
    let labels = vec![0, 3, 1, 0];
    let perfect: Vec<f64> = labels.iter().map(|&l| if l != 0 { 1.0 } else { 0.0 }).collect();
    assert!(bce_value(&perfect, &labels).unwrap() <= 2e-7);
    let half = bce_value(&[0.5; 4], &labels).unwrap();
    assert!((half - std::f64::consts::LN_2).abs() < 1e-6);
    assert!(bce_value(&[0.5; 3], &labels).is_err());
}

#[test]
fn bce_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let labels = random_labels(&mut rng, 10, 3);
        let a = Tensor::matrix(10, 1, (0..10).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap();
        let r = check_gradients(&[a], |t, v| bce_occupancy(t, v[0], &labels), GradCheckConfig::default()).unwrap();
        assert!(r.passed, "{r:?}");
    }
}

#[test]
fn lovasz_of_correct_one_hot_is_zero() {
    let labels = vec![0u16, 2, 1, 2, 0];
    let mut d = vec![0.0; 15];
    for (v, &l) in labels.iter().enumerate() {
        d[v * 3 + l as usize] = 1.0;
    }
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::matrix(5, 3, d).unwrap());
    let l = lovasz_softmax(&mut tape, p, &labels).unwrap();
    assert!(tape.value(l).item() <= 1e-9);
}

#[test]
fn hard_binary_predictions_give_jaccard_loss() {
    for gt_bits in 0u32..16 {
        for pred_bits in 0u32..16 {
            let gt: Vec<u16> = (0..4).map(|v| ((gt_bits >> v) & 1) as u16).collect();
            let pred: Vec<f64> = (0..4).map(|v| ((pred_bits >> v) & 1) as f64).collect();
            let probs = Tensor::matrix(4, 2, pred.iter().flat_map(|&p| [1.0 - p, p]).collect()).unwrap();
            let (losses, _) = lovasz_per_class(&probs, &gt).unwrap();
            for c in 0..2u16 {
                let g: Vec<bool> = gt.iter().map(|&l| l == c).collect();
                let p: Vec<bool> = pred.iter().map(|&x| (x == 1.0) == (c == 1)).collect();
                match losses[c as usize] {
                    Some(l) => assert_eq!(l, 1.0 - jaccard(&p, &g), "gt {gt_bits:04b} pred {pred_bits:04b} class {c}"),
                    None => assert!(!g.iter().any(|&x| x)),
                }
            }
        }
    }
}

#[test]
fn lovasz_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let labels = random_labels(&mut rng, 8, 3);
        let p = random_probs(&mut rng, 8, 3);
        let r = check_gradients(
            &[p],
            |t, v| lovasz_softmax(t, v[0], &labels),
            GradCheckConfig {
                rel_tol: 1e-5,
                ..GradCheckConfig::default()
            },
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}

#[test]
fn composition_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let x = Tensor::matrix(6, 4, (0..24).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let r = check_gradients(&[x], |t, v| compose_class_distribution(t, v[0]), GradCheckConfig::default()).unwrap();
        assert!(r.passed, "{r:?}");
    }
}

#[test]
fn composition_keeps_empty_voxels_empty() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(2, 3, vec![0.0, 0.0, 0.0, 0.8, 0.25, 0.75]).unwrap());
    let q = compose_class_distribution(&mut tape, x).unwrap();
    let d = tape.value(q).data();
    assert_eq!(&d[..2], &[1.0, 0.0]);
    assert!((d[2] - 0.4).abs() < 1e-15 && (d[3] - 0.6).abs() < 1e-15);
}

fn splat_like(rng: &mut impl Rng, n: usize, c: usize) -> Tensor {
    let p = random_probs(rng, n, c);
    let mut d = vec![];
    for v in 0..n {
        d.push(rng.random_range(0.05..0.95));
        d.extend_from_slice(p.row(v));
    }
    Tensor::matrix(n, c + 1, d).unwrap()
}

#[test]
fn single_block_total_is_lovasz_plus_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let labels = random_labels(&mut rng, 12, 3);
    let s = splat_like(&mut rng, 12, 3);
    let mut tape = Tape::new();
    let x = tape.constant(s.clone());
    let (total, blocks) = total_loss(&mut tape, &[x], &labels).unwrap();
    let sum = tape.value(blocks[0].lovasz).item() + tape.value(blocks[0].bce).item();
    assert_eq!(tape.value(total).item(), sum);
    let alpha: Vec<f64> = (0..12).map(|v| s.row(v)[0]).collect();
    assert_eq!(tape.value(blocks[0].bce).item(), bce_value(&alpha, &labels).unwrap());
}

#[test]
fn duplicated_block_doubles_and_gradients_add() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels = random_labels(&mut rng, 10, 4);
    let (s1, s2) = (splat_like(&mut rng, 10, 4), splat_like(&mut rng, 10, 4));

    let mut tape = Tape::new();
    let a = tape.leaf(s1.clone(), true);
    let (one, _) = total_loss(&mut tape, &[a], &labels).unwrap();
    let (two, _) = total_loss(&mut tape, &[a, a], &labels).unwrap();
    assert_eq!(tape.value(two).item(), 2.0 * tape.value(one).item());

    let grad_of = |blocks: &[&Tensor]| -> Vec<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = blocks.iter().map(|t| tape.leaf((*t).clone(), true)).collect();
        let (l, _) = total_loss(&mut tape, &vars, &labels).unwrap();
        tape.backward(l).unwrap();
        vars.iter().map(|&v| tape.grad_or_zeros(v)).collect()
    };
    let joint = grad_of(&[&s1, &s2]);
    let g1 = grad_of(&[&s1]);
    let g2 = grad_of(&[&s2]);
    assert!(joint[0].max_abs_diff(&g1[0]) < 1e-15);
    assert!(joint[1].max_abs_diff(&g2[0]) < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn per_class_lovasz_is_a_fraction(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..30);
        let labels = random_labels(&mut rng, n, 4);
        let (losses, _) = lovasz_per_class(&random_probs(&mut rng, n, 4), &labels).unwrap();
        for l in losses.into_iter().flatten() {
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&l));
        }
    }

    #[test]
    fn raising_the_correct_probability_never_hurts(seed in 0u64..100_000, bump in 0.01f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 12;
        let labels = random_labels(&mut rng, n, 3);
        let p = random_probs(&mut rng, n, 3);
        let v = rng.random_range(0..n);
        let c = labels[v] as usize;
        let mut q = p.clone();
        let new = (q.row(v)[c] + bump).min(1.0);
        q.data_mut()[v * 3 + c] = new;
        let (a, _) = lovasz_per_class(&p, &labels).unwrap();
        let (b, _) = lovasz_per_class(&q, &labels).unwrap();
        prop_assert!(b[c].unwrap() <= a[c].unwrap() + 1e-12);
    }
}
