//! Central finite-difference gradient checker, the reference oracle for every
//! hand-written reverse pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    pub rel_tol: f64,
    /// Absolute slack added to every element's tolerance.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            rel_tol: 1e-6,
            abs_floor: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|)` among elements whose absolute error
    /// exceeds the floor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub worst: Option<GradMismatch>,
    pub passed: bool,
}

/// Weights used to reduce a non-scalar output to a scalar loss.
fn contraction_weights(n: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9 ^ n as u64);
    let w = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![n], w).expect("non-empty")
}

fn scalar_loss<F>(f: &F, inputs: &[Tensor], requires_grad: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect();
    let out = f(&mut tape, &vars)?;
    let n = tape.value(out).len();
    let loss = if n == 1 {
        out
    } else {
        let flat = tape.reshape(out, vec![n])?;
        let w = tape.constant(contraction_weights(n));
        let prod = tape.mul(flat, w)?;
        tape.sum(prod, None)?
    };
    Ok((tape, vars, loss))
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every element of every input. Non-scalar outputs are contracted with fixed
/// random weights first.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, loss) = scalar_loss(&f, inputs, true)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let (tape, _, loss) = scalar_loss(&f, probe, false)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        worst: None,
        passed: true,
    };
    let mut worst_ratio = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + cfg.eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - cfg.eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[i].data()[j];
            let abs = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let ratio = abs / (cfg.rel_tol * scale + cfg.abs_floor);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if abs > cfg.abs_floor {
                report.max_rel_error = report.max_rel_error.max(abs / scale);
            }
            if ratio > worst_ratio || !ratio.is_finite() {
                worst_ratio = if ratio.is_finite() { ratio } else { f64::INFINITY };
                report.worst = Some(GradMismatch {
                    input: i,
                    index: j,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    report.passed = worst_ratio <= 1.0;
    Ok(report)
}
