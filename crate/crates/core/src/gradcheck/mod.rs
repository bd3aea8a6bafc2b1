//! Finite-difference verification of analytic gradients.
//!
//! [`check`] compares the tape's gradient of a scalar function against
//! central differences of the same function's forward value. [`run_suite`]
//! applies it to every differentiable component of the pipeline on toy
//! graphs.

mod suite;

pub use suite::{run_suite, ComponentReport, SuiteOptions, COMPONENTS};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Relative-error pass threshold.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Magnitude below which gradient entries are compared absolutely.
pub const FLOOR: f64 = 1e-6;

/// Largest elementwise `|analytic - numeric| / max(|analytic|, |numeric|, FLOOR)`
/// over every element of every input.
///
/// `negate` flips the sign of the analytic gradient; it exists so the harness
/// can prove that it detects a wrong gradient.
pub fn check<F>(inputs: &[Tensor], f: F, negate: bool) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.detached())).collect();
        let out = f(&mut tape, &vars)?;
        scalar(&tape, out)
    };

    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.detached().with_grad(true)).collect();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    scalar(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.iter().map(Tensor::detached).collect();
    for (i, &v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[i].len()];
        let analytic = grads.get(v).unwrap_or(&zeros).to_vec();
        for (k, &a) in analytic.iter().enumerate() {
            let a = if negate { -a } else { a };
            let orig = probe[i].data()[k];
            probe[i].data_mut()[k] = orig + STEP;
            let up = eval(&probe)?;
            probe[i].data_mut()[k] = orig - STEP;
            let down = eval(&probe)?;
            probe[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::Contract(format!(
            "gradcheck: function must return a scalar, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Reduces an arbitrary output to a scalar with fixed pseudo-random weights so
/// every output element contributes a distinct cotangent.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    use rand::{Rng, SeedableRng};
    let shape = tape.value(out).shape().to_vec();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = tape.value(out).len();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum_all(prod))
}
