//! Classification and distillation losses, both averaged over the batch.

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Mean cross-entropy of `softmax(logits)` against integer labels.
pub fn ce_loss(tape: &mut Tape, logits: Var, labels: &[u32]) -> Result<Var> {
    let s = tape.value(logits).shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("ce_loss", &[s, &[labels.len()]]));
    }
    let classes = s[1];
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Contract(format!(
            "ce_loss: label {bad} outside {classes} classes"
        )));
    }
    let logp = tape.log_softmax_rows(logits)?;
    let idx: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let picked = tape.pick_rows(logp, &idx)?;
    let mean = tape.mean_all(picked);
    Ok(tape.scale(mean, -1.0))
}

/// Mean over rows of `KL(softmax(old / T) || softmax(new / T))`.
///
/// `old` is a fixed target; no gradient flows into it.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn lwf_loss(tape: &mut Tape, new: Var, old: &Tensor, temperature: f64) -> Result<Var> {
    let s = tape.value(new).shape();
    if s.len() != 2 || s != old.shape() {
        return Err(Error::shape("lwf_loss", &[s, old.shape()]));
    }
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!(
            "lwf_loss: temperature must be > 0, got {temperature}"
        )));
    }
    let rows = s[0];
    let (p_old, log_p_old) = tempered_target(old, temperature);
    let scaled = tape.scale(new, 1.0 / temperature);
    let log_p_new = tape.log_softmax_rows(scaled)?;
    let log_p_old = tape.constant(log_p_old);
    let diff = tape.sub(log_p_old, log_p_new)?;
    let p_old = tape.constant(p_old);
    let terms = tape.mul(p_old, diff)?;
    let total = tape.sum_all(terms);
    Ok(tape.scale(total, 1.0 / rows as f64))
}

/// Tempered probabilities and log-probabilities of each row.
fn tempered_target(logits: &Tensor, temperature: f64) -> (Tensor, Tensor) {
    let cols = logits.shape()[1];
    let mut logp = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temperature;
        let lse = m + row.iter().map(|&v| (v / temperature - m).exp()).sum::<f64>().ln();
        logp.extend(row.iter().map(|&v| v / temperature - lse));
    }
    let p = logp.iter().map(|v| v.exp()).collect();
    let shape = logits.shape().to_vec();
    (
        Tensor::new(shape.clone(), p).expect("same shape"),
        Tensor::new(shape, logp).expect("same shape"),
    )
}

/// Value-only cross-entropy.
pub fn ce_loss_value(logits: &Tensor, labels: &[u32]) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(logits.detached());
    let l = ce_loss(&mut tape, x, labels)?;
    Ok(tape.value(l).item())
}

/// Value-only distillation loss.
pub fn lwf_loss_value(new: &Tensor, old: &Tensor, temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(new.detached());
    let l = lwf_loss(&mut tape, x, old, temperature)?;
    Ok(tape.value(l).item())
}
