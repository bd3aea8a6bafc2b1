//! Node normalization treating each graph as a feature map: nodes play the
//! role of pixel positions and node channels the role of pixel values.
//!
//! * [`NormKind::Graph`] standardizes every channel over the nodes of its own
//!   graph.
//! * [`NormKind::Spn`] blends that per-graph statistic with a batch statistic
//!   (running estimates at inference) through a learned per-channel gate
//!   `ρ = sigmoid(ρ_logit)`: `ρ·batch + (1-ρ)·graph`.
//! * [`NormKind::None`] is the identity.
//!
//! All variants finish with a learnable per-channel affine map.

use serde::{Deserialize, Serialize};

use super::batch::GraphBatch;
use crate::diffcore::{Index, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Graph,
    Spn,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub kind: NormKind,
    pub gamma: Tensor,
    pub beta: Tensor,
    /// Present for [`NormKind::Spn`] only.
    pub rho_logit: Option<Tensor>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
    pub rho_logit: Option<Var>,
}

/// Batch statistics observed during a training forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

impl NormParams {
    pub fn new(kind: NormKind, channels: usize, eps: f64, momentum: f64) -> Self {
        NormParams {
            kind,
            gamma: Tensor::vector(vec![1.0; channels]).with_grad(true),
            beta: Tensor::zeros(&[channels]).with_grad(true),
            rho_logit: (kind == NormKind::Spn).then(|| Tensor::zeros(&[channels]).with_grad(true)),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps,
            momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.gamma, &self.beta];
        v.extend(self.rho_logit.as_ref());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.gamma, &mut self.beta];
        v.extend(self.rho_logit.as_mut());
        v
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> NormVars {
        let mut b = |t: &Tensor| {
            if track {
                tape.leaf(t)
            } else {
                tape.constant(t.detached())
            }
        };
        NormVars {
            gamma: b(&self.gamma),
            beta: b(&self.beta),
            rho_logit: self.rho_logit.as_ref().map(b),
        }
    }

    /// Folds observed batch statistics into the running estimates.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, &v) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, &v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * v;
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        v: &NormVars,
        h: Var,
        batch: &GraphBatch,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (rows, cols) = {
            let s = tape.value(h).shape();
            (s[0], s[1])
        };
        if cols != self.channels() || rows != batch.num_nodes() {
            return Err(Error::shape(
                "node_norm",
                &[tape.value(h).shape(), &[batch.num_nodes(), self.channels()]],
            ));
        }
        let (mixed, stats) = match self.kind {
            NormKind::None => (h, None),
            NormKind::Graph => (
                standardize_segments(tape, h, &batch.node_graph, batch.num_graphs, self.eps)?,
                None,
            ),
            NormKind::Spn => {
                let per_graph = standardize_segments(tape, h, &batch.node_graph, batch.num_graphs, self.eps)?;
                let (batch_norm, stats) = match mode {
                    Mode::Train => {
                        let all: Index = vec![0; rows].into();
                        let bn = standardize_segments(tape, h, &all, 1, self.eps)?;
                        (bn, Some(observed_stats(tape.value(h))))
                    }
                    Mode::Eval => {
                        let shift = Tensor::vector(self.running_mean.iter().map(|m| -m).collect());
                        let inv =
                            Tensor::vector(self.running_var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect());
                        let shift = tape.constant(shift);
                        let inv = tape.constant(inv);
                        let centered = tape.add_row(h, shift)?;
                        (tape.mul_row(centered, inv)?, None)
                    }
                };
                let rho = tape.sigmoid(v.rho_logit.expect("spn binds rho"));
                let diff = tape.sub(batch_norm, per_graph)?;
                let gated = tape.mul_row(diff, rho)?;
                (tape.add(per_graph, gated)?, stats)
            }
        };
        let scaled = tape.mul_row(mixed, v.gamma)?;
        Ok((tape.add_row(scaled, v.beta)?, stats))
    }
}

/// `(h - mean) / sqrt(var + eps)` per channel over the rows of each segment,
/// with the biased variance.
pub fn standardize_segments(tape: &mut Tape, h: Var, seg: &Index, nseg: usize, eps: f64) -> Result<Var> {
    let mut counts = vec![0usize; nseg];
    seg.iter().for_each(|&s| {
        if s < nseg {
            counts[s] += 1
        }
    });
    if let Some(g) = counts.iter().position(|&c| c < 2) {
        return Err(Error::Contract(format!(
            "node_norm: graph {g} has {} node(s); variance needs at least 2",
            counts[g]
        )));
    }
    let mean = tape.segment_mean(h, seg, nseg)?;
    let mean_rows = tape.gather_rows(mean, seg)?;
    let centered = tape.sub(h, mean_rows)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.segment_mean(sq, seg, nseg)?;
    let var = tape.add_scalar(var, eps);
    let inv = tape.powf(var, -0.5);
    let inv_rows = tape.gather_rows(inv, seg)?;
    tape.mul(centered, inv_rows)
}

fn observed_stats(h: &Tensor) -> BatchStats {
    let (rows, cols) = h.as_matrix_dims();
    let d = h.data();
    let mut mean = vec![0.0; cols];
    for row in d.chunks(cols) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; cols];
    for row in d.chunks(cols) {
        for c in 0..cols {
            var[c] += (row[c] - mean[c]).powi(2);
        }
    }
    let denom = rows.saturating_sub(1).max(1) as f64;
    var.iter_mut().for_each(|v| *v /= denom);
    BatchStats { mean, var }
}

/// Single-graph normalization of a plain `(N, C)` node matrix.
pub fn node_norm(h: &Tensor, params: &NormParams) -> Result<Tensor> {
    let s = h.shape();
    if s.len() != 2 {
        return Err(Error::shape("node_norm", &[s]));
    }
    let batch = GraphBatch {
        features: h.detached(),
        src: Vec::new().into(),
        dst: Vec::new().into(),
        node_graph: vec![0; s[0]].into(),
        num_graphs: 1,
        nodes_per_graph: s[0],
        grid: (1, s[0]),
        labels: vec![0],
    };
    let mut tape = Tape::new();
    let v = params.bind(&mut tape, false);
    let hv = tape.constant(h.detached());
    let (out, _) = params.forward(&mut tape, &v, hv, &batch, Mode::Eval)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{check, project, TOLERANCE};

    fn graph_norm(c: usize) -> NormParams {
        NormParams::new(NormKind::Graph, c, 1e-5, 0.1)
    }

    fn column_stats(t: &Tensor, c: usize) -> (f64, f64) {
        let (rows, cols) = t.as_matrix_dims();
        let col: Vec<f64> = (0..rows).map(|r| t.data()[r * cols + c]).collect();
        let m = col.iter().sum::<f64>() / rows as f64;
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / rows as f64;
        (m, v)
    }

    #[test]
    fn standardizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = (0..40).map(|_| rng.random_range(-5.0..5.0)).collect();
        let h = Tensor::matrix(10, 4, data).unwrap();
        let mut p = graph_norm(4);
        p.eps = 0.0;
        let out = node_norm(&h, &p).unwrap();
        for c in 0..4 {
            let (m, v) = column_stats(&out, c);
            assert!(m.abs() < 1e-10 && (v - 1.0).abs() < 1e-10, "c={c} m={m} v={v}");
        }
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let h = Tensor::matrix(3, 2, vec![2.0, 1.0, 2.0, 5.0, 2.0, -1.0]).unwrap();
        let out = node_norm(&h, &graph_norm(2)).unwrap();
        for r in 0..3 {
            assert_eq!(out.data()[r * 2], 0.0);
        }
    }

    #[test]
    fn standardized_input_is_a_fixed_point() {
        let h = Tensor::matrix(4, 1, vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let out = node_norm(&h, &graph_norm(1)).unwrap();
        for (a, b) in out.data().iter().zip(h.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn single_node_is_rejected() {
        let h = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(node_norm(&h, &graph_norm(3)), Err(Error::Contract(_))));
    }

    #[test]
    fn affine_is_applied_after_standardization() {
        let h = Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap();
        let mut p = graph_norm(1);
        p.eps = 0.0;
        p.gamma = Tensor::vector(vec![3.0]).with_grad(true);
        p.beta = Tensor::vector(vec![0.5]).with_grad(true);
        let out = node_norm(&h, &p).unwrap();
        assert_eq!(out.data(), &[-2.5, 3.5]);
    }

    #[test]
    fn spn_eval_uses_running_statistics() {
        let h = Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap();
        let mut p = NormParams::new(NormKind::Spn, 1, 0.0, 0.1);
        p.running_mean = vec![1.0];
        p.running_var = vec![4.0];
        // rho = 1/2: 0.5 * (h - 1) / 2 + 0.5 * standardized
        let out = node_norm(&h, &p).unwrap();
        assert!((out.data()[0] - (0.5 * -0.5 + 0.5 * -1.0)).abs() < 1e-15);
        assert!((out.data()[1] - (0.5 * 0.5 + 0.5 * 1.0)).abs() < 1e-15);
    }

    #[test]
    fn running_update_uses_momentum() {
        let mut p = NormParams::new(NormKind::Spn, 1, 1e-5, 0.25);
        p.update_running(&BatchStats {
            mean: vec![4.0],
            var: vec![5.0],
        });
        assert_eq!(p.running_mean, vec![1.0]);
        assert_eq!(p.running_var, vec![2.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [NormKind::Graph, NormKind::Spn] {
            for seed in 0..5u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let c = 3;
                let mut p = NormParams::new(kind, c, 1e-5, 0.1);
                for t in p.tensors_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
                }
                let h = Tensor::matrix(8, c, (0..8 * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
                let batch = GraphBatch {
                    features: h.clone(),
                    src: Vec::new().into(),
                    dst: Vec::new().into(),
                    node_graph: vec![0, 0, 0, 0, 1, 1, 1, 1].into(),
                    num_graphs: 2,
                    nodes_per_graph: 4,
                    grid: (2, 2),
                    labels: vec![0, 0],
                };
                let mut inputs = vec![h];
                inputs.extend(p.tensors().into_iter().map(Tensor::detached));
                let err = check(
                    &inputs,
                    |t, v| {
                        let vars = NormVars {
                            gamma: v[1],
                            beta: v[2],
                            rho_logit: v.get(3).copied(),
                        };
                        let (out, _) = p.forward(t, &vars, v[0], &batch, Mode::Train)?;
                        project(t, out, seed)
                    },
                    false,
                )
                .unwrap();
                assert!(err < TOLERANCE, "{kind:?} seed {seed}: {err:e}");
            }
        }
    }
}
