//! GATv2 attention layer.
//!
//! For an edge `j -> i`, the per-head score is
//! `aᵀ LeakyReLU(W_dst h_i + W_src h_j)`, i.e. one weight applied to the
//! concatenated pair `[h_i | h_j]`. Scores are softmax-normalized over the
//! in-edges of `i`, and the update aggregates `α_ij · W_src h_j` (or a
//! separate value projection when configured).

use rand::Rng;

use crate::diffcore::{Index, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Edge endpoints over `num_nodes` nodes.
#[derive(Clone, Debug)]
pub struct Topology {
    pub src: Index,
    pub dst: Index,
    pub num_nodes: usize,
}

impl Topology {
    pub fn from_edges(edges: &[(usize, usize)], num_nodes: usize) -> Self {
        Topology {
            src: edges.iter().map(|e| e.0).collect(),
            dst: edges.iter().map(|e| e.1).collect(),
            num_nodes,
        }
    }

    /// Every node needs an in-edge for the softmax to be defined.
    pub fn check_in_degree(&self) -> Result<()> {
        let mut deg = vec![0usize; self.num_nodes];
        for (&s, &d) in self.src.iter().zip(self.dst.iter()) {
            if s >= self.num_nodes || d >= self.num_nodes {
                return Err(Error::Contract(format!(
                    "edge ({s}, {d}) out of range for {} nodes",
                    self.num_nodes
                )));
            }
            deg[d] += 1;
        }
        match deg.iter().position(|&c| c == 0) {
            Some(i) => Err(Error::Contract(format!(
                "node {i} has no in-edges; attention cannot be normalized"
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatLayerParams {
    /// `(D_in, heads * channels)`, applied to the destination node `h_i`.
    pub w_dst: Tensor,
    /// `(D_in, heads * channels)`, applied to the source node `h_j`.
    pub w_src: Tensor,
    /// `(heads * channels)`, head-major.
    pub a: Tensor,
    /// Optional separate value projection `(D_in, heads * channels)`.
    pub w_val: Option<Tensor>,
    pub heads: usize,
    pub channels: usize,
    pub leaky_slope: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct GatVars {
    pub w_dst: Var,
    pub w_src: Var,
    pub a: Var,
    pub w_val: Option<Var>,
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl GatLayerParams {
    pub fn init(
        rng: &mut impl Rng,
        in_dim: usize,
        heads: usize,
        channels: usize,
        leaky_slope: f64,
        separate_value: bool,
    ) -> Self {
        let out = heads * channels;
        GatLayerParams {
            w_dst: glorot(rng, in_dim, out, &[in_dim, out]).with_grad(true),
            w_src: glorot(rng, in_dim, out, &[in_dim, out]).with_grad(true),
            a: glorot(rng, channels, 1, &[out]).with_grad(true),
            w_val: separate_value.then(|| glorot(rng, in_dim, out, &[in_dim, out]).with_grad(true)),
            heads,
            channels,
            leaky_slope,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.heads * self.channels
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.w_dst, &self.w_src, &self.a];
        v.extend(self.w_val.as_ref());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.w_dst, &mut self.w_src, &mut self.a];
        v.extend(self.w_val.as_mut());
        v
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> GatVars {
        let mut b = |t: &Tensor| {
            if track {
                tape.leaf(t)
            } else {
                tape.constant(t.detached())
            }
        };
        GatVars {
            w_dst: b(&self.w_dst),
            w_src: b(&self.w_src),
            a: b(&self.a),
            w_val: self.w_val.as_ref().map(b),
        }
    }

    fn check_input(&self, tape: &Tape, h: Var, topo: &Topology) -> Result<()> {
        let s = tape.value(h).shape();
        if s.len() != 2 || s[0] != topo.num_nodes || s[1] != self.w_dst.shape()[0] {
            return Err(Error::shape("gat_layer", &[s, self.w_dst.shape()]));
        }
        topo.check_in_degree()
    }

    /// Attention coefficients `(E, heads)` plus the projected source
    /// features `(N, heads * channels)`.
    fn attend(&self, tape: &mut Tape, v: &GatVars, h: Var, topo: &Topology) -> Result<(Var, Var)> {
        self.check_input(tape, h, topo)?;
        let xs = tape.matmul(h, v.w_src)?;
        let xd = tape.matmul(h, v.w_dst)?;
        let scores = tape.edge_scores(xd, xs, v.a, &topo.src, &topo.dst, self.heads, self.leaky_slope)?;
        let alpha = tape.segment_softmax(scores, &topo.dst, topo.num_nodes)?;
        Ok((alpha, xs))
    }

    /// Per-edge, per-head attention coefficients `(E, heads)`.
    pub fn attention(&self, tape: &mut Tape, v: &GatVars, h: Var, topo: &Topology) -> Result<Var> {
        self.attend(tape, v, h, topo).map(|(alpha, _)| alpha)
    }

    /// Aggregated messages `(N, heads * channels)` before the nonlinearity.
    pub fn aggregate(&self, tape: &mut Tape, v: &GatVars, h: Var, topo: &Topology) -> Result<Var> {
        let (alpha, xs) = self.attend(tape, v, h, topo)?;
        let values = match v.w_val {
            Some(wv) => tape.matmul(h, wv)?,
            None => xs,
        };
        tape.edge_aggregate(alpha, values, &topo.src, &topo.dst)
    }

    /// Layer output with the ELU nonlinearity (`elu = false` for identity).
    pub fn forward(&self, tape: &mut Tape, v: &GatVars, h: Var, topo: &Topology, elu: bool) -> Result<Var> {
        let agg = self.aggregate(tape, v, h, topo)?;
        Ok(if elu { tape.elu(agg) } else { agg })
    }
}

/// Attention coefficients for a plain node matrix, outside of training.
pub fn gat_attention(h: &Tensor, edges: &[(usize, usize)], params: &GatLayerParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let topo = Topology::from_edges(edges, h.shape()[0]);
    let v = params.bind(&mut tape, false);
    let hv = tape.constant(h.detached());
    let alpha = params.attention(&mut tape, &v, hv, &topo)?;
    Ok(tape.value(alpha).clone())
}

/// One layer applied to a plain node matrix.
pub fn gat_layer(h: &Tensor, edges: &[(usize, usize)], params: &GatLayerParams, elu: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let topo = Topology::from_edges(edges, h.shape()[0]);
    let v = params.bind(&mut tape, false);
    let hv = tape.constant(h.detached());
    let out = params.forward(&mut tape, &v, hv, &topo, elu)?;
    Ok(tape.value(out).clone())
}
