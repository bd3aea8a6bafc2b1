//! Graph readout.
//!
//! `max`, `add` and `mean` reduce every channel over the nodes of a graph.
//! `wmean` first mixes the node values of each channel with one bias-free
//! `(M, M)` matrix shared across channels, then averages. In the
//! non-tessellated form `M = N`; in the tessellated form the grid is cut into
//! four quadrant tiles (top-left, top-right, bottom-left, bottom-right; nodes
//! row-major inside each tile) and the same `M = N / 4` matrix weighs every
//! tile.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::batch::GraphBatch;
use crate::diffcore::{Index, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Add,
    Mean,
    Wmean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolParams {
    pub mode: PoolMode,
    pub tessellated: bool,
    /// `(M, M)`; present iff `mode == Wmean`.
    pub weight: Option<Tensor>,
}

/// Side of the weighting matrix for a grid.
pub fn weight_side(grid: (usize, usize), tessellated: bool) -> Result<usize> {
    let (h, w) = grid;
    if tessellated {
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Contract(format!(
                "tessellated pooling needs an even grid, got {h}x{w}"
            )));
        }
        Ok(h * w / 4)
    } else {
        Ok(h * w)
    }
}

/// Row order placing the four quadrant tiles of every graph contiguously.
pub fn tile_order(grid: (usize, usize), num_graphs: usize) -> Index {
    let (h, w) = grid;
    let (th, tw) = (h / 2, w / 2);
    let n = h * w;
    let mut order = Vec::with_capacity(n * num_graphs);
    for g in 0..num_graphs {
        for (ty, tx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            for y in 0..th {
                for x in 0..tw {
                    order.push(g * n + (ty * th + y) * w + tx * tw + x);
                }
            }
        }
    }
    Arc::from(order)
}

impl PoolParams {
    pub fn new(mode: PoolMode, tessellated: bool, grid: (usize, usize)) -> Result<Self> {
        let weight = match mode {
            PoolMode::Wmean => {
                let m = weight_side(grid, tessellated)?;
                Some(Tensor::identity(m).with_grad(true))
            }
            _ => None,
        };
        Ok(PoolParams {
            mode,
            tessellated,
            weight,
        })
    }

    pub fn num_params(&self) -> usize {
        self.weight.as_ref().map_or(0, Tensor::len)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.weight.iter().collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.weight.iter_mut().collect()
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> Option<Var> {
        self.weight.as_ref().map(|t| {
            if track {
                tape.leaf(t)
            } else {
                tape.constant(t.detached())
            }
        })
    }

    /// `(total nodes, C) -> (num_graphs, C)`.
    pub fn forward(&self, tape: &mut Tape, weight: Option<Var>, h: Var, batch: &GraphBatch) -> Result<Var> {
        let g = batch.num_graphs;
        match self.mode {
            PoolMode::Max => tape.segment_max(h, &batch.node_graph, g),
            PoolMode::Add => tape.scatter_add_rows(h, &batch.node_graph, g),
            PoolMode::Mean => tape.segment_mean(h, &batch.node_graph, g),
            PoolMode::Wmean => {
                let w = weight.expect("wmean binds its weight");
                let m = tape.value(w).shape()[0];
                let expected = weight_side(batch.grid, self.tessellated)?;
                let n = batch.nodes_per_graph;
                if m != expected || batch.grid.0 * batch.grid.1 != n {
                    return Err(Error::shape("global_pool", &[&[n], &[m, m]]));
                }
                let weighted = if self.tessellated {
                    let order = tile_order(batch.grid, g);
                    let mut inverse = vec![0; order.len()];
                    order.iter().enumerate().for_each(|(i, &r)| inverse[r] = i);
                    let tiles = tape.gather_rows(h, &order)?;
                    let weighted = tape.block_matmul_left(w, tiles)?;
                    // Back to node order, so the mean sums rows in the same
                    // order as the plain mean pool.
                    tape.gather_rows(weighted, &Arc::from(inverse))?
                } else {
                    tape.block_matmul_left(w, h)?
                };
                tape.segment_mean(weighted, &batch.node_graph, g)
            }
        }
    }
}

/// Readout of one plain `(N, C)` graph laid out on `grid`.
pub fn global_pool(h: &Tensor, grid: (usize, usize), params: &PoolParams) -> Result<Tensor> {
    let s = h.shape();
    if s.len() != 2 {
        return Err(Error::shape("global_pool", &[s]));
    }
    if params.mode == PoolMode::Wmean && s[0] != grid.0 * grid.1 {
        return Err(Error::shape("global_pool", &[s, &[grid.0, grid.1]]));
    }
    let batch = GraphBatch {
        features: h.detached(),
        src: Vec::new().into(),
        dst: Vec::new().into(),
        node_graph: vec![0; s[0]].into(),
        num_graphs: 1,
        nodes_per_graph: s[0],
        grid,
        labels: vec![0],
    };
    let mut tape = Tape::new();
    let w = params.bind(&mut tape, false);
    let hv = tape.constant(h.detached());
    let out = params.forward(&mut tape, w, hv, &batch)?;
    Ok(Tensor::vector(tape.value(out).data().to_vec()))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{check, project, TOLERANCE};

    fn rand_nodes(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor {
        Tensor::matrix(n, c, (0..n * c).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn basic_reductions() {
        let h = Tensor::matrix(2, 2, vec![1.0, 3.0, 3.0, 5.0]).unwrap();
        let pool = |m| global_pool(&h, (1, 2), &PoolParams::new(m, false, (1, 2)).unwrap()).unwrap();
        assert_eq!(pool(PoolMode::Mean).data(), &[2.0, 4.0]);
        assert_eq!(pool(PoolMode::Add).data(), &[4.0, 8.0]);
        assert_eq!(pool(PoolMode::Max).data(), &[3.0, 5.0]);
        assert_eq!(pool(PoolMode::Wmean).data(), &[2.0, 4.0]);
    }

    #[test]
    fn identity_weights_equal_mean_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for tess in [false, true] {
            let h = rand_nodes(&mut rng, 16, 3);
            let mean = global_pool(&h, (4, 4), &PoolParams::new(PoolMode::Mean, false, (4, 4)).unwrap()).unwrap();
            let w = global_pool(&h, (4, 4), &PoolParams::new(PoolMode::Wmean, tess, (4, 4)).unwrap()).unwrap();
            assert_eq!(mean.data(), w.data(), "tess={tess}");
        }
    }

    #[test]
    fn zero_weights_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = rand_nodes(&mut rng, 4, 3);
        let mut p = PoolParams::new(PoolMode::Wmean, false, (2, 2)).unwrap();
        p.weight = Some(Tensor::zeros(&[4, 4]).with_grad(true));
        assert!(global_pool(&h, (2, 2), &p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tiny_tessellation_scales_the_mean() {
        let h = Tensor::matrix(4, 2, vec![1.0, -2.0, 3.0, 0.0, 5.0, 4.0, -1.0, 2.0]).unwrap();
        let mut p = PoolParams::new(PoolMode::Wmean, true, (2, 2)).unwrap();
        p.weight = Some(Tensor::matrix(1, 1, vec![0.75]).unwrap().with_grad(true));
        let out = global_pool(&h, (2, 2), &p).unwrap();
        assert_eq!(out.data(), &[0.75 * 2.0, 0.75 * 1.0]);
    }

    #[test]
    fn tessellated_uses_quadrant_tiles() {
        // 2x4 grid, tiles of 1x2: weight [[0, 1], [0, 0]] keeps the second node
        // of each tile in the first slot.
        let h = Tensor::matrix(8, 1, (0..8).map(|v| v as f64).collect()).unwrap();
        let mut p = PoolParams::new(PoolMode::Wmean, true, (2, 4)).unwrap();
        p.weight = Some(Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 0.0]).unwrap().with_grad(true));
        let out = global_pool(&h, (2, 4), &p).unwrap();
        // tiles: [0,1], [2,3], [4,5], [6,7] -> kept 1, 3, 5, 7
        assert_eq!(out.data(), &[(1.0 + 3.0 + 5.0 + 7.0) / 8.0]);
        assert_eq!(&tile_order((2, 4), 1)[..], &[0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(&tile_order((4, 4), 1)[..4], &[0, 1, 4, 5]);
    }

    #[test]
    fn weight_parameter_counts() {
        let tess = PoolParams::new(PoolMode::Wmean, true, (14, 14)).unwrap();
        let full = PoolParams::new(PoolMode::Wmean, false, (14, 14)).unwrap();
        assert_eq!(tess.num_params(), 2_401);
        assert_eq!(full.num_params(), 38_416);
        assert_eq!(
            PoolParams::new(PoolMode::Mean, false, (14, 14)).unwrap().num_params(),
            0
        );
        assert!(PoolParams::new(PoolMode::Wmean, true, (3, 4)).is_err());
    }

    #[test]
    fn node_count_must_match_weights() {
        let p = PoolParams::new(PoolMode::Wmean, false, (2, 2)).unwrap();
        let h = Tensor::matrix(6, 1, vec![1.0; 6]).unwrap();
        assert!(matches!(global_pool(&h, (2, 3), &p), Err(Error::Shape { .. })));
    }

    #[test]
    fn every_mode_matches_finite_differences() {
        for (mode, tess) in [
            (PoolMode::Max, false),
            (PoolMode::Add, false),
            (PoolMode::Mean, false),
            (PoolMode::Wmean, false),
            (PoolMode::Wmean, true),
        ] {
            for seed in 0..5u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut p = PoolParams::new(mode, tess, (2, 2)).unwrap();
                for t in p.tensors_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
                }
                let h = rand_nodes(&mut rng, 8, 3);
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
                        let out = p.forward(t, v.get(1).copied(), v[0], &batch)?;
                        project(t, out, seed)
                    },
                    false,
                )
                .unwrap();
                assert!(err < TOLERANCE, "{mode:?} tess={tess} seed {seed}: {err:e}");
            }
        }
    }
}
