use std::sync::Arc;

use crate::diffcore::{Index, Tensor};
use crate::error::{Error, Result};
use crate::graphbuild::FeatureGraph;

/// Disjoint union of graphs that share one grid.
///
/// Node rows of graph `g` occupy `g * nodes_per_graph .. (g + 1) * nodes_per_graph`.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub features: Tensor,
    pub src: Index,
    pub dst: Index,
    pub node_graph: Index,
    pub num_graphs: usize,
    pub nodes_per_graph: usize,
    pub grid: (usize, usize),
    pub labels: Vec<u32>,
}

impl GraphBatch {
    pub fn new<G: std::borrow::Borrow<FeatureGraph>>(graphs: &[G]) -> Result<Self> {
        let Some(first) = graphs.first().map(|g| g.borrow()) else {
            return Err(Error::contract("graph batch must hold at least one graph"));
        };
        let (n, dim, grid) = (first.num_nodes(), first.feature_dim, first.grid);
        let edges_per_graph = first.edges.len();
        let mut features = Vec::with_capacity(graphs.len() * n * dim);
        let mut src = Vec::with_capacity(graphs.len() * edges_per_graph);
        let mut dst = Vec::with_capacity(graphs.len() * edges_per_graph);
        let mut node_graph = Vec::with_capacity(graphs.len() * n);
        let mut labels = Vec::with_capacity(graphs.len());
        for (gi, g) in graphs.iter().enumerate() {
            let g = g.borrow();
            if g.num_nodes() != n || g.feature_dim != dim || g.grid != grid {
                return Err(Error::Contract(format!(
                    "graph {gi} is {}x{} on grid {:?}, batch expects {n}x{dim} on grid {grid:?}",
                    g.num_nodes(),
                    g.feature_dim,
                    g.grid
                )));
            }
            let offset = gi * n;
            features.extend_from_slice(&g.node_features);
            for &(s, d) in g.edges.iter() {
                src.push(s + offset);
                dst.push(d + offset);
            }
            node_graph.extend(std::iter::repeat_n(gi, n));
            labels.push(g.label);
        }
        Ok(GraphBatch {
            features: Tensor::matrix(graphs.len() * n, dim, features)?,
            src: Arc::from(src),
            dst: Arc::from(dst),
            node_graph: Arc::from(node_graph),
            num_graphs: graphs.len(),
            nodes_per_graph: n,
            grid,
            labels,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_graphs * self.nodes_per_graph
    }
}
