//! Feature graphs from multi-scale feature maps.
//!
//! Coarser scales are upsampled by repetition to the finest grid. Each grid
//! position becomes a node whose features are the channel columns of every
//! scale at that position followed by its `(x, y)` coordinates. Nodes are
//! indexed row-major (`y * W + x`) and connected by spatial k-NN.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featio::{validate_dims, FeatureMap, FeatureSample, ScaleDims};

/// Node features, coordinates and edges of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGraph {
    /// `(N, D)` row-major.
    pub node_features: Vec<f64>,
    pub feature_dim: usize,
    /// Integer grid position `(x, y)` of every node.
    pub coords: Vec<(u32, u32)>,
    /// Directed `(src, dst)` pairs, sorted by `(dst, src)`.
    pub edges: Arc<[(usize, usize)]>,
    /// `(H, W)` of the finest scale.
    pub grid: (usize, usize),
    pub label: u32,
}

impl FeatureGraph {
    pub fn num_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.node_features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }
}

/// Repeats every value `factor` times: `[1, 4]` becomes `[1, 1, 4, 4]`.
pub fn repeat_values(values: &[f64], factor: usize) -> Vec<f64> {
    values.iter().flat_map(|&v| std::iter::repeat_n(v, factor)).collect()
}

/// Replicates each value of a `(C, H, W)` map into a `factor x factor` block.
pub fn upsample_repeat(map: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    if factor == 0 {
        return Err(Error::contract("upsample_repeat: factor must be at least 1"));
    }
    let d = map.dims();
    let out_dims = ScaleDims::new(d.channels, d.height * factor, d.width * factor);
    let mut data = Vec::with_capacity(out_dims.len());
    for row in map.data().chunks(d.width) {
        let wide = repeat_values(row, factor);
        for _ in 0..factor {
            data.extend_from_slice(&wide);
        }
    }
    FeatureMap::new(out_dims, data)
}

/// Row-major integer coordinates `(x, y)` of an `H x W` grid.
pub fn grid_coords(height: usize, width: usize) -> Vec<(u32, u32)> {
    (0..height)
        .flat_map(|y| (0..width).map(move |x| (x as u32, y as u32)))
        .collect()
}

/// Indices of the `k` nearest other nodes of `i`, ties broken by ascending
/// index.
fn nearest(coords: &[(u32, u32)], i: usize, k: usize) -> Vec<usize> {
    let (xi, yi) = (coords[i].0 as i64, coords[i].1 as i64);
    let mut cand: Vec<(i64, usize)> = coords
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, &(x, y))| {
            let (dx, dy) = (x as i64 - xi, y as i64 - yi);
            (dx * dx + dy * dy, j)
        })
        .collect();
    cand.sort_unstable();
    cand.truncate(k);
    cand.into_iter().map(|(_, j)| j).collect()
}

/// Spatial k-NN over `coords`, symmetrized, plus one self-loop per node.
/// Edges are `(src, dst)` sorted by `(dst, src)`.
pub fn knn_edges(coords: &[(u32, u32)], k: usize) -> Result<Vec<(usize, usize)>> {
    let n = coords.len();
    if k == 0 || k >= n {
        return Err(Error::Contract(format!("knn_edges: need 1 <= k < N, got k={k}, N={n}")));
    }
    let mut sorted = coords.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::contract("knn_edges: duplicate coordinates"));
    }
    let mut edges = Vec::with_capacity(n * (2 * k + 1));
    for i in 0..n {
        for j in nearest(coords, i, k) {
            edges.push((j, i));
            edges.push((i, j));
        }
        edges.push((i, i));
    }
    edges.sort_unstable_by_key(|&(s, d)| (d, s));
    edges.dedup();
    Ok(edges)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphOptions {
    pub k: usize,
    /// Scale coordinates into `[0, 1]` instead of raw grid indices.
    pub normalize_xy: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            k: 8,
            normalize_xy: false,
        }
    }
}

/// Builds graphs for one fixed set of scale dims, computing the edge set once.
#[derive(Clone, Debug)]
pub struct GraphBuilder {
    dims: Vec<ScaleDims>,
    factors: Vec<usize>,
    coords: Vec<(u32, u32)>,
    edges: Arc<[(usize, usize)]>,
    options: GraphOptions,
}

impl GraphBuilder {
    pub fn new(dims: &[ScaleDims], options: GraphOptions) -> Result<Self> {
        validate_dims(dims)?;
        let finest = dims[0];
        let mut factors = Vec::with_capacity(dims.len());
        for (s, d) in dims.iter().enumerate() {
            let (fy, fx) = (finest.height / d.height, finest.width / d.width);
            if fy != fx {
                return Err(Error::Contract(format!(
                    "scale {s} ({}x{}) needs different upsample factors per axis relative to scale 0 ({}x{})",
                    d.height, d.width, finest.height, finest.width
                )));
            }
            factors.push(fy);
        }
        let coords = grid_coords(finest.height, finest.width);
        let edges = knn_edges(&coords, options.k)?.into();
        Ok(GraphBuilder {
            dims: dims.to_vec(),
            factors,
            coords,
            edges,
            options,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.dims[0].height, self.dims[0].width)
    }

    pub fn feature_dim(&self) -> usize {
        self.dims.iter().map(|d| d.channels).sum::<usize>() + 2
    }

    pub fn num_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn build(&self, sample: &FeatureSample) -> Result<FeatureGraph> {
        if sample.dims() != self.dims {
            return Err(Error::Contract(format!(
                "build_graph: sample dims {:?} differ from builder dims {:?}",
                sample.dims(),
                self.dims
            )));
        }
        let (h, w) = self.grid();
        let upsampled: Vec<FeatureMap> = sample
            .scales
            .iter()
            .zip(&self.factors)
            .map(|(m, &f)| if f == 1 { Ok(m.clone()) } else { upsample_repeat(m, f) })
            .collect::<Result<_>>()?;
        let dim = self.feature_dim();
        let (sx, sy) = if self.options.normalize_xy {
            (1.0 / (w.max(2) - 1) as f64, 1.0 / (h.max(2) - 1) as f64)
        } else {
            (1.0, 1.0)
        };
        let mut features = Vec::with_capacity(h * w * dim);
        for &(x, y) in &self.coords {
            for m in &upsampled {
                for c in 0..m.dims().channels {
                    features.push(m.at(c, y as usize, x as usize));
                }
            }
            features.push(x as f64 * sx);
            features.push(y as f64 * sy);
        }
        Ok(FeatureGraph {
            node_features: features,
            feature_dim: dim,
            coords: self.coords.clone(),
            edges: self.edges.clone(),
            grid: (h, w),
            label: sample.label,
        })
    }

    /// Builds graphs for many samples on the shared worker pool, preserving
    /// order.
    pub fn build_all<S>(&self, samples: &[S]) -> Result<Vec<FeatureGraph>>
    where
        S: std::borrow::Borrow<FeatureSample> + Sync,
    {
        crate::parallel::install(|| samples.par_iter().map(|s| self.build(s.borrow())).collect())
    }
}

/// One-off graph construction.
pub fn build_graph(sample: &FeatureSample, k: usize) -> Result<FeatureGraph> {
    GraphBuilder::new(&sample.dims(), GraphOptions { k, normalize_xy: false })?.build(sample)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;

    use super::*;

    fn map(c: usize, h: usize, w: usize, data: Vec<f64>) -> FeatureMap {
        FeatureMap::new(ScaleDims::new(c, h, w), data).unwrap()
    }

    fn ramp(d: ScaleDims, offset: f64) -> FeatureMap {
        FeatureMap::new(d, (0..d.len()).map(|i| offset + i as f64).collect()).unwrap()
    }

    /// Brute-force neighbors by full distance sort, independent of `nearest`.
    fn brute_neighbors(h: usize, w: usize, node: usize, k: usize) -> BTreeSet<usize> {
        let (x0, y0) = ((node % w) as f64, (node / w) as f64);
        let mut all: Vec<(f64, usize)> = (0..h * w)
            .filter(|&j| j != node)
            .map(|j| {
                let (x, y) = ((j % w) as f64, (j / w) as f64);
                (((x - x0).powi(2) + (y - y0).powi(2)).sqrt(), j)
            })
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, j)| j).collect()
    }

    fn in_neighbors(edges: &[(usize, usize)], i: usize) -> BTreeSet<usize> {
        edges.iter().filter(|e| e.1 == i && e.0 != i).map(|e| e.0).collect()
    }

    #[test]
    fn repeat_rule() {
        assert_eq!(repeat_values(&[1.0, 4.0], 2), vec![1.0, 1.0, 4.0, 4.0]);
        let m = map(1, 1, 2, vec![1.0, 4.0]);
        let up = upsample_repeat(&m, 2).unwrap();
        assert_eq!(up.data(), &[1.0, 1.0, 4.0, 4.0, 1.0, 1.0, 4.0, 4.0]);
    }

    #[test]
    fn factor_one_is_identity() {
        let m = ramp(ScaleDims::new(2, 3, 2), 0.0);
        assert_eq!(upsample_repeat(&m, 1).unwrap(), m);
        assert!(upsample_repeat(&m, 0).is_err());
    }

    #[test]
    fn two_by_two_block_replication() {
        let m = map(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let up = upsample_repeat(&m, 2).unwrap();
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(up.data(), &expected);
    }

    #[test]
    fn interior_node_gets_eight_connectivity() {
        let coords = grid_coords(14, 14);
        let edges = knn_edges(&coords, 8).unwrap();
        let node = 5 * 14 + 6;
        let expected: BTreeSet<usize> = [
            (-1i64, -1i64),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ]
        .iter()
        .map(|&(dy, dx)| ((5 + dy) * 14 + 6 + dx) as usize)
        .collect();
        assert_eq!(in_neighbors(&edges, node), expected);
    }

    #[test]
    fn corner_node_neighbors() {
        let coords = grid_coords(14, 14);
        let near: BTreeSet<(u32, u32)> = nearest(&coords, 0, 8).into_iter().map(|j| coords[j]).collect();
        let expected: BTreeSet<(u32, u32)> = [(0, 1), (1, 0), (1, 1), (0, 2), (2, 0), (1, 2), (2, 1), (2, 2)]
            .into_iter()
            .collect();
        assert_eq!(near, expected);
        let brute: BTreeSet<(u32, u32)> = brute_neighbors(14, 14, 0, 8).into_iter().map(|j| coords[j]).collect();
        assert_eq!(brute, expected);
    }

    #[test]
    fn two_nodes_one_neighbor() {
        let edges = knn_edges(&[(0, 0), (1, 0)], 1).unwrap();
        assert_eq!(edges, vec![(0, 0), (1, 0), (0, 1), (1, 1)]);
        assert!(knn_edges(&[(0, 0), (1, 0)], 2).is_err());
        assert!(knn_edges(&[(0, 0), (0, 0)], 1).is_err());
    }

    #[test]
    fn brute_force_grids_up_to_20() {
        for (h, w) in [(3, 3), (5, 7), (14, 14), (20, 20)] {
            let coords = grid_coords(h, w);
            let edges = knn_edges(&coords, 8).unwrap();
            for i in 0..h * w {
                let brute = brute_neighbors(h, w, i, 8);
                assert_eq!(brute, nearest(&coords, i, 8).into_iter().collect::<BTreeSet<_>>());
                let (x, y) = (i % w, i / w);
                if x > 0 && y > 0 && x + 1 < w && y + 1 < h {
                    let n8: BTreeSet<usize> = (y - 1..=y + 1)
                        .flat_map(|yy| (x - 1..=x + 1).map(move |xx| yy * w + xx))
                        .filter(|&j| j != i)
                        .collect();
                    let inn = in_neighbors(&edges, i);
                    assert!(n8.is_subset(&inn), "grid {h}x{w} node {i}");
                    // Border nodes may pick deeper nodes; away from them the
                    // symmetrized set is exactly the 8-neighbourhood.
                    if x >= 3 && y >= 3 && x + 3 < w && y + 3 < h {
                        assert_eq!(inn, n8, "grid {h}x{w} node {i}");
                    }
                }
            }
        }
    }

    #[test]
    fn edges_are_symmetric_with_self_loops() {
        let coords = grid_coords(6, 5);
        let edges = knn_edges(&coords, 8).unwrap();
        let set: BTreeSet<_> = edges.iter().copied().collect();
        assert_eq!(set.len(), edges.len());
        for &(s, d) in &edges {
            assert!(set.contains(&(d, s)));
        }
        for i in 0..30 {
            assert!(set.contains(&(i, i)));
        }
    }

    #[test]
    fn two_scale_backbone_dims() {
        let dims = [ScaleDims::new(256, 14, 14), ScaleDims::new(512, 7, 7)];
        let s = FeatureSample::new(vec![ramp(dims[0], 0.0), ramp(dims[1], 0.5)], 3).unwrap();
        let g = build_graph(&s, 8).unwrap();
        assert_eq!(g.num_nodes(), 196);
        assert_eq!(g.feature_dim, 770);
    }

    #[test]
    fn single_scale_counts() {
        let s = FeatureSample::new(vec![ramp(ScaleDims::new(3, 2, 2), 0.0)], 0).unwrap();
        let g = build_graph(&s, 1).unwrap();
        assert_eq!((g.num_nodes(), g.feature_dim), (4, 5));
    }

    #[test]
    fn node_features_index_upsampled_maps() {
        let d0 = ScaleDims::new(2, 4, 4);
        let d1 = ScaleDims::new(3, 2, 2);
        let (m0, m1) = (ramp(d0, 0.0), ramp(d1, 100.0));
        let s = FeatureSample::new(vec![m0.clone(), m1.clone()], 1).unwrap();
        let g = build_graph(&s, 8).unwrap();
        let mut expected: Vec<f64> = (0..2).map(|c| m0.at(c, 0, 0)).collect();
        expected.extend((0..3).map(|c| m1.at(c, 0, 0)));
        expected.extend([0.0, 0.0]);
        assert_eq!(g.node(0), &expected[..]);
        // node (x=3, y=2) reads coarse cell (1, 1)
        let i = 2 * 4 + 3;
        let mut expected: Vec<f64> = (0..2).map(|c| m0.at(c, 2, 3)).collect();
        expected.extend((0..3).map(|c| m1.at(c, 1, 1)));
        expected.extend([3.0, 2.0]);
        assert_eq!(g.node(i), &expected[..]);
    }

    #[test]
    fn non_integer_factor_is_rejected() {
        let dims = [ScaleDims::new(1, 6, 6), ScaleDims::new(1, 4, 4)];
        assert!(GraphBuilder::new(&dims, GraphOptions::default()).is_err());
    }

    #[test]
    fn normalized_xy_lies_in_unit_square() {
        let d = ScaleDims::new(1, 4, 5);
        let s = FeatureSample::new(vec![ramp(d, 0.0)], 0).unwrap();
        let b = GraphBuilder::new(
            &[d],
            GraphOptions {
                k: 4,
                normalize_xy: true,
            },
        )
        .unwrap();
        let g = b.build(&s).unwrap();
        let last = g.node(19);
        assert_eq!(&last[1..], &[1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn channel_permutation_permutes_feature_slice(seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let d0 = ScaleDims::new(4, 2, 2);
            let d1 = ScaleDims::new(3, 1, 1);
            let m0 = ramp(d0, 0.0);
            let m1 = ramp(d1, 50.0);
            let mut perm: Vec<usize> = (0..4).collect();
            perm.shuffle(&mut rng);
            let pdata: Vec<f64> = perm.iter().flat_map(|&c| m0.data()[c * 4..(c + 1) * 4].to_vec()).collect();
            let pm0 = FeatureMap::new(d0, pdata).unwrap();
            let g = build_graph(&FeatureSample::new(vec![m0, m1.clone()], 0).unwrap(), 3).unwrap();
            let gp = build_graph(&FeatureSample::new(vec![pm0, m1], 0).unwrap(), 3).unwrap();
            for i in 0..4 {
                for (new_c, &old_c) in perm.iter().enumerate() {
                    prop_assert_eq!(gp.node(i)[new_c], g.node(i)[old_c]);
                }
                prop_assert_eq!(&gp.node(i)[4..], &g.node(i)[4..]);
            }
            prop_assert_eq!(&g.edges, &gp.edges);
        }

        #[test]
        fn knn_independent_of_iteration_order(seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let coords = grid_coords(5, 6);
            let mut order: Vec<usize> = (0..30).collect();
            order.shuffle(&mut rng);
            let mut shuffled = BTreeSet::new();
            for &i in &order {
                for j in nearest(&coords, i, 8) {
                    shuffled.insert((i, j));
                    shuffled.insert((j, i));
                }
                shuffled.insert((i, i));
            }
            let direct: BTreeSet<_> = knn_edges(&coords, 8).unwrap().into_iter().collect();
            prop_assert_eq!(direct, shuffled);
        }
    }
}
