//! The FGAT network: two GATv2 layers, node normalization, global pooling and
//! a two-layer classifier head.
//!
//! Batches are disjoint unions of graphs ([`GraphBatch`]); every stage keeps
//! graphs independent, so a batched forward in [`Mode::Eval`] is bit-equal to
//! forwarding each graph alone.

mod batch;
mod checkpoint;
mod classifier;
mod gat;
mod norm;
mod pool;

pub use batch::GraphBatch;
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CKPT_MAGIC, CKPT_VERSION,
};
pub use classifier::{classifier, ClassifierParams, ClassifierVars};
pub use gat::{gat_attention, gat_layer, GatLayerParams, GatVars, Topology};
pub use norm::{node_norm, standardize_segments, BatchStats, Mode, NormKind, NormParams, NormVars};
pub use pool::{global_pool, tile_order, weight_side, PoolMode, PoolParams};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graphbuild::{FeatureGraph, GraphOptions};

/// Architecture and graph-construction settings echoed into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Node feature width (scale channels plus the two coordinates).
    pub in_dim: usize,
    /// Node grid `(height, width)`.
    pub grid: (usize, usize),
    pub num_classes: usize,
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    /// Channels per head in both GAT layers.
    #[serde(default = "defaults::width")]
    pub channels: usize,
    /// Classifier hidden width.
    #[serde(default = "defaults::width")]
    pub hidden: usize,
    #[serde(default = "defaults::pool")]
    pub pool: PoolMode,
    #[serde(default = "defaults::yes")]
    pub tessellated: bool,
    #[serde(default = "defaults::norm")]
    pub norm: NormKind,
    #[serde(default = "defaults::slope")]
    pub leaky_slope: f64,
    /// Aggregate a separate value projection instead of `W_src h_j`.
    #[serde(default)]
    pub separate_value: bool,
    #[serde(default = "defaults::eps")]
    pub norm_eps: f64,
    #[serde(default = "defaults::momentum")]
    pub norm_momentum: f64,
    #[serde(default)]
    pub graph: GraphOptions,
}

mod defaults {
    use super::{NormKind, PoolMode};

    pub fn heads() -> usize {
        4
    }
    pub fn width() -> usize {
        128
    }
    pub fn pool() -> PoolMode {
        PoolMode::Wmean
    }
    pub fn yes() -> bool {
        true
    }
    pub fn norm() -> NormKind {
        NormKind::Spn
    }
    pub fn slope() -> f64 {
        0.2
    }
    pub fn eps() -> f64 {
        1e-5
    }
    pub fn momentum() -> f64 {
        0.1
    }
}

impl ModelConfig {
    /// Defaults for everything except the data-dependent fields.
    pub fn new(in_dim: usize, grid: (usize, usize), num_classes: usize) -> Self {
        ModelConfig {
            in_dim,
            grid,
            num_classes,
            heads: defaults::heads(),
            channels: defaults::width(),
            hidden: defaults::width(),
            pool: defaults::pool(),
            tessellated: defaults::yes(),
            norm: defaults::norm(),
            leaky_slope: defaults::slope(),
            separate_value: false,
            norm_eps: defaults::eps(),
            norm_momentum: defaults::momentum(),
            graph: GraphOptions::default(),
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_dim", self.in_dim),
            ("grid height", self.grid.0),
            ("grid width", self.grid.1),
            ("num_classes", self.num_classes),
            ("heads", self.heads),
            ("channels", self.channels),
            ("hidden", self.hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Contract(format!("model config: {name} must be positive")));
            }
        }
        if !(self.norm_eps > 0.0) || !(0.0..=1.0).contains(&self.norm_momentum) {
            return Err(Error::contract(
                "model config: norm_eps must be > 0 and norm_momentum in [0, 1]",
            ));
        }
        if self.pool == PoolMode::Wmean {
            weight_side(self.grid, self.tessellated)?;
        }
        Ok(())
    }
}

/// All trainable parameters plus the configuration they were built from.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub gat: Vec<GatLayerParams>,
    pub norm: NormParams,
    pub pool: PoolParams,
    pub classifier: ClassifierParams,
}

/// Tape handles for every parameter of a [`ModelState`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub gat: Vec<GatVars>,
    pub norm: NormVars,
    pub pool: Option<Var>,
    pub classifier: ClassifierVars,
}

impl ModelVars {
    /// Handles in canonical parameter order.
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for g in &self.gat {
            out.extend([g.w_dst, g.w_src, g.a]);
            out.extend(g.w_val);
        }
        out.extend([self.norm.gamma, self.norm.beta]);
        out.extend(self.norm.rho_logit);
        out.extend(self.pool);
        let c = &self.classifier;
        out.extend([c.w1, c.b1, c.w2, c.b2]);
        out
    }
}

/// Logits plus any batch statistics observed on the way.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub norm_stats: Option<BatchStats>,
}

impl ModelState {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x6d6f_64656c);
        let width = config.heads * config.channels;
        let gat = vec![
            GatLayerParams::init(
                &mut rng,
                config.in_dim,
                config.heads,
                config.channels,
                config.leaky_slope,
                config.separate_value,
            ),
            GatLayerParams::init(
                &mut rng,
                width,
                config.heads,
                config.channels,
                config.leaky_slope,
                config.separate_value,
            ),
        ];
        let norm = NormParams::new(config.norm, width, config.norm_eps, config.norm_momentum);
        let pool = PoolParams::new(config.pool, config.tessellated, config.grid)?;
        let classifier = ClassifierParams::init(&mut rng, width, config.hidden, config.num_classes);
        Ok(ModelState {
            config,
            gat,
            norm,
            pool,
            classifier,
        })
    }

    /// Parameters in canonical order: GAT layers, normalization, pooling
    /// weight, classifier.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.gat.iter().flat_map(GatLayerParams::tensors).collect();
        out.extend(self.norm.tensors());
        out.extend(self.pool.tensors());
        out.extend(self.classifier.tensors());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.gat.iter_mut().flat_map(GatLayerParams::tensors_mut).collect();
        out.extend(self.norm.tensors_mut());
        out.extend(self.pool.tensors_mut());
        out.extend(self.classifier.tensors_mut());
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// `track = false` binds every parameter as a constant (frozen copy).
    pub fn bind(&self, tape: &mut Tape, track: bool) -> ModelVars {
        ModelVars {
            gat: self.gat.iter().map(|g| g.bind(tape, track)).collect(),
            norm: self.norm.bind(tape, track),
            pool: self.pool.bind(tape, track),
            classifier: self.classifier.bind(tape, track),
        }
    }

    /// Inverse of [`ModelVars::ordered`] for this model's layout.
    pub fn vars_from_ordered(&self, vars: &[Var]) -> Result<ModelVars> {
        let expected = self.params().len();
        if vars.len() != expected {
            return Err(Error::Contract(format!(
                "expected {expected} parameter handles, got {}",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let gat = self
            .gat
            .iter()
            .map(|g| GatVars {
                w_dst: next(),
                w_src: next(),
                a: next(),
                w_val: g.w_val.as_ref().map(|_| next()),
            })
            .collect();
        let norm = NormVars {
            gamma: next(),
            beta: next(),
            rho_logit: self.norm.rho_logit.as_ref().map(|_| next()),
        };
        let pool = self.pool.weight.as_ref().map(|_| next());
        let classifier = ClassifierVars {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        };
        Ok(ModelVars {
            gat,
            norm,
            pool,
            classifier,
        })
    }

    fn check_batch(&self, batch: &GraphBatch) -> Result<()> {
        let c = &self.config;
        if batch.features.shape()[1] != c.in_dim || batch.grid != c.grid || batch.nodes_per_graph != c.grid.0 * c.grid.1
        {
            return Err(Error::Contract(format!(
                "batch of {} nodes x {} features on grid {:?} does not fit a model for {} features on grid {:?}",
                batch.nodes_per_graph,
                batch.features.shape()[1],
                batch.grid,
                c.in_dim,
                c.grid
            )));
        }
        Ok(())
    }

    /// Records the full forward pass on `tape`.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        batch: &GraphBatch,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let topo = Topology {
            src: batch.src.clone(),
            dst: batch.dst.clone(),
            num_nodes: batch.num_nodes(),
        };
        let x = tape.constant(batch.features.detached());
        let h = self.gat[0].forward(tape, &vars.gat[0], x, &topo, true)?;
        let h = self.gat[1].forward(tape, &vars.gat[1], h, &topo, false)?;
        let (h, norm_stats) = self.norm.forward(tape, &vars.norm, h, batch, mode)?;
        let pooled = self.pool.forward(tape, vars.pool, h, batch)?;
        let logits = self.classifier.forward(tape, &vars.classifier, pooled)?;
        Ok(ForwardOutput { logits, norm_stats })
    }

    /// Inference logits `(num_graphs, num_classes)`.
    pub fn logits(&self, batch: &GraphBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let out = self.forward_on(&mut tape, &vars, batch, Mode::Eval)?;
        Ok(tape.value(out.logits).detached())
    }

    /// Arg-max class per graph; ties go to the lowest class id.
    pub fn predict(&self, batch: &GraphBatch) -> Result<Vec<u32>> {
        let logits = self.logits(batch)?;
        Ok(argmax_rows(&logits))
    }

    /// Adds the gradients of `vars` into their parameters.
    pub fn accumulate_grads(&mut self, grads: &Gradients, vars: &ModelVars) -> Result<()> {
        let handles = vars.ordered();
        let mut params = self.params_mut();
        if handles.len() != params.len() {
            return Err(Error::contract("model vars do not match the parameter list"));
        }
        for (v, p) in handles.into_iter().zip(params.iter_mut()) {
            grads.accumulate_into(v, p)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Index of the largest entry of every row; the first maximum wins.
pub fn argmax_rows(logits: &Tensor) -> Vec<u32> {
    let cols = *logits.shape().last().expect("non-empty shape");
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

/// Inference logits for a single graph.
pub fn forward(graph: &FeatureGraph, state: &ModelState) -> Result<Vec<f64>> {
    let batch = GraphBatch::new(&[graph])?;
    Ok(state.logits(&batch)?.into_data())
}
