//! The release-gate gradient suite over every differentiable component.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check, project, TOLERANCE};
use crate::diffcore::{Index, Tape, Tensor, Var};
use crate::error::Result;
use crate::featio::{gen_synthetic, ScaleDims};
use crate::graphbuild::{GraphBuilder, GraphOptions};
use crate::harness::{ce_loss, lwf_loss};
use crate::model::{
    ClassifierParams, ClassifierVars, GatLayerParams, GatVars, GraphBatch, Mode, ModelConfig, ModelState, NormKind,
    NormParams, NormVars, PoolMode, PoolParams, Topology,
};

/// Every component the suite checks, in report order.
pub const COMPONENTS: &[&str] = &[
    "tape_ops",
    "gat_attention",
    "gat_layer",
    "gat_layer_separate_value",
    "node_norm_graph",
    "node_norm_spn",
    "pool_max",
    "pool_add",
    "pool_mean",
    "pool_wmean",
    "pool_wmean_tessellated",
    "classifier",
    "ce_loss",
    "lwf_loss",
    "full_model",
];

/// Seeds per component.
const SEEDS: u64 = 3;

#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    /// Flips the analytic gradient of the named component, to prove the
    /// suite catches a wrong gradient.
    pub inject_fault: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Two 4x4-grid graphs from two scales, k = 4.
fn toy_batch(seed: u64) -> Result<GraphBatch> {
    let dims = [ScaleDims::new(2, 4, 4), ScaleDims::new(1, 2, 2)];
    let samples = gen_synthetic(2, 1, &dims, 1.0, seed)?;
    let builder = GraphBuilder::new(
        &dims,
        GraphOptions {
            k: 4,
            normalize_xy: true,
        },
    )?;
    GraphBatch::new(&builder.build_all(&samples)?)
}

fn topology(batch: &GraphBatch) -> Topology {
    Topology {
        src: batch.src.clone(),
        dst: batch.dst.clone(),
        num_nodes: batch.num_nodes(),
    }
}

fn gat_vars(v: &[Var], separate: bool) -> GatVars {
    GatVars {
        w_dst: v[0],
        w_src: v[1],
        a: v[2],
        w_val: separate.then(|| v[3]),
    }
}

fn perturbed(mut t: Vec<Tensor>, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    for x in &mut t {
        x.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    t
}

fn check_component(name: &str, seed: u64, negate: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(name.len() as u64);
    match name {
        "tape_ops" => {
            let seg: Index = Arc::from(vec![0, 0, 1, 1, 1]);
            let inputs = vec![rand_tensor(&mut rng, &[5, 3], 2.0), rand_tensor(&mut rng, &[3, 3], 1.0)];
            check(
                &inputs,
                |t, v| {
                    let h = t.matmul(v[0], v[1])?;
                    let a = t.elu(h);
                    let b = t.leaky_relu(h, 0.2);
                    let c = t.sigmoid(h);
                    let s = t.segment_softmax(b, &seg, 2)?;
                    let m = t.mul(s, c)?;
                    let l = t.log_softmax_rows(a)?;
                    let all = t.concat(&[m, l])?;
                    let pooled = t.segment_max(all, &seg, 2)?;
                    project(t, pooled, seed)
                },
                negate,
            )
        }
        "gat_attention" | "gat_layer" | "gat_layer_separate_value" => {
            let batch = toy_batch(seed)?;
            let topo = topology(&batch);
            let separate = name == "gat_layer_separate_value";
            let p = GatLayerParams::init(&mut rng, batch.features.shape()[1], 2, 2, 0.2, separate);
            let mut inputs = vec![batch.features.clone()];
            inputs.extend(p.tensors().into_iter().map(Tensor::detached));
            check(
                &inputs,
                |t, v| {
                    let gv = gat_vars(&v[1..], separate);
                    let out = if name == "gat_attention" {
                        p.attention(t, &gv, v[0], &topo)?
                    } else {
                        p.forward(t, &gv, v[0], &topo, true)?
                    };
                    project(t, out, seed)
                },
                negate,
            )
        }
        "node_norm_graph" | "node_norm_spn" => {
            let batch = toy_batch(seed)?;
            let kind = if name == "node_norm_spn" {
                NormKind::Spn
            } else {
                NormKind::Graph
            };
            let p = NormParams::new(kind, 3, 1e-5, 0.1);
            let h = rand_tensor(&mut rng, &[batch.num_nodes(), 3], 2.0);
            let mut inputs = vec![h];
            inputs.extend(perturbed(
                p.tensors().into_iter().map(Tensor::detached).collect(),
                &mut rng,
            ));
            check(
                &inputs,
                |t, v| {
                    let nv = NormVars {
                        gamma: v[1],
                        beta: v[2],
                        rho_logit: v.get(3).copied(),
                    };
                    let (out, _) = p.forward(t, &nv, v[0], &batch, Mode::Train)?;
                    project(t, out, seed)
                },
                negate,
            )
        }
        "pool_max" | "pool_add" | "pool_mean" | "pool_wmean" | "pool_wmean_tessellated" => {
            let batch = toy_batch(seed)?;
            let mode = match name {
                "pool_max" => PoolMode::Max,
                "pool_add" => PoolMode::Add,
                "pool_mean" => PoolMode::Mean,
                _ => PoolMode::Wmean,
            };
            let p = PoolParams::new(mode, name == "pool_wmean_tessellated", batch.grid)?;
            let h = rand_tensor(&mut rng, &[batch.num_nodes(), 2], 2.0);
            let mut inputs = vec![h];
            inputs.extend(perturbed(
                p.tensors().into_iter().map(Tensor::detached).collect(),
                &mut rng,
            ));
            check(
                &inputs,
                |t, v| {
                    let out = p.forward(t, v.get(1).copied(), v[0], &batch)?;
                    project(t, out, seed)
                },
                negate,
            )
        }
        "classifier" => {
            let p = ClassifierParams::init(&mut rng, 4, 6, 3);
            let mut inputs = vec![rand_tensor(&mut rng, &[2, 4], 2.0)];
            inputs.extend(p.tensors().into_iter().map(Tensor::detached));
            check(
                &inputs,
                |t, v| {
                    let cv = ClassifierVars {
                        w1: v[1],
                        b1: v[2],
                        w2: v[3],
                        b2: v[4],
                    };
                    let out = p.forward(t, &cv, v[0])?;
                    project(t, out, seed)
                },
                negate,
            )
        }
        "ce_loss" => {
            let x = rand_tensor(&mut rng, &[3, 5], 3.0);
            check(&[x], |t, v| ce_loss(t, v[0], &[4, 0, 2]), negate)
        }
        "lwf_loss" => {
            let x = rand_tensor(&mut rng, &[3, 5], 3.0);
            let old = rand_tensor(&mut rng, &[3, 5], 3.0);
            check(&[x], |t, v| lwf_loss(t, v[0], &old, 2.0), negate)
        }
        "full_model" => {
            let batch = toy_batch(seed)?;
            let config = ModelConfig {
                heads: 2,
                channels: 2,
                hidden: 4,
                pool: PoolMode::Wmean,
                tessellated: true,
                norm: NormKind::Spn,
                ..ModelConfig::new(batch.features.shape()[1], batch.grid, 3)
            };
            let mut model = ModelState::init(config, seed)?;
            if let Some(w) = model.pool.weight.as_mut() {
                w.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            }
            let inputs: Vec<Tensor> = model.params().into_iter().map(Tensor::detached).collect();
            check(
                &inputs,
                |t: &mut Tape, v| {
                    let vars = model.vars_from_ordered(v)?;
                    let out = model.forward_on(t, &vars, &batch, Mode::Train)?;
                    let l = ce_loss(t, out.logits, &batch.labels)?;
                    let p = project(t, out.logits, seed)?;
                    t.add(l, p)
                },
                negate,
            )
        }
        other => unreachable!("unknown gradcheck component {other}"),
    }
}

/// Checks every component in [`COMPONENTS`] over a few seeds.
pub fn run_suite(options: &SuiteOptions) -> Result<Vec<ComponentReport>> {
    COMPONENTS
        .iter()
        .map(|&name| {
            let negate = options.inject_fault.as_deref() == Some(name);
            let mut worst = 0.0f64;
            for seed in 0..SEEDS {
                worst = worst.max(check_component(name, seed, negate)?);
            }
            Ok(ComponentReport {
                name,
                max_rel_err: worst,
                passed: worst < TOLERANCE,
            })
        })
        .collect()
}
