//! Task-by-task online training.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::buffer::{build_task_train_set, Origin, RehearsalBuffer};
use super::loss::{ce_loss, lwf_loss};
use crate::diffcore::{AdamState, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graphbuild::FeatureGraph;
use crate::metrics::{evaluate_task, AccuracyMatrix};
use crate::model::{GraphBatch, Mode, ModelConfig, ModelState};

/// Training hyper-parameters shared by every task of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    /// Times each buffer entry appears in a task's training multiset.
    #[serde(default = "defaults::one")]
    pub duplication: usize,
    /// Stored samples per class; 0 disables rehearsal.
    #[serde(default)]
    pub rehearsal_per_class: usize,
    /// Distillation weight; 0 trains on cross-entropy alone.
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::temperature")]
    pub temperature: f64,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::one")]
    pub epochs: usize,
    /// Restrict the logits to classes seen so far, in training and evaluation.
    #[serde(default)]
    pub mask_unseen: bool,
}

mod defaults {
    pub fn one() -> usize {
        1
    }
    pub fn alpha() -> f64 {
        1.0
    }
    pub fn temperature() -> f64 {
        2.0
    }
    pub fn lr() -> f64 {
        1e-3
    }
    pub fn batch_size() -> usize {
        32
    }
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            duplication: 1,
            rehearsal_per_class: 0,
            alpha: defaults::alpha(),
            temperature: defaults::temperature(),
            lr: defaults::lr(),
            batch_size: defaults::batch_size(),
            epochs: 1,
            mask_unseen: false,
        }
    }
}

impl TrainPlan {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.duplication == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::contract(
                "train plan: duplication, batch_size and epochs must be positive",
            ));
        }
        if !(self.alpha >= 0.0) || !(self.temperature > 0.0) || !(self.lr > 0.0) {
            return Err(Error::contract(
                "train plan: need alpha >= 0, temperature > 0 and lr > 0",
            ));
        }
        Ok(())
    }
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossEvent {
    pub task: usize,
    pub batch: usize,
    pub l_ce: f64,
    /// Absent when no distillation term was computed.
    pub l_dl: Option<f64>,
    pub l: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TaskReport {
    pub events: Vec<LossEvent>,
    /// Gradient updates each current-task sample took part in.
    pub current_presentations: Vec<usize>,
    /// Gradient updates each buffer entry took part in.
    pub rehearsal_presentations: Vec<usize>,
}

/// Training state carried across tasks.
#[derive(Clone, Debug)]
pub struct Learner {
    pub model: ModelState,
    pub adam: AdamState,
    pub buffer: RehearsalBuffer,
    /// Frozen copy of the model taken after the previous task.
    pub snapshot: Option<ModelState>,
    /// Classes of every task trained so far.
    pub seen_classes: Vec<u32>,
    shuffle_rng: ChaCha8Rng,
    buffer_rng: ChaCha8Rng,
}

impl Learner {
    pub fn new(config: ModelConfig, plan: &TrainPlan, seed: u64) -> Result<Self> {
        plan.validate()?;
        let model = ModelState::init(config, seed)?;
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
        shuffle_rng.set_stream(1);
        let mut buffer_rng = ChaCha8Rng::seed_from_u64(seed);
        buffer_rng.set_stream(2);
        Ok(Learner {
            model,
            adam: AdamState::new(plan.lr),
            buffer: RehearsalBuffer::new(plan.rehearsal_per_class),
            snapshot: None,
            seen_classes: Vec::new(),
            shuffle_rng,
            buffer_rng,
        })
    }

    /// Trains on task `task`, then stores its samples in the buffer and
    /// snapshots the model.
    pub fn train_task(&mut self, task: usize, current: &[Arc<FeatureGraph>], plan: &TrainPlan) -> Result<TaskReport> {
        for g in current {
            if !self.seen_classes.contains(&g.label) {
                self.seen_classes.push(g.label);
            }
        }
        let mask = plan
            .mask_unseen
            .then(|| class_mask(&self.seen_classes, self.model.config.num_classes));
        let report = train_task(
            &mut self.model,
            &mut self.adam,
            task,
            current,
            plan,
            &self.buffer,
            self.snapshot.as_ref(),
            mask.as_ref(),
            &mut self.shuffle_rng,
        )?;
        self.buffer.update(task, current, &mut self.buffer_rng);
        let mut frozen = self.model.clone();
        frozen.zero_grads();
        self.snapshot = Some(frozen);
        Ok(report)
    }

    /// Accuracy on one task's test graphs.
    pub fn evaluate(&self, test: &[Arc<FeatureGraph>], plan: &TrainPlan) -> Result<f64> {
        let mask = plan
            .mask_unseen
            .then(|| class_mask(&self.seen_classes, self.model.config.num_classes));
        evaluate_task(&self.model, test, mask.as_ref())
    }
}

/// Additive logit mask: 0 on seen classes, a large negative value elsewhere.
pub fn class_mask(seen: &[u32], num_classes: usize) -> Tensor {
    let mut m = vec![-1e9; num_classes];
    for &c in seen {
        if let Some(v) = m.get_mut(c as usize) {
            *v = 0.0;
        }
    }
    Tensor::vector(m)
}

/// One pass (per epoch) over the current samples plus the duplicated buffer,
/// one Adam step per batch on `L_CE + alpha * L_DL`.
///
/// The distillation term needs `snapshot` and is skipped on the first task
/// and whenever `alpha == 0`.
#[allow(clippy::too_many_arguments)]
pub fn train_task(
    model: &mut ModelState,
    adam: &mut AdamState,
    task: usize,
    current: &[Arc<FeatureGraph>],
    plan: &TrainPlan,
    buffer: &RehearsalBuffer,
    snapshot: Option<&ModelState>,
    mask: Option<&Tensor>,
    rng: &mut ChaCha8Rng,
) -> Result<TaskReport> {
    plan.validate()?;
    if (task == 0) != snapshot.is_none() {
        return Err(Error::Contract(format!(
            "train_task: a snapshot is required exactly for tasks after the first (task {task}, snapshot {})",
            snapshot.is_some()
        )));
    }
    let distill = task > 0 && plan.alpha > 0.0;
    let mut report = TaskReport {
        events: Vec::new(),
        current_presentations: vec![0; current.len()],
        rehearsal_presentations: vec![0; buffer.len()],
    };
    let mut batch_index = 0;
    for _ in 0..plan.epochs {
        let items = build_task_train_set(current, buffer, plan.duplication, rng);
        for chunk in items.chunks(plan.batch_size) {
            let graphs: Vec<&FeatureGraph> = chunk.iter().map(|i| i.graph.as_ref()).collect();
            let batch = GraphBatch::new(&graphs)?;
            let old = match (distill, snapshot) {
                (true, Some(s)) => Some(masked(s.logits(&batch)?, mask)),
                _ => None,
            };

            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let out = model.forward_on(&mut tape, &vars, &batch, Mode::Train)?;
            let logits = match mask {
                Some(m) => {
                    let m = tape.constant(m.clone());
                    tape.add_row(out.logits, m)?
                }
                None => out.logits,
            };
            let l_ce = ce_loss(&mut tape, logits, &batch.labels)?;
            let (loss, l_dl) = match &old {
                Some(old) => {
                    let l_dl = lwf_loss(&mut tape, logits, old, plan.temperature)?;
                    let weighted = tape.scale(l_dl, plan.alpha);
                    (tape.add(l_ce, weighted)?, Some(tape.value(l_dl).item()))
                }
                None => (l_ce, None),
            };
            let grads = tape.backward(loss)?;
            model.accumulate_grads(&grads, &vars)?;
            adam.step(&mut model.params_mut())?;
            if let Some(stats) = &out.norm_stats {
                model.norm.update_running(stats);
            }

            for item in chunk {
                match item.origin {
                    Origin::Current(i) => report.current_presentations[i] += 1,
                    Origin::Rehearsal(i) => report.rehearsal_presentations[i] += 1,
                }
            }
            report.events.push(LossEvent {
                task,
                batch: batch_index,
                l_ce: tape.value(l_ce).item(),
                l_dl,
                l: tape.value(loss).item(),
            });
            batch_index += 1;
        }
    }
    Ok(report)
}

fn masked(mut logits: Tensor, mask: Option<&Tensor>) -> Tensor {
    if let Some(m) = mask {
        let cols = m.len();
        for row in logits.data_mut().chunks_mut(cols) {
            for (v, b) in row.iter_mut().zip(m.data()) {
                *v += b;
            }
        }
    }
    logits
}

/// Train and test graphs of one task.
#[derive(Clone, Debug, Default)]
pub struct TaskData {
    pub train: Vec<Arc<FeatureGraph>>,
    pub test: Vec<Arc<FeatureGraph>>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub matrix: AccuracyMatrix,
    pub events: Vec<LossEvent>,
    pub model: ModelState,
}

/// Trains on every task in order and fills the accuracy matrix, evaluating
/// all tasks seen so far after each one.
pub fn run_experiment(
    config: &ModelConfig,
    tasks: &[TaskData],
    plan: &TrainPlan,
    seed: u64,
) -> Result<ExperimentOutcome> {
    let mut learner = Learner::new(config.clone(), plan, seed)?;
    let mut matrix = AccuracyMatrix::new();
    let mut events = Vec::new();
    for (t, data) in tasks.iter().enumerate() {
        let report = learner.train_task(t, &data.train, plan)?;
        events.extend(report.events);
        let row = tasks[..=t]
            .iter()
            .map(|d| learner.evaluate(&d.test, plan))
            .collect::<Result<Vec<_>>>()?;
        log::info!("seed {seed} task {t}: accuracies {row:.3?}");
        matrix.push_row(row)?;
    }
    Ok(ExperimentOutcome {
        matrix,
        events,
        model: learner.model,
    })
}
