use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::{AdamState, Tape};
use crate::featio::{gen_synthetic_splits, ScaleDims, SyntheticSpec};
use crate::graphbuild::{FeatureGraph, GraphBuilder, GraphOptions};
use crate::model::{GraphBatch, Mode, ModelConfig, ModelState, NormKind, PoolMode};

const CLASSES_PER_TASK: usize = 2;

fn tasks(num_tasks: usize, train_per_class: usize) -> Vec<TaskData> {
    let dims = vec![ScaleDims::new(3, 4, 4), ScaleDims::new(2, 2, 2)];
    let spec = SyntheticSpec {
        num_classes: (num_tasks * CLASSES_PER_TASK) as u32,
        train_per_class,
        test_per_class: 4,
        dims: dims.clone(),
        separation: 0.5,
    };
    let (train, test) = gen_synthetic_splits(&spec, 7).unwrap();
    let builder = GraphBuilder::new(
        &dims,
        GraphOptions {
            k: 4,
            normalize_xy: false,
        },
    )
    .unwrap();
    let to_graphs = |s: &[crate::featio::FeatureSample]| -> Vec<Arc<FeatureGraph>> {
        builder.build_all(s).unwrap().into_iter().map(Arc::new).collect()
    };
    let (train, test) = (to_graphs(&train), to_graphs(&test));
    (0..num_tasks)
        .map(|t| {
            let in_task = |g: &&Arc<FeatureGraph>| g.label as usize / CLASSES_PER_TASK == t;
            TaskData {
                train: train.iter().filter(in_task).cloned().collect(),
                test: test.iter().filter(in_task).cloned().collect(),
            }
        })
        .collect()
}

fn config(num_classes: usize) -> ModelConfig {
    ModelConfig {
        heads: 2,
        channels: 4,
        hidden: 8,
        pool: PoolMode::Wmean,
        tessellated: true,
        norm: NormKind::Spn,
        ..ModelConfig::new(7, (4, 4), num_classes)
    }
}

fn plan() -> TrainPlan {
    TrainPlan {
        batch_size: 4,
        lr: 1e-2,
        ..TrainPlan::default()
    }
}

fn bits(m: &ModelState) -> Vec<u64> {
    m.params()
        .into_iter()
        .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
        .chain(
            m.norm
                .running_mean
                .iter()
                .chain(&m.norm.running_var)
                .map(|v| v.to_bits()),
        )
        .collect()
}

/// Plain sequential fine-tuning written out directly: shuffled current-task
/// samples in batches, cross-entropy, Adam.
fn fine_tune_oracle(cfg: &ModelConfig, data: &[TaskData], p: &TrainPlan, seed: u64) -> (ModelState, Vec<f64>) {
    let mut model = ModelState::init(cfg.clone(), seed).unwrap();
    let mut adam = AdamState::new(p.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut trace = Vec::new();
    for task in data {
        let mut order = task.train.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(p.batch_size) {
            let batch = GraphBatch::new(chunk).unwrap();
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let out = model.forward_on(&mut tape, &vars, &batch, Mode::Train).unwrap();
            let loss = ce_loss(&mut tape, out.logits, &batch.labels).unwrap();
            trace.push(tape.value(loss).item());
            let grads = tape.backward(loss).unwrap();
            model.accumulate_grads(&grads, &vars).unwrap();
            adam.step(&mut model.params_mut()).unwrap();
            model.norm.update_running(out.norm_stats.as_ref().unwrap());
        }
    }
    (model, trace)
}

#[test]
fn zero_alpha_equals_cross_entropy_only_training() {
    let data = tasks(3, 6);
    let cfg = config(6);
    let p = TrainPlan { alpha: 0.0, ..plan() };
    let run = run_experiment(&cfg, &data, &p, 3).unwrap();
    let (oracle, trace) = fine_tune_oracle(&cfg, &data, &p, 3);
    let l: Vec<u64> = run.events.iter().map(|e| e.l.to_bits()).collect();
    assert_eq!(l, trace.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert!(run.events.iter().all(|e| e.l_dl.is_none() && e.l == e.l_ce));
    assert_eq!(bits(&run.model), bits(&oracle));
}

#[test]
fn first_task_never_distills() {
    let data = tasks(1, 6);
    let cfg = config(2);
    let a = run_experiment(&cfg, &data, &TrainPlan { alpha: 0.0, ..plan() }, 1).unwrap();
    let b = run_experiment(&cfg, &data, &TrainPlan { alpha: 5.0, ..plan() }, 1).unwrap();
    assert_eq!(bits(&a.model), bits(&b.model));
    assert!(b.events.iter().all(|e| e.l_dl.is_none()));
}

#[test]
fn later_tasks_distill_when_alpha_is_positive() {
    let data = tasks(2, 4);
    let run = run_experiment(&config(4), &data, &TrainPlan { alpha: 0.5, ..plan() }, 1).unwrap();
    for e in &run.events {
        match e.task {
            0 => assert!(e.l_dl.is_none()),
            _ => {
                let dl = e.l_dl.unwrap();
                assert!(dl >= 0.0);
                assert!((e.l - (e.l_ce + 0.5 * dl)).abs() <= 1e-12 * e.l.abs().max(1.0));
            }
        }
    }
}

#[test]
fn seeded_runs_are_bit_identical() {
    let data = tasks(2, 5);
    let p = TrainPlan {
        rehearsal_per_class: 2,
        duplication: 3,
        ..plan()
    };
    let a = run_experiment(&config(4), &data, &p, 9).unwrap();
    let b = run_experiment(&config(4), &data, &p, 9).unwrap();
    assert_eq!(bits(&a.model), bits(&b.model));
    assert_eq!(a.matrix, b.matrix);
    assert_eq!(a.events, b.events);
    let c = run_experiment(&config(4), &data, &p, 10).unwrap();
    assert_ne!(bits(&a.model), bits(&c.model));
}

#[test]
fn buffer_size_ignores_duplication() {
    let data = tasks(3, 8);
    for d in [1, 5, 20] {
        let p = TrainPlan {
            rehearsal_per_class: 3,
            duplication: d,
            ..plan()
        };
        let mut learner = Learner::new(config(6), &p, 0).unwrap();
        for (t, task) in data.iter().enumerate() {
            let report = learner.train_task(t, &task.train, &p).unwrap();
            assert!(report.rehearsal_presentations.iter().all(|&n| n == d));
            assert_eq!(learner.buffer.len(), (t + 1) * CLASSES_PER_TASK * 3, "d={d} task {t}");
            assert!(learner.buffer.entries().iter().all(|e| e.task <= t));
        }
    }
}

#[test]
fn current_samples_are_seen_once_per_epoch() {
    let data = tasks(2, 5);
    for epochs in [1, 2] {
        let p = TrainPlan {
            epochs,
            rehearsal_per_class: 1,
            duplication: 4,
            ..plan()
        };
        let mut learner = Learner::new(config(4), &p, 0).unwrap();
        for (t, task) in data.iter().enumerate() {
            let report = learner.train_task(t, &task.train, &p).unwrap();
            assert_eq!(report.current_presentations.len(), task.train.len());
            assert!(report.current_presentations.iter().all(|&n| n == epochs));
            let expected_batches = epochs * (task.train.len() + 4 * learner_buffer_before(t)).div_ceil(4);
            assert_eq!(report.events.len(), expected_batches);
        }
    }
}

fn learner_buffer_before(task: usize) -> usize {
    task * CLASSES_PER_TASK
}

#[test]
fn snapshot_is_untouched_by_training() {
    let data = tasks(2, 5);
    let p = TrainPlan {
        rehearsal_per_class: 2,
        duplication: 2,
        ..plan()
    };
    let mut learner = Learner::new(config(4), &p, 0).unwrap();
    learner.train_task(0, &data[0].train, &p).unwrap();
    let frozen = learner.snapshot.clone().unwrap();
    let before = bits(&frozen);
    let mut model = learner.model.clone();
    let mut adam = learner.adam.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    train_task(
        &mut model,
        &mut adam,
        1,
        &data[1].train,
        &p,
        &learner.buffer,
        Some(&frozen),
        None,
        &mut rng,
    )
    .unwrap();
    assert_eq!(bits(&frozen), before);
    assert_ne!(bits(&model), before);
}

#[test]
fn snapshot_presence_is_checked() {
    let data = tasks(1, 2);
    let p = plan();
    let mut model = ModelState::init(config(2), 0).unwrap();
    let other = model.clone();
    let mut adam = AdamState::new(p.lr);
    let buffer = RehearsalBuffer::new(0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = &data[0].train;
    assert!(train_task(&mut model, &mut adam, 0, t, &p, &buffer, Some(&other), None, &mut rng).is_err());
    assert!(train_task(&mut model, &mut adam, 1, t, &p, &buffer, None, None, &mut rng).is_err());
}

#[test]
fn matrix_is_lower_triangular_with_valid_entries() {
    let data = tasks(3, 4);
    let run = run_experiment(&config(6), &data, &plan(), 0).unwrap();
    assert_eq!(run.matrix.num_tasks(), 3);
    for (i, row) in run.matrix.rows().iter().enumerate() {
        assert_eq!(row.len(), i + 1);
        assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn masking_hides_unseen_classes() {
    let data = tasks(2, 4);
    let p = TrainPlan {
        mask_unseen: true,
        ..plan()
    };
    let mut learner = Learner::new(config(4), &p, 0).unwrap();
    learner.train_task(0, &data[0].train, &p).unwrap();
    assert_eq!(learner.seen_classes, vec![0, 1]);
    // Task-1 test samples carry unseen labels, which a masked model cannot predict.
    assert_eq!(learner.evaluate(&data[1].test, &p).unwrap(), 0.0);
    assert_eq!(class_mask(&[1], 3).data(), &[-1e9, 0.0, -1e9]);
}

#[test]
fn invalid_plans_are_rejected() {
    for bad in [
        TrainPlan {
            duplication: 0,
            ..plan()
        },
        TrainPlan {
            batch_size: 0,
            ..plan()
        },
        TrainPlan {
            temperature: 0.0,
            ..plan()
        },
        TrainPlan { alpha: -1.0, ..plan() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn plan_defaults() {
    let p: TrainPlan = serde_json::from_str("{}").unwrap();
    assert_eq!(p, TrainPlan::default());
    assert_eq!(
        (p.alpha, p.temperature, p.batch_size, p.epochs, p.lr),
        (1.0, 2.0, 32, 1, 1e-3)
    );
}
