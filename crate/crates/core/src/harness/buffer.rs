//! Rehearsal memory and the per-task training multiset.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::graphbuild::FeatureGraph;

/// A stored past-task graph together with the task it came from.
#[derive(Clone, Debug)]
pub struct BufferEntry {
    pub graph: Arc<FeatureGraph>,
    pub task: usize,
}

/// Fixed per-class memory of past-task samples.
#[derive(Clone, Debug)]
pub struct RehearsalBuffer {
    samples_per_class: usize,
    entries: Vec<BufferEntry>,
}

impl RehearsalBuffer {
    /// `samples_per_class == 0` gives a buffer that never stores anything.
    pub fn new(samples_per_class: usize) -> Self {
        RehearsalBuffer {
            samples_per_class,
            entries: Vec::new(),
        }
    }

    pub fn samples_per_class(&self) -> usize {
        self.samples_per_class
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stores a uniformly drawn subset of `samples_per_class` graphs for every
    /// class of the finished task, classes in ascending order. A class with
    /// fewer graphs is stored whole.
    pub fn update(&mut self, task: usize, graphs: &[Arc<FeatureGraph>], rng: &mut impl Rng) {
        if self.samples_per_class == 0 {
            return;
        }
        let mut by_class: BTreeMap<u32, Vec<&Arc<FeatureGraph>>> = BTreeMap::new();
        for g in graphs {
            by_class.entry(g.label).or_default().push(g);
        }
        for (class, members) in by_class {
            let take = if members.len() < self.samples_per_class {
                log::warn!(
                    "class {class} of task {task} has {} samples, fewer than the {} rehearsal slots; storing all",
                    members.len(),
                    self.samples_per_class
                );
                members.len()
            } else {
                self.samples_per_class
            };
            let mut picked = index::sample(rng, members.len(), take).into_vec();
            picked.sort_unstable();
            self.entries.extend(picked.into_iter().map(|i| BufferEntry {
                graph: Arc::clone(members[i]),
                task,
            }));
        }
    }
}

/// Where a training item came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    /// Index into the current task's samples.
    Current(usize),
    /// Index into the buffer entries.
    Rehearsal(usize),
}

#[derive(Clone, Debug)]
pub struct TrainItem {
    pub graph: Arc<FeatureGraph>,
    pub origin: Origin,
}

/// The current samples plus every buffer entry repeated `duplication` times,
/// uniformly shuffled.
pub fn build_task_train_set(
    current: &[Arc<FeatureGraph>],
    buffer: &RehearsalBuffer,
    duplication: usize,
    rng: &mut impl Rng,
) -> Vec<TrainItem> {
    let mut items: Vec<TrainItem> = current
        .iter()
        .enumerate()
        .map(|(i, g)| TrainItem {
            graph: Arc::clone(g),
            origin: Origin::Current(i),
        })
        .collect();
    for (i, e) in buffer.entries.iter().enumerate() {
        for _ in 0..duplication {
            items.push(TrainItem {
                graph: Arc::clone(&e.graph),
                origin: Origin::Rehearsal(i),
            });
        }
    }
    items.shuffle(rng);
    items
}
