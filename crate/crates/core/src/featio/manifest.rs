use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::FeatureSample;
use crate::error::{Error, Result};

/// Class split of a dataset into an ordered task sequence.
///
/// FMAP paths are resolved relative to the manifest's directory when relative.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub dataset: String,
    pub tasks: Vec<Vec<u32>>,
    pub train_fmap: PathBuf,
    pub test_fmap: PathBuf,
}

impl TaskManifest {
    /// Splits `num_classes` consecutive class ids into `num_tasks` equal tasks.
    pub fn split_classes(
        dataset: impl Into<String>,
        num_classes: u32,
        num_tasks: u32,
        train_fmap: impl Into<PathBuf>,
        test_fmap: impl Into<PathBuf>,
    ) -> Result<Self> {
        if num_tasks == 0 || num_classes == 0 || !num_classes.is_multiple_of(num_tasks) {
            return Err(Error::Contract(format!(
                "{num_classes} classes cannot be split evenly into {num_tasks} tasks"
            )));
        }
        let per = num_classes / num_tasks;
        let tasks = (0..num_tasks).map(|t| (t * per..(t + 1) * per).collect()).collect();
        Ok(TaskManifest {
            dataset: dataset.into(),
            tasks,
            train_fmap: train_fmap.into(),
            test_fmap: test_fmap.into(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: TaskManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        m.validate()?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut m.train_fmap, &mut m.test_fmap] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Class sets must be non-empty and pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::contract("manifest has no tasks"));
        }
        let mut seen = BTreeSet::new();
        for (t, classes) in self.tasks.iter().enumerate() {
            if classes.is_empty() {
                return Err(Error::Contract(format!("task {t} has no classes")));
            }
            for &c in classes {
                if !seen.insert(c) {
                    return Err(Error::Contract(format!("class {c} appears in more than one task")));
                }
            }
        }
        Ok(())
    }

    /// Every label in `samples` must belong to some task.
    pub fn check_covers(&self, samples: &[FeatureSample]) -> Result<()> {
        let all: BTreeSet<u32> = self.tasks.iter().flatten().copied().collect();
        if let Some(s) = samples.iter().find(|s| !all.contains(&s.label)) {
            return Err(Error::Contract(format!(
                "label {} is not assigned to any task",
                s.label
            )));
        }
        Ok(())
    }

    /// Classifier width: one past the largest class id.
    pub fn num_classes(&self) -> usize {
        self.tasks.iter().flatten().max().map_or(0, |&c| c as usize + 1)
    }

    /// Samples whose label belongs to task `t` (0-based), in input order.
    pub fn task_samples<'a>(&self, t: usize, samples: &'a [FeatureSample]) -> Vec<&'a FeatureSample> {
        let classes = &self.tasks[t];
        samples.iter().filter(|s| classes.contains(&s.label)).collect()
    }
}
