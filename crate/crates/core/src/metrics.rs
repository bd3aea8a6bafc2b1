//! Accuracy-matrix bookkeeping, average accuracy and average forgetting.

use std::borrow::Borrow;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::graphbuild::FeatureGraph;
use crate::model::{argmax_rows, GraphBatch, ModelState};

/// Graphs per inference batch during evaluation.
const EVAL_BATCH: usize = 256;

/// Lower-triangular `T x T` matrix: `rows[i][j]` is the accuracy on task `j`
/// after training through task `i` (`j <= i`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a matrix from complete lower-triangular rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Appends the accuracies on tasks `0..=i` measured after task `i`.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let i = self.rows.len();
        if row.len() != i + 1 {
            return Err(Error::Contract(format!(
                "accuracy row {i} must hold {} entries, got {}",
                i + 1,
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Fraction of predictions equal to their labels.
pub fn accuracy(predictions: &[u32], labels: &[u32]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "accuracy needs equal, non-empty prediction and label lists ({} vs {})",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Arg-max accuracy of `model` over all classes. `mask` is an optional
/// additive logit row.
pub fn evaluate_task<G: Borrow<FeatureGraph>>(model: &ModelState, test: &[G], mask: Option<&Tensor>) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::contract("evaluate_task: empty test set"));
    }
    let mut predictions = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    for chunk in test.chunks(EVAL_BATCH) {
        let graphs: Vec<&FeatureGraph> = chunk.iter().map(|g| g.borrow()).collect();
        let batch = GraphBatch::new(&graphs)?;
        let mut logits = model.logits(&batch)?;
        if let Some(m) = mask {
            let cols = m.len();
            for row in logits.data_mut().chunks_mut(cols) {
                row.iter_mut().zip(m.data()).for_each(|(v, b)| *v += b);
            }
        }
        predictions.extend(argmax_rows(&logits));
        labels.extend(batch.labels);
    }
    accuracy(&predictions, &labels)
}

/// Mean of the final row.
pub fn average_accuracy(a: &AccuracyMatrix) -> Result<f64> {
    let last = a
        .rows
        .last()
        .ok_or_else(|| Error::contract("average accuracy of an empty matrix"))?;
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Mean drop from each past task's just-trained accuracy to its final
/// accuracy, positive when accuracy was lost.
pub fn average_forgetting(a: &AccuracyMatrix) -> Result<f64> {
    let t = a.num_tasks();
    if t < 2 {
        return Err(Error::Contract(format!(
            "average forgetting needs at least 2 tasks, got {t}"
        )));
    }
    let last = &a.rows[t - 1];
    let total: f64 = (0..t - 1).map(|j| a.rows[j][j] - last[j]).sum();
    Ok(total / (t - 1) as f64)
}

/// Mean and sample standard deviation (`n - 1` divisor; 0 for one value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    let n = values.len();
    if n == 0 {
        return Err(Error::contract("summary of no values"));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(Summary { mean, std, n })
}

/// Metrics of one seeded run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub matrix: AccuracyMatrix,
    pub average_accuracy: f64,
    /// Absent for single-task runs.
    pub average_forgetting: Option<f64>,
}

impl RunResult {
    pub fn new(seed: u64, matrix: AccuracyMatrix) -> Result<Self> {
        let average_accuracy = average_accuracy(&matrix)?;
        let average_forgetting = if matrix.num_tasks() >= 2 {
            Some(average_forgetting(&matrix)?)
        } else {
            None
        };
        Ok(RunResult {
            seed,
            matrix,
            average_accuracy,
            average_forgetting,
        })
    }
}

/// Aggregate over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub runs: Vec<RunResult>,
    pub average_accuracy: Summary,
    pub average_forgetting: Option<Summary>,
}

impl ExperimentSummary {
    pub fn new(runs: Vec<RunResult>) -> Result<Self> {
        let acc: Vec<f64> = runs.iter().map(|r| r.average_accuracy).collect();
        let fgt: Option<Vec<f64>> = runs.iter().map(|r| r.average_forgetting).collect();
        Ok(ExperimentSummary {
            average_accuracy: summarize(&acc)?,
            average_forgetting: fgt.map(|f| summarize(&f)).transpose()?,
            runs,
        })
    }

    /// One row per seed plus `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("seed,average_accuracy,average_forgetting\n");
        for r in &self.runs {
            out += &format!("{},{:.6},{}\n", r.seed, r.average_accuracy, opt(r.average_forgetting));
        }
        let f = self.average_forgetting;
        out += &format!("mean,{:.6},{}\n", self.average_accuracy.mean, opt(f.map(|s| s.mean)));
        out += &format!("std,{:.6},{}\n", self.average_accuracy.std, opt(f.map(|s| s.std)));
        out
    }
}
