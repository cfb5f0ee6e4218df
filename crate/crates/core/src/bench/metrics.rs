use serde::{Deserialize, Serialize};

use crate::bench::TaskStream;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Which incremental-accuracy definition a number follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricsVariant {
    /// Accuracy over the pooled test samples of every task seen so far.
    Pooled,
    /// Unweighted mean of the per-task accuracies.
    TaskMean,
}

impl MetricsVariant {
    pub fn name(self) -> &'static str {
        match self {
            MetricsVariant::Pooled => "pooled",
            MetricsVariant::TaskMean => "task-mean",
        }
    }
}

/// `A_i` under both variants plus row `i` of the accuracy matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncrementalAccuracy {
    pub pooled: f64,
    pub task_mean: f64,
    pub per_task: Vec<f64>,
}

impl IncrementalAccuracy {
    pub fn get(&self, variant: MetricsVariant) -> f64 {
        match variant {
            MetricsVariant::Pooled => self.pooled,
            MetricsVariant::TaskMean => self.task_mean,
        }
    }
}

/// Combines `(correct, total)` counts of each seen task.
pub fn incremental_accuracy(counts: &[(usize, usize)]) -> IncrementalAccuracy {
    let per_task: Vec<f64> = counts.iter().map(|&(c, t)| if t == 0 { 0.0 } else { c as f64 / t as f64 }).collect();
    let (correct, total) = counts.iter().fold((0, 0), |(a, b), &(c, t)| (a + c, b + t));
    IncrementalAccuracy {
        pooled: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        task_mean: if per_task.is_empty() { 0.0 } else { per_task.iter().sum::<f64>() / per_task.len() as f64 },
        per_task,
    }
}

pub fn count_correct(pred: &[usize], truth: &[usize]) -> (usize, usize) {
    (pred.iter().zip(truth).filter(|(p, t)| p == t).count(), truth.len())
}

/// Evaluates `predict` on the test split of tasks `0..=upto`.
pub fn eval_incremental(
    mut predict: impl FnMut(&Tensor) -> Result<Vec<usize>>,
    stream: &TaskStream,
    upto: usize,
) -> Result<IncrementalAccuracy> {
    if upto >= stream.tasks.len() {
        return Err(Error::Split(format!("task {upto} is beyond the {}-task stream", stream.tasks.len())));
    }
    let mut counts = Vec::with_capacity(upto + 1);
    for task in &stream.tasks[..=upto] {
        counts.push(count_correct(&predict(&task.test_x)?, &task.test_y));
    }
    Ok(incremental_accuracy(&counts))
}

/// Average forgetting after the last task: the mean over earlier tasks `j`
/// of the best accuracy ever reached on `j` minus its final accuracy.
/// `acc[i][j]` is the accuracy on task `j` after learning task `i`.
pub fn forgetting(acc: &[Vec<f64>]) -> Result<f64> {
    for (i, row) in acc.iter().enumerate() {
        if row.len() < i + 1 {
            return Err(Error::IncompleteMatrix(format!("row {i} has {} entries, needs {}", row.len(), i + 1)));
        }
    }
    let n = acc.len();
    if n < 2 {
        return Ok(0.0);
    }
    let last = &acc[n - 1];
    let total: f64 = (0..n - 1)
        .map(|j| {
            let best = (j..n).map(|i| acc[i][j]).fold(f64::NEG_INFINITY, f64::max);
            best - last[j]
        })
        .sum();
    Ok(total / (n - 1) as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
