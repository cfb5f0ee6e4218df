use serde::{Deserialize, Serialize};

use super::metrics::{forgetting, IncrementalAccuracy, MetricsVariant};
use crate::bench::Ablation;
use crate::continual::TrainConfig;
use crate::error::{Error, Result};
use crate::pet::PetConfig;

pub const REPORT_SCHEMA: &str = "lae-metrics/1";
pub const FORGETTING_DEFINITION: &str = "mean over earlier tasks j of (max over i>=j of acc[i][j]) - acc[N][j]";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
    pub class_order: u64,
}

/// Accuracy trajectory of one predictor over a task stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    /// `A_i` over pooled test samples, i = 1..N.
    pub pooled: Vec<f64>,
    /// `A_i` as the unweighted mean of per-task accuracies.
    pub task_mean: Vec<f64>,
    pub average_pooled: f64,
    pub average_task_mean: f64,
    pub last_pooled: f64,
    pub last_task_mean: f64,
    pub forgetting: f64,
    /// `acc_matrix[i][j]`: accuracy on task j after learning task i (j <= i).
    pub acc_matrix: Vec<Vec<f64>>,
}

impl Curve {
    pub fn from_rows(rows: &[IncrementalAccuracy]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::IncompleteMatrix("no tasks evaluated".into()));
        }
        let pooled: Vec<f64> = rows.iter().map(|r| r.pooled).collect();
        let task_mean: Vec<f64> = rows.iter().map(|r| r.task_mean).collect();
        let acc_matrix: Vec<Vec<f64>> = rows.iter().map(|r| r.per_task.clone()).collect();
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok(Self {
            average_pooled: avg(&pooled),
            average_task_mean: avg(&task_mean),
            last_pooled: *pooled.last().unwrap(),
            last_task_mean: *task_mean.last().unwrap(),
            forgetting: forgetting(&acc_matrix)?,
            pooled,
            task_mean,
            acc_matrix,
        })
    }

    pub fn last(&self, v: MetricsVariant) -> f64 {
        match v {
            MetricsVariant::Pooled => self.last_pooled,
            MetricsVariant::TaskMean => self.last_task_mean,
        }
    }

    pub fn average(&self, v: MetricsVariant) -> f64 {
        match v {
            MetricsVariant::Pooled => self.average_pooled,
            MetricsVariant::TaskMean => self.average_task_mean,
        }
    }
}

/// Curves of each expert taken alone and of their ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertCurves {
    pub online: Curve,
    pub offline: Curve,
    pub ensemble: Curve,
}

/// Split description plus a fingerprint of the data it was cut from; two
/// reports are comparable only when these agree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub num_classes: usize,
    pub class_order: Vec<usize>,
    pub dataset_fingerprint: String,
}

impl SplitSummary {
    pub fn compatible_with(&self, other: &SplitSummary) -> bool {
        self.num_tasks == other.num_tasks
            && self.classes_per_task == other.classes_per_task
            && self.num_classes == other.num_classes
            && self.dataset_fingerprint == other.dataset_fingerprint
    }
}

/// One run's canonical result document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    /// `lae`, `naive` or `seqft`.
    pub method: String,
    pub seeds: Seeds,
    pub split: SplitSummary,
    pub pet: Option<PetConfig>,
    pub ablation: Option<Ablation>,
    pub train: TrainConfig,
    /// Variant used for headline numbers; both variants are always present.
    pub primary_variant: MetricsVariant,
    pub forgetting_definition: String,
    /// The predictor the configuration asks for (ensemble or online expert).
    pub metrics: Curve,
    pub experts: Option<ExpertCurves>,
    /// Backbone checksum before the first task and after every task.
    pub backbone_checksums: Vec<String>,
}

impl MetricsReport {
    pub fn last_accuracy(&self) -> f64 {
        self.metrics.last(self.primary_variant)
    }

    pub fn average_accuracy(&self) -> f64 {
        self.metrics.average(self.primary_variant)
    }

    /// Canonical JSON; identical runs produce identical bytes.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report is plain data");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("report: {e}")))?;
        if r.schema != REPORT_SCHEMA {
            return Err(Error::Config(format!("unsupported report schema `{}`", r.schema)));
        }
        Ok(r)
    }

    /// `task,accuracy,variant` rows of the headline curve, both variants.
    pub fn curve_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["task", "accuracy", "variant"]).expect("in-memory write");
        for v in [MetricsVariant::Pooled, MetricsVariant::TaskMean] {
            let vals = match v {
                MetricsVariant::Pooled => &self.metrics.pooled,
                MetricsVariant::TaskMean => &self.metrics.task_mean,
            };
            for (i, a) in vals.iter().enumerate() {
                w.write_record([(i + 1).to_string(), a.to_string(), v.name().to_string()]).expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    /// `after_task,on_task,accuracy` rows of the accuracy matrix.
    pub fn acc_matrix_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["after_task", "on_task", "accuracy"]).expect("in-memory write");
        for (i, row) in self.metrics.acc_matrix.iter().enumerate() {
            for (j, a) in row.iter().enumerate() {
                w.write_record([(i + 1).to_string(), (j + 1).to_string(), a.to_string()]).expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}
