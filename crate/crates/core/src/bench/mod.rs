//! Class-incremental data plumbing, metrics, reports and the baseline runners.

mod data;
mod metrics;
mod report;
mod runners;

pub use data::{make_synthetic_dataset, split_tasks, Dataset, SplitSpec, SyntheticSpec, Task, TaskStream};
pub use metrics::{
    count_correct, eval_incremental, forgetting, incremental_accuracy, mean_std, IncrementalAccuracy, MetricsVariant,
};
pub use report::{
    Curve, ExpertCurves, MetricsReport, Seeds, SplitSummary, FORGETTING_DEFINITION, REPORT_SCHEMA,
};
pub use runners::{
    run_lae, run_lae_resumable, run_naive_pet_baseline, run_seqft_baseline, Ablation, LaeOutcome, Progress,
    RunContext, SeqFtOutcome,
};
