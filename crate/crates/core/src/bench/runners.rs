use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::metrics::{count_correct, incremental_accuracy, IncrementalAccuracy, MetricsVariant};
use super::report::{Curve, ExpertCurves, MetricsReport, Seeds, SplitSummary, FORGETTING_DEFINITION, REPORT_SCHEMA};
use super::TaskStream;
use crate::checkpoint::Bundle;
use crate::continual::{
    argmax_rows, ensemble_from_logits, expert_logits, masked_local_ce, train_task, LaeState, StepRecord, TaskTrace,
    TrainConfig, EVAL_CHUNK,
};
use crate::error::{Error, Result};
use crate::model::{adam_apply, encode, features_chunked, head_forward, Backbone, ClassifierHead};
use crate::numerics::{rng, Adam, AdamConfig, Graph};
use crate::pet::{PetConfig, PrefixVariant};

/// Independent switches for the three LAE ingredients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Learning with calibrated speed: the linear-probe freeze phase and, for
    /// prefixes, the calibrated forward.
    pub lea: bool,
    /// EMA accumulation into the offline PET.
    pub acc: bool,
    /// Two-expert ensemble at inference (otherwise the online expert alone).
    pub ens: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl Ablation {
    pub const FULL: Self = Self { lea: true, acc: true, ens: true };
    pub const NONE: Self = Self { lea: false, acc: false, ens: false };

    pub fn is_naive(&self) -> bool {
        *self == Self::NONE
    }

    /// The PET and training configuration this ablation actually runs.
    pub fn apply(&self, pet: &PetConfig, train: &TrainConfig) -> (PetConfig, TrainConfig) {
        let mut pet = pet.clone();
        let mut train = train.clone();
        if !self.lea {
            train.freeze_epochs = 0;
            pet.prefix = PrefixVariant::UNCALIBRATED;
        }
        train.accumulate = self.acc;
        (pet, train)
    }
}

/// What every runner shares: the frozen backbone and the run's seeds.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub backbone: Arc<Backbone>,
    pub seeds: Seeds,
    pub dataset_fingerprint: String,
}

impl RunContext {
    fn split_summary(&self, stream: &TaskStream) -> SplitSummary {
        SplitSummary {
            num_tasks: stream.spec.num_tasks,
            classes_per_task: stream.spec.classes_per_task,
            num_classes: stream.num_classes,
            class_order: stream.class_order.clone(),
            dataset_fingerprint: self.dataset_fingerprint.clone(),
        }
    }
}

/// LAE state plus the evaluation rows collected so far; saved at every task
/// boundary so an interrupted run can resume.
#[derive(Clone, Debug)]
pub struct Progress {
    pub state: LaeState,
    pub online: Vec<IncrementalAccuracy>,
    pub offline: Vec<IncrementalAccuracy>,
    pub ensemble: Vec<IncrementalAccuracy>,
    pub backbone_checksums: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ProgressMeta {
    online: Vec<IncrementalAccuracy>,
    offline: Vec<IncrementalAccuracy>,
    ensemble: Vec<IncrementalAccuracy>,
    backbone_checksums: Vec<String>,
}

impl Progress {
    pub fn to_bundle(&self) -> Bundle {
        let mut b = self.state.to_bundle();
        let meta = ProgressMeta {
            online: self.online.clone(),
            offline: self.offline.clone(),
            ensemble: self.ensemble.clone(),
            backbone_checksums: self.backbone_checksums.clone(),
        };
        b.meta["progress"] = serde_json::to_value(meta).expect("plain data");
        b
    }

    pub fn from_bundle(b: &Bundle, backbone: Arc<Backbone>) -> Result<Self> {
        let state = LaeState::from_bundle(b, backbone)?;
        let meta: ProgressMeta = serde_json::from_value(b.meta["progress"].clone())
            .map_err(|e| Error::Checkpoint(format!("progress: {e}")))?;
        if meta.online.len() != state.task_index {
            return Err(Error::Checkpoint("evaluation rows do not match the task cursor".into()));
        }
        Ok(Self {
            state,
            online: meta.online,
            offline: meta.offline,
            ensemble: meta.ensemble,
            backbone_checksums: meta.backbone_checksums,
        })
    }
}

pub struct LaeOutcome {
    pub report: MetricsReport,
    /// Traces of the tasks trained in this call.
    pub traces: Vec<TaskTrace>,
    pub state: LaeState,
}

fn evaluate_experts(state: &LaeState, stream: &TaskStream, upto: usize) -> Result<[IncrementalAccuracy; 3]> {
    let (mut on, mut off, mut ens) = (Vec::new(), Vec::new(), Vec::new());
    for task in &stream.tasks[..=upto] {
        let (lon, loff) = expert_logits(state, &task.test_x)?;
        let loff = loff.ok_or_else(|| Error::Config("offline PET missing after a learned task".into()))?;
        on.push(count_correct(&argmax_rows(&lon), &task.test_y));
        off.push(count_correct(&argmax_rows(&loff), &task.test_y));
        ens.push(count_correct(&ensemble_from_logits(&lon, Some(&loff)).labels, &task.test_y));
    }
    Ok([incremental_accuracy(&on), incremental_accuracy(&off), incremental_accuracy(&ens)])
}

/// Full LAE pipeline under `ablation`. With every switch off this is exactly
/// the naive PET baseline.
pub fn run_lae(
    stream: &TaskStream,
    ctx: &RunContext,
    pet: &PetConfig,
    train: &TrainConfig,
    ablation: Ablation,
) -> Result<LaeOutcome> {
    run_lae_resumable(stream, ctx, pet, train, ablation, None, &mut |_, _| Ok(()))
}

/// [`run_lae`] that can start from saved progress and hands every task
/// boundary, with that task's trace, to `on_task_end`.
pub fn run_lae_resumable(
    stream: &TaskStream,
    ctx: &RunContext,
    pet: &PetConfig,
    train: &TrainConfig,
    ablation: Ablation,
    resume: Option<Progress>,
    on_task_end: &mut dyn FnMut(&Progress, &TaskTrace) -> Result<()>,
) -> Result<LaeOutcome> {
    let (pet, mut train) = ablation.apply(pet, train);
    train.seed = ctx.seeds.model;
    train.validate()?;
    let mut progress = match resume {
        Some(p) => {
            if p.state.pet_online.config() != &pet {
                return Err(Error::Checkpoint("saved progress used a different PET configuration".into()));
            }
            if p.state.task_index > stream.tasks.len() {
                return Err(Error::Checkpoint("saved progress is past the end of the stream".into()));
            }
            p
        }
        None => Progress {
            state: LaeState::new(ctx.backbone.clone(), &pet, ctx.seeds.model)?,
            online: Vec::new(),
            offline: Vec::new(),
            ensemble: Vec::new(),
            backbone_checksums: vec![ctx.backbone.checksum()],
        },
    };
    let mut traces = Vec::new();
    while progress.state.task_index < stream.tasks.len() {
        let i = progress.state.task_index;
        let trace = train_task(&mut progress.state, &stream.tasks[i], &train)?;
        let [on, off, ens] = evaluate_experts(&progress.state, stream, i)?;
        progress.online.push(on);
        progress.offline.push(off);
        progress.ensemble.push(ens);
        progress.backbone_checksums.push(progress.state.backbone.checksum());
        on_task_end(&progress, &trace)?;
        traces.push(trace);
    }
    let experts = ExpertCurves {
        online: Curve::from_rows(&progress.online)?,
        offline: Curve::from_rows(&progress.offline)?,
        ensemble: Curve::from_rows(&progress.ensemble)?,
    };
    let metrics = if ablation.ens { experts.ensemble.clone() } else { experts.online.clone() };
    let report = MetricsReport {
        schema: REPORT_SCHEMA.to_string(),
        method: if ablation.is_naive() { "naive" } else { "lae" }.to_string(),
        seeds: ctx.seeds,
        split: ctx.split_summary(stream),
        pet: Some(pet),
        ablation: Some(ablation),
        train,
        primary_variant: MetricsVariant::Pooled,
        forgetting_definition: FORGETTING_DEFINITION.to_string(),
        metrics,
        experts: Some(experts),
        backbone_checksums: progress.backbone_checksums.clone(),
    };
    Ok(LaeOutcome { report, traces, state: progress.state })
}

/// LAE without calibration, accumulation or ensembling.
pub fn run_naive_pet_baseline(stream: &TaskStream, ctx: &RunContext, pet: &PetConfig, train: &TrainConfig) -> Result<LaeOutcome> {
    run_lae(stream, ctx, pet, train, Ablation::NONE)
}

pub struct SeqFtOutcome {
    pub report: MetricsReport,
    pub traces: Vec<TaskTrace>,
    pub backbone: Backbone,
    pub head: ClassifierHead,
}

/// Sequential fine-tuning of the whole backbone and head with local CE; no
/// PET, no freeze phase, no accumulation, no ensemble.
pub fn run_seqft_baseline(stream: &TaskStream, ctx: &RunContext, train: &TrainConfig) -> Result<SeqFtOutcome> {
    let mut train = train.clone();
    train.seed = ctx.seeds.model;
    train.freeze_epochs = 0;
    train.accumulate = false;
    train.validate()?;
    let mut backbone = ctx.backbone.trainable_copy();
    let mut head = ClassifierHead::new(backbone.config().dim);
    let mut rows = Vec::new();
    let mut checksums = vec![backbone.checksum()];
    let mut traces = Vec::new();
    for task in &stream.tasks {
        let (lo, hi) = task.classes;
        if lo != head.num_classes() {
            return Err(Error::Config("task stream does not continue the head".into()));
        }
        let mut r = rng::derive(train.seed, 0x7a5c_0000 + task.index as u64);
        head.grow(hi - lo, &mut r)?;
        let d = head.dim();
        let mut sizes: Vec<usize> = backbone.params().iter().map(|t| t.numel()).collect();
        let n_bb = sizes.len();
        sizes.extend([d * (hi - lo), hi - lo]);
        let mut adam = Adam::new(AdamConfig { lr: train.lr, ..AdamConfig::default() }, &sizes);
        let mut order: Vec<usize> = (0..task.train_y.len()).collect();
        let mut trace = TaskTrace { task: task.index, ..Default::default() };
        for epoch in 0..train.epochs {
            rng::shuffle(&mut r, &mut order);
            let (mut total, mut batches) = (0.0, 0usize);
            for idx in order.chunks(train.batch_size) {
                let y: Vec<usize> = idx.iter().map(|&i| task.train_y[i]).collect();
                let mut g = Graph::new();
                let bb = backbone.bind(&mut g, true)?;
                let bh = head.bind(&mut g)?;
                let x = g.constant(&task.train_x.select_rows(idx)?)?;
                let f = encode(&mut g, &bb, None, x)?;
                let logits = bh.forward(&mut g, f)?;
                let loss = masked_local_ce(&mut g, logits, &y, (lo, hi))?;
                g.backward(loss)?;
                adam_apply(&mut adam, &g, bb.vars().into_iter().zip(backbone.params_mut()))?;
                let c = head.num_classes();
                let (mut w, mut b) = head.new_columns();
                if let (Some(gw), Some(gb)) = (g.grad(bh.weight), g.grad(bh.bias)) {
                    let gw: Vec<f64> = gw.chunks(c).flat_map(|row| row[lo..].iter().copied()).collect();
                    adam.step(n_bb, &mut w, &gw)?;
                    adam.step(n_bb + 1, &mut b, &gb[lo..])?;
                    head.set_new_columns(&w, &b);
                }
                let l = g.value(loss)[0];
                total += l;
                batches += 1;
                trace.steps.push(StepRecord {
                    epoch,
                    pet_frozen: false,
                    loss: l,
                    max_old_logit_grad: 0.0,
                    max_old_head_grad: 0.0,
                    pet_checksum: None,
                    head_new_checksum: None,
                });
            }
            trace.epoch_losses.push(total / batches.max(1) as f64);
        }
        traces.push(trace);
        let mut counts = Vec::new();
        for t in &stream.tasks[..=task.index] {
            let f = features_chunked(&backbone, None, &t.test_x, EVAL_CHUNK)?;
            counts.push(count_correct(&argmax_rows(&head_forward(&head, &f)?), &t.test_y));
        }
        rows.push(incremental_accuracy(&counts));
        checksums.push(backbone.checksum());
    }
    let report = MetricsReport {
        schema: REPORT_SCHEMA.to_string(),
        method: "seqft".to_string(),
        seeds: ctx.seeds,
        split: ctx.split_summary(stream),
        pet: None,
        ablation: None,
        train,
        primary_variant: MetricsVariant::Pooled,
        forgetting_definition: FORGETTING_DEFINITION.to_string(),
        metrics: Curve::from_rows(&rows)?,
        experts: None,
        backbone_checksums: checksums,
    };
    Ok(SeqFtOutcome { report, traces, backbone, head })
}
