//! The LAE protocol: per-task training with a linear-probe freeze phase and
//! masked local cross-entropy, EMA accumulation into an offline PET, and
//! two-expert ensemble inference.

mod state;

pub use state::LaeState;

use serde::{Deserialize, Serialize};

use crate::bench::Task;
use crate::error::{Error, Result};
use crate::model::{adam_apply, argmax, encode, features_chunked, ClassifierHead};
use crate::numerics::{rng, softmax_slice, Adam, AdamConfig, Graph, Tensor, Var};
use crate::pet::PetSet;

pub(crate) const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Leading epochs of every task after the first during which the online
    /// PET is frozen and only φ_new learns.
    pub freeze_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub ema_alpha: f64,
    /// Apply the EMA update after each optimizer step (tasks after the first).
    pub accumulate: bool,
    /// Seed for head growth and batch order.
    pub seed: u64,
    /// Record PET / head checksums on every step (slow; for tests).
    pub trace_checksums: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            freeze_epochs: 3,
            lr: 0.01,
            batch_size: 32,
            ema_alpha: 0.9999,
            accumulate: true,
            seed: 0,
            trace_checksums: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.freeze_epochs >= self.epochs {
            return fail("need 0 <= freeze_epochs < epochs");
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha < 1.0) {
            return fail("ema_alpha must lie strictly between 0 and 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return fail("lr and batch_size must be positive");
        }
        Ok(())
    }
}

/// Cross-entropy restricted to the current task's classes `lo..hi`: every
/// other logit is filled with a huge negative value, so its probability and
/// gradient are exactly zero.
pub fn masked_local_ce(g: &mut Graph, logits: Var, targets: &[usize], classes: (usize, usize)) -> Result<Var> {
    let (lo, hi) = classes;
    if let Some(&label) = targets.iter().find(|&&t| t < lo || t >= hi) {
        return Err(Error::LabelOutOfRange { label, lo, hi });
    }
    let masked = g.mask_columns(logits, lo, hi)?;
    Ok(g.cross_entropy(masked, targets)?)
}

/// Value and logit gradient of [`masked_local_ce`] on concrete logits.
pub fn masked_local_ce_value(logits: &Tensor, targets: &[usize], classes: (usize, usize)) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let v = g.param(logits)?;
    let loss = masked_local_ce(&mut g, v, targets, classes)?;
    g.backward(loss)?;
    let grad = Tensor::new(logits.shape(), g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; logits.numel()]))?;
    Ok((g.value(loss)[0], grad))
}

/// `offline ← α·offline + (1 − α)·online`, elementwise over every tensor.
pub fn ema_update(offline: &mut PetSet, online: &PetSet, alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("EMA alpha {alpha} outside (0, 1)")));
    }
    if offline.layout() != online.layout() {
        return Err(Error::Layout("offline and online PET sets differ in layout".into()));
    }
    for (off, on) in offline.tensors_mut().into_iter().zip(online.tensors()) {
        for (o, &n) in off.data_mut().iter_mut().zip(on.data()) {
            *o = alpha * *o + (1.0 - alpha) * n;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    /// Online PET frozen on this step (linear-probe phase).
    pub pet_frozen: bool,
    pub loss: f64,
    /// Largest |∂L/∂logit| over old-class columns.
    pub max_old_logit_grad: f64,
    /// Largest |∂L/∂φ_old| over old head columns and biases.
    pub max_old_head_grad: f64,
    pub pet_checksum: Option<String>,
    pub head_new_checksum: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskTrace {
    pub task: usize,
    pub steps: Vec<StepRecord>,
    pub epoch_losses: Vec<f64>,
}

fn check_task(task: &Task, expected: usize, head: &ClassifierHead) -> Result<()> {
    if task.index != expected {
        return Err(Error::OutOfOrder { expected, got: task.index });
    }
    let (lo, hi) = task.classes;
    if lo != head.num_classes() || hi <= lo {
        return Err(Error::Config(format!("task classes {lo}..{hi} do not continue a head with {} classes", head.num_classes())));
    }
    if let Some(&label) = task.train_y.iter().find(|&&y| y < lo || y >= hi) {
        return Err(Error::LabelOutOfRange { label, lo, hi });
    }
    Ok(())
}

fn max_abs(xs: impl Iterator<Item = f64>) -> f64 {
    xs.fold(0.0, |m, x| m.max(x.abs()))
}

fn head_new_checksum(head: &ClassifierHead) -> String {
    let (w, b) = head.new_columns();
    let w = Tensor::new(&[w.len()], w).expect("flat");
    let b = Tensor::new(&[b.len()], b).expect("flat");
    crate::checkpoint::checksum([&w, &b])
}

/// Learns task `task` on top of `state`: grows the head, optionally freezes
/// the online PET for the first `freeze_epochs` epochs (not on the first
/// task), trains with masked local CE, and applies EMA after every optimizer
/// step once an offline PET exists. After the first task the offline PET is
/// cloned from the online one.
pub fn train_task(state: &mut LaeState, task: &Task, cfg: &TrainConfig) -> Result<TaskTrace> {
    cfg.validate()?;
    check_task(task, state.task_index, &state.head)?;
    let (lo, hi) = task.classes;
    let mut r = rng::derive(cfg.seed, 0x7a5c_0000 + task.index as u64);
    state.head.grow(hi - lo, &mut r)?;

    let n_pet = state.pet_online.tensors().len();
    let d = state.head.dim();
    let mut sizes: Vec<usize> = state.pet_online.tensors().iter().map(|t| t.numel()).collect();
    sizes.extend([d * (hi - lo), hi - lo]);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &sizes);

    let freeze_epochs = if task.index == 0 { 0 } else { cfg.freeze_epochs };
    let n = task.train_y.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cached: Option<Tensor> = None;
    let mut trace = TaskTrace { task: task.index, ..Default::default() };

    for epoch in 0..cfg.epochs {
        rng::shuffle(&mut r, &mut order);
        let frozen = epoch < freeze_epochs;
        if frozen && cached.is_none() {
            cached = Some(features_chunked(&state.backbone, Some(&state.pet_online), &task.train_x, EVAL_CHUNK)?);
        }
        let (mut total, mut batches) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let y: Vec<usize> = idx.iter().map(|&i| task.train_y[i]).collect();
            let mut g = Graph::new();
            let (features, pet_vars) = if frozen {
                let f = cached.as_ref().expect("filled above").select_rows(idx)?;
                (g.constant(&f)?, None)
            } else {
                let bb = state.backbone.bind(&mut g, false)?;
                let bp = state.pet_online.bind(&mut g, true)?;
                let x = g.constant(&task.train_x.select_rows(idx)?)?;
                (encode(&mut g, &bb, Some(&bp), x)?, Some(bp.vars().to_vec()))
            };
            let bh = state.head.bind(&mut g)?;
            let logits = bh.forward(&mut g, features)?;
            let loss = masked_local_ce(&mut g, logits, &y, (lo, hi))?;
            g.backward(loss)?;

            let c = state.head.num_classes();
            let lg = g.grad(logits).unwrap_or(&[]);
            let max_old_logit_grad = max_abs(lg.chunks(c).flat_map(|row| row[..lo].iter().copied()));
            let wg = g.grad(bh.weight).unwrap_or(&[]);
            let bg = g.grad(bh.bias).unwrap_or(&[]);
            let max_old_head_grad = max_abs(
                wg.chunks(c).flat_map(|row| row[..lo].iter().copied()).chain(bg.iter().take(lo).copied()),
            );

            if let Some(vars) = pet_vars {
                adam_apply(&mut adam, &g, vars.into_iter().zip(state.pet_online.tensors_mut()))?;
            }
            let gather = |grad: &[f64], cols: usize| -> Vec<f64> {
                if grad.is_empty() {
                    return vec![0.0; d * (hi - lo)];
                }
                grad.chunks(cols).flat_map(|row| row[lo..].iter().copied()).collect()
            };
            let (mut w, mut b) = state.head.new_columns();
            let gw = gather(wg, c);
            let gb: Vec<f64> = if bg.is_empty() { vec![0.0; hi - lo] } else { bg[lo..].to_vec() };
            adam.step(n_pet, &mut w, &gw)?;
            adam.step(n_pet + 1, &mut b, &gb)?;
            state.head.set_new_columns(&w, &b);

            if cfg.accumulate {
                if let Some(off) = state.pet_offline.as_mut() {
                    ema_update(off, &state.pet_online, cfg.ema_alpha)?;
                }
            }

            let l = g.value(loss)[0];
            total += l;
            batches += 1;
            trace.steps.push(StepRecord {
                epoch,
                pet_frozen: frozen,
                loss: l,
                max_old_logit_grad,
                max_old_head_grad,
                pet_checksum: cfg.trace_checksums.then(|| state.pet_online.checksum()),
                head_new_checksum: cfg.trace_checksums.then(|| head_new_checksum(&state.head)),
            });
        }
        trace.epoch_losses.push(total / batches.max(1) as f64);
    }

    if task.index == 0 {
        state.pet_offline = Some(state.pet_online.clone());
    }
    state.task_index += 1;
    Ok(trace)
}

/// Logits `[n, classes]` of the online expert and, once it exists, the offline one.
pub fn expert_logits(state: &LaeState, x: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
    if state.task_index == 0 {
        return Err(Error::Config("no task has been learned yet".into()));
    }
    let logits = |pets: &PetSet| -> Result<Tensor> {
        let f = features_chunked(&state.backbone, Some(pets), x, EVAL_CHUNK)?;
        crate::model::head_forward(&state.head, &f)
    };
    let on = logits(&state.pet_online)?;
    let off = state.pet_offline.as_ref().map(logits).transpose()?;
    Ok((on, off))
}

fn row_softmax(logits: &Tensor) -> Tensor {
    let c = logits.shape()[1];
    let data = logits.data().chunks(c).flat_map(softmax_slice).collect();
    Tensor::new(logits.shape(), data).expect("same shape")
}

/// Class maximising `max(p_on, p_off)`; ties go to the lowest index.
pub fn ensemble_argmax(p_on: &[f64], p_off: &[f64]) -> usize {
    let merged: Vec<f64> = p_on.iter().zip(p_off).map(|(a, b)| a.max(*b)).collect();
    argmax(&merged)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    pub labels: Vec<usize>,
    pub online_probs: Tensor,
    /// Absent while only the first task has been seen by the online expert alone.
    pub offline_probs: Option<Tensor>,
}

/// Predictions from the softmax-max rule over both experts logits.
pub fn ensemble_from_logits(on: &Tensor, off: Option<&Tensor>) -> EnsemblePrediction {
    let p_on = row_softmax(on);
    let p_off = off.map(row_softmax);
    let c = on.shape()[1];
    let n = on.shape()[0];
    let labels = (0..n)
        .map(|i| {
            let a = &p_on.data()[i * c..(i + 1) * c];
            match &p_off {
                Some(p) => ensemble_argmax(a, &p.data()[i * c..(i + 1) * c]),
                None => argmax(a),
            }
        })
        .collect();
    EnsemblePrediction { labels, online_probs: p_on, offline_probs: p_off }
}

/// Ensemble prediction; with no offline PET yet this is the online expert alone.
pub fn ensemble_predict(state: &LaeState, x: &Tensor) -> Result<EnsemblePrediction> {
    let (on, off) = expert_logits(state, x)?;
    Ok(ensemble_from_logits(&on, off.as_ref()))
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits.data().chunks(c).map(argmax).collect()
}

pub fn predict_online(state: &LaeState, x: &Tensor) -> Result<Vec<usize>> {
    if state.task_index == 0 {
        return Err(Error::Config("no task has been learned yet".into()));
    }
    let f = features_chunked(&state.backbone, Some(&state.pet_online), x, EVAL_CHUNK)?;
    Ok(argmax_rows(&crate::model::head_forward(&state.head, &f)?))
}

pub fn predict_offline(state: &LaeState, x: &Tensor) -> Result<Vec<usize>> {
    let off = state.pet_offline.as_ref().ok_or_else(|| Error::Config("no offline PET before the first task ends".into()))?;
    let f = features_chunked(&state.backbone, Some(off), x, EVAL_CHUNK)?;
    Ok(argmax_rows(&crate::model::head_forward(&state.head, &f)?))
}
