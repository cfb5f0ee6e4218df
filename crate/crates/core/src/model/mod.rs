//! The frozen transformer backbone, its PET attachment hooks and the growing
//! classifier head.

mod backbone;
mod head;

pub use backbone::{build_backbone, Backbone, BackboneConfig, Block, BoundBackbone, BoundBlock};
pub use head::{head_forward, BoundHead, ClassifierHead};

use serde::{Deserialize, Serialize};

use crate::bench::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{rng, Adam, AdamConfig, Graph, Tensor, Var};
use crate::pet::{lora_merge, BoundPetSet, PetModule, PetSet};

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

fn block_forward(g: &mut Graph, b: &BoundBlock, idx: usize, heads: usize, h: Var, pets: Option<&BoundPetSet>) -> Result<Var> {
    let a = g.layer_norm(h, b.ln1_g, b.ln1_b)?;
    let mut q = linear(g, a, b.wq, b.bq)?;
    let k = linear(g, a, b.wk, b.bk)?;
    let mut v = linear(g, a, b.wv, b.bv)?;
    if let Some(lora) = pets.and_then(|p| p.lora(idx)) {
        q = lora.query.apply(g, a, q)?;
        v = lora.value.apply(g, a, v)?;
    }
    let att = match pets.and_then(|p| p.prefix(idx)) {
        Some(prefix) => prefix.attend(g, q, k, v, heads)?,
        None => g.attention(q, k, v, heads)?,
    };
    let o = linear(g, att, b.wo, b.bo)?;
    let h = g.add(h, o)?;

    let m = g.layer_norm(h, b.ln2_g, b.ln2_b)?;
    let f = linear(g, m, b.fc1_w, b.fc1_b)?;
    let f = g.gelu(f)?;
    let mut f = linear(g, f, b.fc2_w, b.fc2_b)?;
    if let Some(adapter) = pets.and_then(|p| p.adapter(idx)) {
        f = adapter.apply(g, m, f)?;
    }
    Ok(g.add(h, f)?)
}

/// Class-token features `[batch, dim]` after the final norm, for inputs
/// `x: [batch, patch_tokens, token_dim]` already on the graph.
pub fn encode(g: &mut Graph, bb: &BoundBackbone, pets: Option<&BoundPetSet>, x: Var) -> Result<Var> {
    let batch = g.shape(x)[0];
    let e = linear(g, x, bb.patch_w, bb.patch_b)?;
    let cls = g.tile(bb.cls, batch)?;
    let h = g.concat(&[cls, e], 1)?;
    let mut h = g.add(h, bb.pos)?;
    for (i, b) in bb.blocks.iter().enumerate() {
        h = block_forward(g, b, i, bb.heads, h, pets)?;
    }
    let h = g.layer_norm(h, bb.norm_g, bb.norm_b)?;
    let dim = g.shape(h)[2];
    let cls = g.slice(h, 1, 0, 1)?;
    Ok(g.reshape(cls, &[batch, dim])?)
}

fn check_input(backbone: &Backbone, x: &Tensor) -> Result<()> {
    let c = backbone.config();
    if x.rank() != 3 || x.shape()[1] != c.patch_tokens || x.shape()[2] != c.token_dim {
        return Err(Error::Dimension(format!(
            "input {:?}, backbone expects [batch, {}, {}]",
            x.shape(),
            c.patch_tokens,
            c.token_dim
        )));
    }
    Ok(())
}

/// Features of a batch through θ_pre, optionally with `pets` attached.
/// Neither the backbone nor the PET set is modified.
pub fn forward_features(backbone: &Backbone, pets: Option<&PetSet>, batch: &Tensor) -> Result<Tensor> {
    check_input(backbone, batch)?;
    if let Some(p) = pets {
        p.check_compatible(backbone.config())?;
    }
    let mut g = Graph::new();
    let bb = backbone.bind(&mut g, false)?;
    let bp = pets.map(|p| p.bind(&mut g, false)).transpose()?;
    let x = g.constant(batch)?;
    let f = encode(&mut g, &bb, bp.as_ref(), x)?;
    Ok(g.tensor(f))
}

/// [`forward_features`] over a large set, `chunk` samples at a time.
pub fn features_chunked(backbone: &Backbone, pets: Option<&PetSet>, x: &Tensor, chunk: usize) -> Result<Tensor> {
    let n = x.shape().first().copied().unwrap_or(0);
    let mut parts = Vec::new();
    for start in (0..n).step_by(chunk.max(1)) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        parts.push(forward_features(backbone, pets, &x.select_rows(&idx)?)?);
    }
    if parts.is_empty() {
        return Ok(Tensor::zeros(&[0, backbone.config().dim]));
    }
    Ok(Tensor::stack_rows(&parts.iter().collect::<Vec<_>>())?)
}

/// Folds a LoRA set into copies of the query and value weights it adapts,
/// giving a plain backbone that computes the same features without PET.
pub fn merge_lora(backbone: &Backbone, pets: &PetSet) -> Result<Backbone> {
    pets.check_compatible(backbone.config())?;
    let mut merged = backbone.clone();
    for (point, module) in pets.modules() {
        let PetModule::Lora(lora) = module else {
            return Err(Error::Config(format!("only LoRA can be merged, got {}", pets.kind().name())));
        };
        let block = &mut merged.blocks[point.block];
        block.wq = lora_merge(&lora.query, &block.wq)?;
        block.wv = lora_merge(&lora.value, &block.wv)?;
    }
    Ok(merged)
}

/// Applies one Adam step to every `(slot, var, tensor)` using the gradients
/// from `g`; tensors the loss did not reach are left alone.
pub(crate) fn adam_apply<'a>(
    adam: &mut Adam,
    g: &Graph,
    items: impl IntoIterator<Item = (Var, &'a mut Tensor)>,
) -> Result<()> {
    for (slot, (v, t)) in items.into_iter().enumerate() {
        if let Some(grad) = g.grad(v) {
            adam.step(slot, t.data_mut(), grad)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 8, lr: 1e-3, batch_size: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub test_accuracy: f64,
    pub chance: f64,
}

/// Trains the backbone end to end on a pretext classification task with a
/// throw-away head, then freezes it for good.
pub fn pretrain_backbone(
    mut backbone: Backbone,
    pretext: &Dataset,
    cl_class_keys: &[u64],
    cfg: &PretrainConfig,
) -> Result<(Backbone, PretrainReport)> {
    if let Some(k) = pretext.class_keys.iter().find(|k| cl_class_keys.contains(k)) {
        return Err(Error::PretextOverlap(*k));
    }
    if backbone.is_frozen() {
        return Err(Error::Config("backbone is already frozen".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("pretraining batch size must be positive".into()));
    }
    check_input(&backbone, &pretext.train_x)?;
    let classes = pretext.num_classes;
    let seed = backbone.config().seed;
    let mut r = rng::derive(seed, 0x9e7e);
    let mut head = ClassifierHead::new(backbone.config().dim);
    head.grow(classes, &mut r)?;

    let sizes: Vec<usize> = backbone.params().iter().map(|t| t.numel()).chain([head.weight.numel(), head.bias.numel()]).collect();
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &sizes);
    let n = pretext.train_y.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        rng::shuffle(&mut r, &mut order);
        let (mut total, mut batches) = (0.0, 0);
        for idx in order.chunks(cfg.batch_size) {
            let x = pretext.train_x.select_rows(idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| pretext.train_y[i]).collect();
            let mut g = Graph::new();
            let bb = backbone.bind(&mut g, true)?;
            let bh = head.bind(&mut g)?;
            let vx = g.constant(&x)?;
            let f = encode(&mut g, &bb, None, vx)?;
            let logits = bh.forward(&mut g, f)?;
            let loss = g.cross_entropy(logits, &y)?;
            g.backward(loss)?;
            total += g.value(loss)[0];
            batches += 1;
            let vars = bb.vars().into_iter().chain([bh.weight, bh.bias]);
            let mut tensors = backbone.params_mut();
            tensors.push(&mut head.weight);
            tensors.push(&mut head.bias);
            adam_apply(&mut adam, &g, vars.zip(tensors))?;
        }
        epoch_losses.push(total / batches.max(1) as f64);
    }
    backbone.freeze();

    let feats = features_chunked(&backbone, None, &pretext.test_x, 256)?;
    let logits = head_forward(&head, &feats)?;
    let correct = (0..pretext.test_y.len()).filter(|&i| argmax(logits.row(i)) == pretext.test_y[i]).count();
    let report = PretrainReport {
        epoch_losses,
        test_accuracy: correct as f64 / pretext.test_y.len().max(1) as f64,
        chance: 1.0 / classes as f64,
    };
    Ok((backbone, report))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
