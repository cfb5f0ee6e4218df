use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Bundle};
use crate::error::{Error, Result};
use crate::numerics::rng::{self, Rng};
use crate::numerics::{Graph, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Patch tokens per sample; a class token is prepended on top.
    pub patch_tokens: usize,
    /// Width of each raw input token before the patch projector.
    pub token_dim: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { depth: 4, dim: 32, heads: 4, mlp_ratio: 4, patch_tokens: 16, token_dim: 8, seed: 0 }
    }
}

impl BackboneConfig {
    /// Sequence length seen by the blocks (patches plus class token).
    pub fn input_tokens(&self) -> usize {
        self.patch_tokens + 1
    }

    pub fn mlp_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return fail("backbone depth must be at least 1".into());
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("model dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.mlp_ratio == 0 || self.patch_tokens == 0 || self.token_dim == 0 {
            return fail("mlp_ratio, patch_tokens and token_dim must be positive".into());
        }
        Ok(())
    }

    /// Closed-form parameter count of [`build_backbone`].
    pub fn param_count(&self) -> usize {
        let (d, m, t) = (self.dim, self.mlp_dim(), self.input_tokens());
        let embed = self.token_dim * d + d + d + t * d;
        let block = 2 * d + 4 * (d * d + d) + 2 * d + (d * m + m) + (m * d + d);
        embed + self.depth * block + 2 * d
    }
}

pub(crate) const BLOCK_NAMES: [&str; 16] = [
    "ln1.g", "ln1.b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2.g", "ln2.b", "fc1.w", "fc1.b", "fc2.w",
    "fc2.b",
];

/// One pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

impl Block {
    fn init(d: usize, m: usize, rng: &mut Rng) -> Self {
        let mut w = |r: usize, c: usize| Tensor::from_fn(&[r, c], |_| rng::trunc_normal(rng, INIT_STD));
        let (wq, wk, wv, wo, fc1_w, fc2_w) = (w(d, d), w(d, d), w(d, d), w(d, d), w(d, m), w(m, d));
        Self {
            ln1_g: Tensor::full(&[d], 1.0),
            ln1_b: Tensor::zeros(&[d]),
            wq,
            bq: Tensor::zeros(&[d]),
            wk,
            bk: Tensor::zeros(&[d]),
            wv,
            bv: Tensor::zeros(&[d]),
            wo,
            bo: Tensor::zeros(&[d]),
            ln2_g: Tensor::full(&[d], 1.0),
            ln2_b: Tensor::zeros(&[d]),
            fc1_w,
            fc1_b: Tensor::zeros(&[m]),
            fc2_w,
            fc2_b: Tensor::zeros(&[d]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
            &self.ln2_g, &self.ln2_b, &self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }
}

/// The frozen feature extractor: patch projector, class token, positional
/// embedding, pre-norm blocks and a final layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    cfg: BackboneConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub norm_g: Tensor,
    pub norm_b: Tensor,
    frozen: bool,
}

/// Deterministic seeded initialisation: truncated-normal weights, zero biases,
/// unit layer-norm gains.
pub fn build_backbone(cfg: &BackboneConfig) -> Result<Backbone> {
    cfg.validate()?;
    let mut r = rng::derive(cfg.seed, 0xbacb);
    let (d, t) = (cfg.dim, cfg.input_tokens());
    let patch_w = Tensor::from_fn(&[cfg.token_dim, d], |_| rng::trunc_normal(&mut r, INIT_STD));
    let cls_token = Tensor::from_fn(&[1, d], |_| rng::trunc_normal(&mut r, INIT_STD));
    let pos_embed = Tensor::from_fn(&[t, d], |_| rng::trunc_normal(&mut r, INIT_STD));
    let blocks = (0..cfg.depth).map(|_| Block::init(d, cfg.mlp_dim(), &mut r)).collect();
    Ok(Backbone {
        cfg: cfg.clone(),
        patch_w,
        patch_b: Tensor::zeros(&[d]),
        cls_token,
        pos_embed,
        blocks,
        norm_g: Tensor::full(&[d], 1.0),
        norm_b: Tensor::zeros(&[d]),
        frozen: false,
    })
}

impl Backbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks every parameter as non-trainable. There is no way back: a frozen
    /// backbone is only ever bound into graphs as constants.
    pub fn freeze(&mut self) {
        self.frozen = true;
        for t in self.params_mut() {
            t.set_requires_grad(false);
            t.clear_grad();
        }
    }

    /// An unfrozen copy with every parameter trainable, for full fine-tuning.
    pub fn trainable_copy(&self) -> Backbone {
        let mut out = self.clone();
        out.frozen = false;
        for t in out.params_mut() {
            t.set_requires_grad(true);
            t.clear_grad();
        }
        out
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch.w".to_string(), &self.patch_w),
            ("patch.b".to_string(), &self.patch_b),
            ("cls".to_string(), &self.cls_token),
            ("pos".to_string(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(BLOCK_NAMES.iter().zip(b.tensors()).map(|(n, t)| (format!("block{i}.{n}"), t)));
        }
        out.push(("norm.g".to_string(), &self.norm_g));
        out.push(("norm.b".to_string(), &self.norm_b));
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.patch_w, &mut self.patch_b, &mut self.cls_token, &mut self.pos_embed];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.norm_g);
        out.push(&mut self.norm_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn checksum(&self) -> String {
        checkpoint::checksum(self.params())
    }

    /// Records every parameter in `g`; they receive gradients only when
    /// `trainable` is set, which is refused for a frozen backbone.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundBackbone> {
        if trainable && self.frozen {
            return Err(Error::Config("a frozen backbone cannot be bound as trainable".into()));
        }
        let mut leaf = |t: &Tensor| if trainable { g.param(t) } else { g.constant(t) };
        let patch_w = leaf(&self.patch_w)?;
        let patch_b = leaf(&self.patch_b)?;
        let cls = leaf(&self.cls_token)?;
        let pos = leaf(&self.pos_embed)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let v = b.tensors().map(&mut leaf);
            let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b] = v;
            blocks.push(BoundBlock {
                ln1_g: ln1_g?,
                ln1_b: ln1_b?,
                wq: wq?,
                bq: bq?,
                wk: wk?,
                bk: bk?,
                wv: wv?,
                bv: bv?,
                wo: wo?,
                bo: bo?,
                ln2_g: ln2_g?,
                ln2_b: ln2_b?,
                fc1_w: fc1_w?,
                fc1_b: fc1_b?,
                fc2_w: fc2_w?,
                fc2_b: fc2_b?,
            });
        }
        let norm_g = leaf(&self.norm_g)?;
        let norm_b = leaf(&self.norm_b)?;
        Ok(BoundBackbone { patch_w, patch_b, cls, pos, blocks, norm_g, norm_b, heads: self.cfg.heads })
    }

    pub fn to_bundle(&self) -> Bundle {
        let meta = serde_json::json!({ "config": self.cfg, "frozen": self.frozen });
        let mut b = Bundle::new("backbone", meta);
        for (n, t) in self.named_params() {
            b.push(n, t);
        }
        b
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        b.expect_kind("backbone")?;
        let cfg: BackboneConfig = serde_json::from_value(b.meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("backbone config: {e}")))?;
        let frozen = b.meta["frozen"].as_bool().unwrap_or(false);
        let mut bb = build_backbone(&cfg)?;
        let names: Vec<String> = bb.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(bb.params_mut()) {
            let t = b.get(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t.clone();
        }
        if frozen {
            bb.freeze();
        }
        Ok(bb)
    }
}

/// Graph handles of one block's parameters.
#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

impl BoundBlock {
    fn vars(&self) -> [Var; 16] {
        [
            self.ln1_g, self.ln1_b, self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo,
            self.ln2_g, self.ln2_b, self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b,
        ]
    }
}

/// Graph handles of a whole backbone, in [`Backbone::params`] order via [`BoundBackbone::vars`].
#[derive(Clone, Debug)]
pub struct BoundBackbone {
    pub patch_w: Var,
    pub patch_b: Var,
    pub cls: Var,
    pub pos: Var,
    pub blocks: Vec<BoundBlock>,
    pub norm_g: Var,
    pub norm_b: Var,
    pub heads: usize,
}

impl BoundBackbone {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.patch_w, self.patch_b, self.cls, self.pos];
        for b in &self.blocks {
            out.extend(b.vars());
        }
        out.push(self.norm_g);
        out.push(self.norm_b);
        out
    }
}
