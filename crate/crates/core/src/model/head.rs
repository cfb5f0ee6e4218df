use serde::{Deserialize, Serialize};

use crate::checkpoint::Bundle;
use crate::error::{Error, Result};
use crate::numerics::rng::{self, Rng};
use crate::numerics::{Graph, Tensor, Var};

const NEW_COLUMN_STD: f64 = 0.01;

/// Linear classifier `features · W + b` over every class seen so far.
///
/// Columns left of `boundary` belong to earlier tasks (φ_old) and are never
/// updated; the rest (φ_new) belong to the task being learned.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    dim: usize,
    pub weight: Tensor,
    pub bias: Tensor,
    boundary: usize,
    task_ranges: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct HeadMeta {
    dim: usize,
    boundary: usize,
    task_ranges: Vec<(usize, usize)>,
}

impl ClassifierHead {
    /// A head with no classes yet.
    pub fn new(dim: usize) -> Self {
        Self { dim, weight: Tensor::zeros(&[dim, 0]), bias: Tensor::zeros(&[0]), boundary: 0, task_ranges: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.bias.numel()
    }

    pub fn boundary(&self) -> usize {
        self.boundary
    }

    /// Half-open class ranges, one per grown task.
    pub fn task_ranges(&self) -> &[(usize, usize)] {
        &self.task_ranges
    }

    /// Appends `new_classes` columns drawn from normal(0, 0.01) with zero bias
    /// and moves the boundary past every existing column.
    pub fn grow(&mut self, new_classes: usize, rng: &mut Rng) -> Result<()> {
        if new_classes == 0 {
            return Err(Error::Config("a head must grow by at least one class".into()));
        }
        let (d, old) = (self.dim, self.num_classes());
        let c = old + new_classes;
        let mut w = Vec::with_capacity(d * c);
        for row in 0..d {
            w.extend_from_slice(&self.weight.data()[row * old..(row + 1) * old]);
            w.extend((0..new_classes).map(|_| rng::normal(rng, NEW_COLUMN_STD)));
        }
        let mut b = self.bias.data().to_vec();
        b.resize(c, 0.0);
        self.weight = Tensor::new(&[d, c], w)?;
        self.bias = Tensor::new(&[c], b)?;
        self.boundary = old;
        self.task_ranges.push((old, c));
        Ok(())
    }

    /// Gathers φ_new (columns at or right of the boundary) as `(weight, bias)`
    /// flat vectors.
    pub fn new_columns(&self) -> (Vec<f64>, Vec<f64>) {
        let (c, lo) = (self.num_classes(), self.boundary);
        let w = (0..self.dim).flat_map(|r| self.weight.data()[r * c + lo..(r + 1) * c].iter().copied()).collect();
        (w, self.bias.data()[lo..].to_vec())
    }

    pub fn set_new_columns(&mut self, w: &[f64], b: &[f64]) {
        let (c, lo) = (self.num_classes(), self.boundary);
        let n = c - lo;
        for r in 0..self.dim {
            self.weight.data_mut()[r * c + lo..(r + 1) * c].copy_from_slice(&w[r * n..(r + 1) * n]);
        }
        self.bias.data_mut()[lo..].copy_from_slice(b);
    }

    /// φ_old as flat `(weight, bias)`.
    pub fn old_columns(&self) -> (Vec<f64>, Vec<f64>) {
        let (c, lo) = (self.num_classes(), self.boundary);
        let w = (0..self.dim).flat_map(|r| self.weight.data()[r * c..r * c + lo].iter().copied()).collect();
        (w, self.bias.data()[..lo].to_vec())
    }

    /// Records the head in `g`; both tensors are gradient-requiring so the
    /// (provably zero) φ_old gradient can be inspected. Updates are applied to
    /// φ_new only.
    pub fn bind(&self, g: &mut Graph) -> Result<BoundHead> {
        Ok(BoundHead { weight: g.param(&self.weight)?, bias: g.param(&self.bias)? })
    }

    pub fn to_bundle(&self) -> Bundle {
        let meta = HeadMeta { dim: self.dim, boundary: self.boundary, task_ranges: self.task_ranges.clone() };
        let mut b = Bundle::new("head", serde_json::to_value(meta).expect("plain data"));
        b.push("weight", &self.weight);
        b.push("bias", &self.bias);
        b
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        b.expect_kind("head")?;
        let meta: HeadMeta =
            serde_json::from_value(b.meta.clone()).map_err(|e| Error::Checkpoint(format!("head meta: {e}")))?;
        let (weight, bias) = (b.get("weight")?.clone(), b.get("bias")?.clone());
        let c = bias.numel();
        if weight.shape() != [meta.dim, c] || meta.boundary > c {
            return Err(Error::Checkpoint("head tensors disagree with their metadata".into()));
        }
        Ok(Self { dim: meta.dim, weight, bias, boundary: meta.boundary, task_ranges: meta.task_ranges })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    pub weight: Var,
    pub bias: Var,
}

impl BoundHead {
    pub fn forward(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let z = g.matmul(features, self.weight)?;
        Ok(g.add(z, self.bias)?)
    }
}

/// Logits `[batch, classes]` for `[batch, dim]` features.
pub fn head_forward(head: &ClassifierHead, features: &Tensor) -> Result<Tensor> {
    if features.rank() != 2 || features.shape()[1] != head.dim {
        return Err(Error::Dimension(format!("features {:?} vs head dim {}", features.shape(), head.dim)));
    }
    let mut g = Graph::new();
    let (w, b, f) = (g.constant(&head.weight)?, g.constant(&head.bias)?, g.constant(features)?);
    let z = g.matmul(f, w)?;
    let out = g.add(z, b)?;
    Ok(g.tensor(out))
}
