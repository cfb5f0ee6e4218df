//! Dynamic reverse-mode tape.
//!
//! Every op appends a node holding its output value and whatever it needs for
//! the backward sweep. Nodes only ever reference earlier nodes, so the tape is
//! topologically ordered by construction and `backward` is a single reverse
//! scan.

use super::kernels::{self, AttnDims, AttnGrads, MassGrads};
use super::tensor::numel;
use super::{NumericsError, Tensor};

/// Value assigned to filtered-out logits before softmax / cross-entropy.
pub const MASK_FILL: f64 = -1e30;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, shared_rhs: bool },
    /// `b`'s shape is a suffix of `a`'s; it is repeated over the leading dims.
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Affine { a: usize, mul: f64 },
    ScaleBy { a: usize, s: usize },
    Relu { a: usize },
    Gelu { a: usize },
    Softmax { a: usize, outer: usize, len: usize, inner: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64>, dim: usize },
    Attention { q: usize, k: usize, v: usize, dims: AttnDims, probs: Vec<f64> },
    PrefixMass { q: usize, pk: usize, kc: usize, dims: MassDims, wp: Vec<f64>, wc: Vec<f64> },
    HeadScale { x: usize, coef: usize, heads: usize },
    Concat { parts: Vec<(usize, usize)>, outer: usize },
    Tile { a: usize, times: usize },
    Slice { a: usize, outer: usize, axis_len: usize, inner: usize, start: usize, len: usize },
    Reshape { a: usize },
    MaskFill { a: usize, cols: usize, lo: usize, hi: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64>, classes: usize },
    Sum { a: usize },
    Mean { a: usize },
}

#[derive(Clone, Copy, Debug)]
struct MassDims {
    batch: usize,
    t: usize,
    l: usize,
    s: usize,
    d: usize,
    heads: usize,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Record of executed differentiable operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn dim_err(msg: impl Into<String>) -> NumericsError {
    NumericsError::Dimension(msg.into())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Result<Var, NumericsError> {
        debug_assert_eq!(numel(&shape), data.len());
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite(format!("{} at element {pos}", op_name(&op))));
        }
        self.nodes.push(Node { shape, data, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    // ---- leaves -------------------------------------------------------

    /// Records a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Result<Var, NumericsError> {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, tensor.requires_grad())
    }

    /// Leaf that always receives a gradient.
    pub fn param(&mut self, tensor: &Tensor) -> Result<Var, NumericsError> {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: &Tensor) -> Result<Var, NumericsError> {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, false)
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var, NumericsError> {
        if numel(shape) != data.len() {
            return Err(dim_err(format!("input shape {shape:?} vs {} values", data.len())));
        }
        self.push(shape.to_vec(), data, Op::Leaf, false)
    }

    /// Copy of `v` cut off from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Result<Var, NumericsError> {
        let node = &self.nodes[v.0];
        let (shape, data) = (node.shape.clone(), node.data.clone());
        self.push(shape, data, Op::Leaf, false)
    }

    // ---- access -------------------------------------------------------

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(&node.shape, node.data.clone()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v.0)
    }

    /// Gradient of the last `backward` call with respect to `v`, if one reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `v` into the tensor's grad slot (zeros if none reached it).
    pub fn grad_into(&self, v: Var, tensor: &mut Tensor) -> Result<(), NumericsError> {
        let g = self.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tensor.numel()]);
        tensor.set_grad(g)
    }

    /// Discards gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    // ---- linear algebra -----------------------------------------------

    /// Matrix product over the last two axes. `b` is either a shared `[k,n]`
    /// matrix or carries the same leading (batch) dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(dim_err(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(dim_err(format!("matmul inner extents differ: {sa:?} x {sb:?}")));
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && &sb[..sb.len() - 2] != lead {
            return Err(dim_err(format!("matmul batch dims differ: {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
            if shared_rhs {
                kernels::matmul_acc(ad, bd, &mut out, batch * m, k, n);
            } else {
                for i in 0..batch {
                    kernels::matmul_acc(
                        &ad[i * m * k..(i + 1) * m * k],
                        &bd[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(shape, out, Op::MatMul { a: a.0, b: b.0, batch, m, k, n, shared_rhs }, rg)
    }

    // ---- elementwise --------------------------------------------------

    fn check_suffix(&self, a: Var, b: Var, what: &str) -> Result<(), NumericsError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(dim_err(format!("{what}: {sb:?} does not broadcast onto {sa:?}")));
        }
        Ok(())
    }

    /// `a + b`, where `b` may be a trailing-suffix shape broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check_suffix(a, b, "add")?;
        let bd = &self.nodes[b.0].data;
        let n = bd.len();
        let out: Vec<f64> = self.nodes[a.0].data.iter().enumerate().map(|(i, x)| x + bd[i % n]).collect();
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(self.nodes[a.0].shape.clone(), out, Op::Add { a: a.0, b: b.0 }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(dim_err("sub: shapes differ"));
        }
        let out = self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x - y).collect();
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(self.nodes[a.0].shape.clone(), out, Op::Sub { a: a.0, b: b.0 }, rg)
    }

    /// Elementwise `a * b`, with the same suffix broadcasting as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check_suffix(a, b, "mul")?;
        let bd = &self.nodes[b.0].data;
        let n = bd.len();
        let out: Vec<f64> = self.nodes[a.0].data.iter().enumerate().map(|(i, x)| x * bd[i % n]).collect();
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(self.nodes[a.0].shape.clone(), out, Op::Mul { a: a.0, b: b.0 }, rg)
    }

    /// `mul * a + add` for constants.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Result<Var, NumericsError> {
        let out = self.nodes[a.0].data.iter().map(|x| mul * x + add).collect();
        let rg = self.rg(a.0);
        self.push(self.nodes[a.0].shape.clone(), out, Op::Affine { a: a.0, mul }, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        self.affine(a, c, 0.0)
    }

    /// `a` times a single-element variable `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, NumericsError> {
        let sv = match self.nodes[s.0].data.as_slice() {
            [v] => *v,
            _ => return Err(dim_err("scale_by expects a single-element scale")),
        };
        let out = self.nodes[a.0].data.iter().map(|x| x * sv).collect();
        let rg = self.rg(a.0) || self.rg(s.0);
        self.push(self.nodes[a.0].shape.clone(), out, Op::ScaleBy { a: a.0, s: s.0 }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        let rg = self.rg(a.0);
        self.push(self.nodes[a.0].shape.clone(), out, Op::Relu { a: a.0 }, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.nodes[a.0].data.iter().map(|&x| kernels::gelu(x)).collect();
        let rg = self.rg(a.0);
        self.push(self.nodes[a.0].shape.clone(), out, Op::Gelu { a: a.0 }, rg)
    }

    // ---- normalisation ------------------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(dim_err(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = self.nodes[a.0].data.clone();
        if inner == 1 {
            for row in out.chunks_mut(len) {
                kernels::softmax_row(row);
            }
        } else {
            let mut buf = vec![0.0; len];
            for o in 0..outer {
                for i in 0..inner {
                    for (j, slot) in buf.iter_mut().enumerate() {
                        *slot = out[(o * len + j) * inner + i];
                    }
                    kernels::softmax_row(&mut buf);
                    for (j, &v) in buf.iter().enumerate() {
                        out[(o * len + j) * inner + i] = v;
                    }
                }
            }
        }
        let rg = self.rg(a.0);
        self.push(shape, out, Op::Softmax { a: a.0, outer, len, inner }, rg)
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        let shape = self.nodes[x.0].shape.clone();
        let dim = *shape.last().ok_or_else(|| dim_err("layer_norm on a scalar"))?;
        if self.nodes[gamma.0].shape != [dim] || self.nodes[beta.0].shape != [dim] {
            return Err(dim_err(format!("layer_norm affine params must be [{dim}]")));
        }
        let xd = &self.nodes[x.0].data;
        let (g, bt) = (&self.nodes[gamma.0].data, &self.nodes[beta.0].data);
        let rows = xd.len() / dim;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * dim..(r + 1) * dim];
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..dim {
                let xh = (row[j] - mean) * is;
                xhat[r * dim + j] = xh;
                out[r * dim + j] = xh * g[j] + bt[j];
            }
        }
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        self.push(shape, out, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std, dim }, rg)
    }

    // ---- attention ----------------------------------------------------

    fn attn_dims(&self, q: Var, k: Var, v: Var, heads: usize) -> Result<AttnDims, NumericsError> {
        let (sq, sk, sv) = (&self.nodes[q.0].shape, &self.nodes[k.0].shape, &self.nodes[v.0].shape);
        if sq.len() != 3 || sk.len() != 3 || sv != sk {
            return Err(dim_err(format!("attention expects [b,t,d],[b,s,d],[b,s,d]; got {sq:?} {sk:?} {sv:?}")));
        }
        if sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(dim_err(format!("attention batch/model dims differ: {sq:?} vs {sk:?}")));
        }
        if heads == 0 || sq[2] % heads != 0 {
            return Err(dim_err(format!("{heads} heads do not divide model dim {}", sq[2])));
        }
        Ok(AttnDims { batch: sq[0], t: sq[1], s: sk[1], d: sq[2], heads })
    }

    /// Multi-head scaled dot-product attention, heads concatenated along the
    /// model axis. Returns the output and the saved probabilities
    /// (`[batch, heads, t, s]`).
    pub fn attention_with_probs(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Vec<f64>), NumericsError> {
        let dims = self.attn_dims(q, k, v, heads)?;
        let (out, probs) = kernels::attention_forward(
            &self.nodes[q.0].data,
            &self.nodes[k.0].data,
            &self.nodes[v.0].data,
            dims,
        );
        let rg = self.rg(q.0) || self.rg(k.0) || self.rg(v.0);
        let shape = vec![dims.batch, dims.t, dims.d];
        let saved = probs.clone();
        let var = self.push(shape, out, Op::Attention { q: q.0, k: k.0, v: v.0, dims, probs }, rg)?;
        Ok((var, saved))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, NumericsError> {
        let dims = self.attn_dims(q, k, v, heads)?;
        let (out, probs) = kernels::attention_forward(
            &self.nodes[q.0].data,
            &self.nodes[k.0].data,
            &self.nodes[v.0].data,
            dims,
        );
        let rg = self.rg(q.0) || self.rg(k.0) || self.rg(v.0);
        self.push(vec![dims.batch, dims.t, dims.d], out, Op::Attention { q: q.0, k: k.0, v: v.0, dims, probs }, rg)
    }

    /// Per-head probability mass a joint softmax over `[prefix_keys, content_keys]`
    /// puts on the prefix block, for each query. Output is `[batch, t, heads]`.
    pub fn prefix_mass(&mut self, q: Var, prefix_keys: Var, content_keys: Var, heads: usize) -> Result<Var, NumericsError> {
        let pd = self.attn_dims(q, prefix_keys, prefix_keys, heads)?;
        let cd = self.attn_dims(q, content_keys, content_keys, heads)?;
        let dims = MassDims { batch: pd.batch, t: pd.t, l: pd.s, s: cd.s, d: pd.d, heads };
        if dims.l + dims.s == 0 {
            return Err(dim_err("prefix_mass with no keys"));
        }
        let (mass, wp, wc) = kernels::prefix_mass_forward(
            &self.nodes[q.0].data,
            &self.nodes[prefix_keys.0].data,
            &self.nodes[content_keys.0].data,
            dims.batch,
            dims.t,
            dims.l,
            dims.s,
            dims.d,
            heads,
        );
        let rg = self.rg(q.0) || self.rg(prefix_keys.0) || self.rg(content_keys.0);
        self.push(
            vec![dims.batch, dims.t, heads],
            mass,
            Op::PrefixMass { q: q.0, pk: prefix_keys.0, kc: content_keys.0, dims, wp, wc },
            rg,
        )
    }

    /// Multiplies each head's column block of `x: [b,t,d]` by `coef: [b,t,heads]`.
    pub fn head_scale(&mut self, x: Var, coef: Var) -> Result<Var, NumericsError> {
        let (sx, sc) = (self.nodes[x.0].shape.clone(), self.nodes[coef.0].shape.clone());
        if sx.len() != 3 || sc.len() != 3 || sx[..2] != sc[..2] || sc[2] == 0 || sx[2] % sc[2] != 0 {
            return Err(dim_err(format!("head_scale: {sx:?} by {sc:?}")));
        }
        let heads = sc[2];
        let dh = sx[2] / heads;
        let (xd, cd) = (&self.nodes[x.0].data, &self.nodes[coef.0].data);
        let out = xd.iter().enumerate().map(|(i, v)| v * cd[(i / sx[2]) * heads + (i % sx[2]) / dh]).collect();
        let rg = self.rg(x.0) || self.rg(coef.0);
        self.push(sx, out, Op::HeadScale { x: x.0, coef: coef.0, heads }, rg)
    }

    // ---- structural ---------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or_else(|| dim_err("concat of nothing"))?;
        let base = self.nodes[first.0].shape.clone();
        if axis >= base.len() {
            return Err(dim_err(format!("concat axis {axis} out of range for {base:?}")));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut total_axis = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(dim_err(format!("concat shapes {base:?} and {s:?} disagree off axis {axis}")));
            }
            total_axis += s[axis];
            spans.push((p.0, s[axis] * inner));
        }
        let row: usize = total_axis * inner;
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for &(idx, span) in &spans {
                out.extend_from_slice(&self.nodes[idx].data[o * span..(o + 1) * span]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        let rg = parts.iter().any(|p| self.rg(p.0));
        self.push(shape, out, Op::Concat { parts: spans, outer }, rg)
    }

    /// Stacks `times` copies of `a` along a new leading axis.
    pub fn tile(&mut self, a: Var, times: usize) -> Result<Var, NumericsError> {
        let mut shape = vec![times];
        shape.extend_from_slice(&self.nodes[a.0].shape);
        let out = self.nodes[a.0].data.repeat(times);
        let rg = self.rg(a.0);
        self.push(shape, out, Op::Tile { a: a.0, times }, rg)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, NumericsError> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(dim_err(format!("slice {start}..{} on axis {axis} of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let src = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(a.0);
        self.push(new_shape, out, Op::Slice { a: a.0, outer, axis_len, inner, start, len }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        if numel(shape) != self.nodes[a.0].data.len() {
            return Err(dim_err(format!("cannot reshape {:?} into {shape:?}", self.nodes[a.0].shape)));
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.rg(a.0);
        self.push(shape.to_vec(), data, Op::Reshape { a: a.0 }, rg)
    }

    /// Keeps last-axis columns `lo..hi` and fills the rest with [`MASK_FILL`].
    /// Filled positions receive exactly zero gradient.
    pub fn mask_columns(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var, NumericsError> {
        let shape = self.nodes[a.0].shape.clone();
        let cols = *shape.last().ok_or_else(|| dim_err("mask on a scalar"))?;
        if lo >= hi || hi > cols {
            return Err(dim_err(format!("mask range {lo}..{hi} invalid for {cols} columns")));
        }
        let out = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| if (lo..hi).contains(&(i % cols)) { v } else { MASK_FILL })
            .collect();
        let rg = self.rg(a.0);
        self.push(shape, out, Op::MaskFill { a: a.0, cols, lo, hi }, rg)
    }

    // ---- reductions / losses ------------------------------------------

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let shape = self.nodes[logits.0].shape.clone();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(dim_err(format!("cross_entropy logits {shape:?} vs {} targets", targets.len())));
        }
        let classes = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(NumericsError::IndexOutOfRange { index: bad, len: classes });
        }
        let mut probs = self.nodes[logits.0].data.clone();
        let mut total = 0.0;
        for (row, &t) in probs.chunks_mut(classes).zip(targets) {
            let lse = kernels::log_sum_exp(row);
            total += lse - row[t];
            kernels::softmax_row(row);
        }
        let loss = total / targets.len() as f64;
        let rg = self.rg(logits.0);
        self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs, classes },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.nodes[a.0].data.iter().sum();
        let rg = self.rg(a.0);
        self.push(Vec::new(), vec![s], Op::Sum { a: a.0 }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let d = &self.nodes[a.0].data;
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(a.0);
        self.push(Vec::new(), vec![m], Op::Mean { a: a.0 }, rg)
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Afterwards [`Graph::grad`] is
    /// populated for every gradient-requiring node the loss depends on.
    /// A second call without [`Graph::reset_grads`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.backward_done {
            return Err(NumericsError::DoubleBackward);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(dim_err(format!("backward from non-scalar of shape {:?}", self.nodes[loss.0].shape)));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds into the gradient accumulator of node `i` (allocating it on first
    /// use); nodes that do not require a gradient are skipped.
    fn update(&self, grads: &mut [Option<Vec<f64>>], i: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[i].requires_grad {
            return;
        }
        let len = self.nodes[i].data.len();
        f(grads[i].get_or_insert_with(|| vec![0.0; len]));
    }

    fn add_into(&self, grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
        self.update(grads, i, |s| s.iter_mut().zip(g).for_each(|(a, b)| *a += b));
    }

    fn backprop_node(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batch, m, k, n, shared_rhs } => {
                let (ad, bd) = (&nodes[a].data, &nodes[b].data);
                self.update(grads, a, |ga| {
                    if shared_rhs {
                        kernels::matmul_grad_lhs(gout, bd, ga, batch * m, k, n);
                    } else {
                        for i in 0..batch {
                            kernels::matmul_grad_lhs(
                                &gout[i * m * n..(i + 1) * m * n],
                                &bd[i * k * n..(i + 1) * k * n],
                                &mut ga[i * m * k..(i + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                });
                self.update(grads, b, |gb| {
                    if shared_rhs {
                        kernels::matmul_grad_rhs(ad, gout, gb, batch * m, k, n);
                    } else {
                        for i in 0..batch {
                            kernels::matmul_grad_rhs(
                                &ad[i * m * k..(i + 1) * m * k],
                                &gout[i * m * n..(i + 1) * m * n],
                                &mut gb[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                });
            }
            &Op::Add { a, b } => {
                self.add_into(grads, a, gout);
                self.update(grads, b, |gb| {
                    let n = gb.len();
                    for (i, g) in gout.iter().enumerate() {
                        gb[i % n] += g;
                    }
                });
            }
            &Op::Sub { a, b } => {
                self.add_into(grads, a, gout);
                self.update(grads, b, |gb| gb.iter_mut().zip(gout).for_each(|(s, g)| *s -= g));
            }
            &Op::Mul { a, b } => {
                let (ad, bd) = (&nodes[a].data, &nodes[b].data);
                let n = bd.len();
                self.update(grads, a, |ga| {
                    for (i, g) in gout.iter().enumerate() {
                        ga[i] += g * bd[i % n];
                    }
                });
                self.update(grads, b, |gb| {
                    for (i, g) in gout.iter().enumerate() {
                        gb[i % n] += g * ad[i];
                    }
                });
            }
            &Op::Affine { a, mul } => {
                self.update(grads, a, |ga| ga.iter_mut().zip(gout).for_each(|(s, g)| *s += mul * g));
            }
            &Op::ScaleBy { a, s } => {
                let sv = nodes[s].data[0];
                self.update(grads, a, |ga| ga.iter_mut().zip(gout).for_each(|(slot, g)| *slot += sv * g));
                let ds = kernels::dot(gout, &nodes[a].data);
                self.update(grads, s, |gs| gs[0] += ds);
            }
            &Op::Relu { a } => {
                let x = &nodes[a].data;
                self.update(grads, a, |ga| {
                    for ((s, g), &xv) in ga.iter_mut().zip(gout).zip(x) {
                        if xv > 0.0 {
                            *s += g;
                        }
                    }
                });
            }
            &Op::Gelu { a } => {
                let x = &nodes[a].data;
                self.update(grads, a, |ga| {
                    for ((s, g), &xv) in ga.iter_mut().zip(gout).zip(x) {
                        *s += g * kernels::gelu_grad(xv);
                    }
                });
            }
            &Op::Softmax { a, outer, len, inner } => {
                let y = &nodes[idx].data;
                self.update(grads, a, |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dotp: f64 = (0..len).map(|j| y[at(j)] * gout[at(j)]).sum();
                            for j in 0..len {
                                ga[at(j)] += y[at(j)] * (gout[at(j)] - dotp);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std, dim } => {
                let dim = *dim;
                let g = &nodes[*gamma].data;
                self.update(grads, *gamma, |gg| {
                    for (i, go) in gout.iter().enumerate() {
                        gg[i % dim] += go * xhat[i];
                    }
                });
                self.update(grads, *beta, |gb| {
                    for (i, go) in gout.iter().enumerate() {
                        gb[i % dim] += go;
                    }
                });
                self.update(grads, *x, |gx| {
                    let nf = dim as f64;
                    for (r, &is) in inv_std.iter().enumerate() {
                        let span = r * dim..(r + 1) * dim;
                        let xh = &xhat[span.clone()];
                        let go = &gout[span.clone()];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..dim {
                            let dxh = go[j] * g[j];
                            sum_d += dxh;
                            sum_dx += dxh * xh[j];
                        }
                        let out = &mut gx[span];
                        for j in 0..dim {
                            let dxh = go[j] * g[j];
                            out[j] += is / nf * (nf * dxh - sum_d - xh[j] * sum_dx);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, dims, probs } => {
                let (qd, kd, vd) = (&nodes[*q].data, &nodes[*k].data, &nodes[*v].data);
                let mut dq = self.rg(*q).then(|| vec![0.0; qd.len()]);
                let mut dk = self.rg(*k).then(|| vec![0.0; kd.len()]);
                let mut dv = self.rg(*v).then(|| vec![0.0; vd.len()]);
                kernels::attention_backward(
                    qd,
                    kd,
                    vd,
                    probs,
                    gout,
                    *dims,
                    AttnGrads { dq: dq.as_deref_mut(), dk: dk.as_deref_mut(), dv: dv.as_deref_mut() },
                );
                for (i, g) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(g) = g {
                        self.add_into(grads, i, &g);
                    }
                }
            }
            Op::PrefixMass { q, pk, kc, dims, wp, wc } => {
                let (qd, pd, cd) = (&nodes[*q].data, &nodes[*pk].data, &nodes[*kc].data);
                let mut dq = self.rg(*q).then(|| vec![0.0; qd.len()]);
                let mut dp = self.rg(*pk).then(|| vec![0.0; pd.len()]);
                let mut dc = self.rg(*kc).then(|| vec![0.0; cd.len()]);
                kernels::prefix_mass_backward(
                    qd,
                    pd,
                    cd,
                    &nodes[idx].data,
                    wp,
                    wc,
                    gout,
                    dims.batch,
                    dims.t,
                    dims.l,
                    dims.s,
                    dims.d,
                    dims.heads,
                    MassGrads { dq: dq.as_deref_mut(), dpk: dp.as_deref_mut(), dkc: dc.as_deref_mut() },
                );
                for (i, g) in [(*q, dq), (*pk, dp), (*kc, dc)] {
                    if let Some(g) = g {
                        self.add_into(grads, i, &g);
                    }
                }
            }
            &Op::HeadScale { x, coef, heads } => {
                let d = nodes[x].shape[2];
                let dh = d / heads;
                let (xd, cd) = (&nodes[x].data, &nodes[coef].data);
                self.update(grads, x, |gx| {
                    for (i, g) in gout.iter().enumerate() {
                        gx[i] += g * cd[(i / d) * heads + (i % d) / dh];
                    }
                });
                self.update(grads, coef, |gc| {
                    for (i, g) in gout.iter().enumerate() {
                        gc[(i / d) * heads + (i % d) / dh] += g * xd[i];
                    }
                });
            }
            Op::Concat { parts, outer } => {
                let row: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(pidx, span) in parts {
                    self.update(grads, pidx, |gp| {
                        for o in 0..*outer {
                            let src = &gout[o * row + offset..o * row + offset + span];
                            gp[o * span..(o + 1) * span].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    });
                    offset += span;
                }
            }
            &Op::Tile { a, times } => {
                self.update(grads, a, |ga| {
                    let n = ga.len();
                    for t in 0..times {
                        ga.iter_mut().zip(&gout[t * n..(t + 1) * n]).for_each(|(s, g)| *s += g);
                    }
                });
            }
            &Op::Slice { a, outer, axis_len, inner, start, len } => {
                self.update(grads, a, |ga| {
                    let span = len * inner;
                    for o in 0..outer {
                        let base = (o * axis_len + start) * inner;
                        ga[base..base + span]
                            .iter_mut()
                            .zip(&gout[o * span..(o + 1) * span])
                            .for_each(|(s, g)| *s += g);
                    }
                });
            }
            &Op::Reshape { a } => self.add_into(grads, a, gout),
            &Op::MaskFill { a, cols, lo, hi } => {
                self.update(grads, a, |ga| {
                    for (i, g) in gout.iter().enumerate() {
                        if (lo..hi).contains(&(i % cols)) {
                            ga[i] += g;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs, classes } => {
                let classes = *classes;
                self.update(grads, *logits, |gl| {
                    let scale = gout[0] / targets.len() as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            gl[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                });
            }
            &Op::Sum { a } => self.update(grads, a, |ga| ga.iter_mut().for_each(|s| *s += gout[0])),
            &Op::Mean { a } => {
                self.update(grads, a, |ga| {
                    let g = gout[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|s| *s += g);
                });
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Affine { .. } => "affine",
        Op::ScaleBy { .. } => "scale_by",
        Op::Relu { .. } => "relu",
        Op::Gelu { .. } => "gelu",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Attention { .. } => "attention",
        Op::PrefixMass { .. } => "prefix_mass",
        Op::HeadScale { .. } => "head_scale",
        Op::Concat { .. } => "concat",
        Op::Tile { .. } => "tile",
        Op::Slice { .. } => "slice",
        Op::Reshape { .. } => "reshape",
        Op::MaskFill { .. } => "mask_columns",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
    }
}
