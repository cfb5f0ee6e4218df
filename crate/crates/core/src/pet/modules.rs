use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Where an adapter sits relative to the MLP sub-block it adapts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterMode {
    /// `h + σ(h·W_down)·W_up` applied to the MLP output.
    Sequential,
    /// `h + s·σ(e·W_down)·W_up` alongside the MLP, reading its input `e`.
    #[default]
    Parallel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub mode: AdapterMode,
    pub w_down: Tensor,
    pub w_up: Tensor,
    /// Learnable scalar `s`; absent (fixed at 1) in sequential mode.
    pub scale: Option<Tensor>,
}

/// Low-rank update `s·W_down·W_up` of one projection matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactor {
    pub w_down: Tensor,
    pub w_up: Tensor,
    pub scale: Tensor,
}

/// LoRA on the query and value projections of one attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraParams {
    pub query: LoraFactor,
    pub value: LoraFactor,
}

/// Which parts of the prefix speed calibration are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrefixVariant {
    /// Drop λ(e) from the learnable term, so the prefix branch gradient is
    /// not attenuated by the prefix attention mass.
    pub compensation: bool,
    /// Learnable `s^k` (inside the prefix softmax) and `s^v` (on the values).
    pub scales: bool,
    /// Treat λ̂(e) in the `(1 − λ̂)·h` term as a constant.
    pub detach_lambda: bool,
}

impl Default for PrefixVariant {
    fn default() -> Self {
        Self::CALIBRATED
    }
}

impl PrefixVariant {
    pub const CALIBRATED: Self = Self { compensation: true, scales: true, detach_lambda: true };
    pub const UNCALIBRATED: Self = Self { compensation: false, scales: false, detach_lambda: true };

    pub fn is_calibrated(&self) -> bool {
        self.compensation && self.scales
    }
}

/// Prefix keys and values, `l × d` each, already in key/value space and split
/// across heads at forward time.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixParams {
    pub keys: Tensor,
    pub values: Tensor,
    pub key_scale: Option<Tensor>,
    pub value_scale: Option<Tensor>,
    pub variant: PrefixVariant,
}

impl PrefixParams {
    pub fn len(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn calibrated(&self) -> bool {
        self.variant.is_calibrated()
    }
}

// ---- bound (on-graph) forms --------------------------------------------------

fn bind_leaf(g: &mut Graph, t: &Tensor, trainable: bool) -> Result<Var> {
    Ok(if trainable { g.param(t)? } else { g.constant(t)? })
}

#[derive(Clone, Debug)]
pub struct BoundAdapter {
    pub mode: AdapterMode,
    pub w_down: Var,
    pub w_up: Var,
    pub scale: Option<Var>,
}

impl AdapterParams {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundAdapter> {
        Ok(BoundAdapter {
            mode: self.mode,
            w_down: bind_leaf(g, &self.w_down, trainable)?,
            w_up: bind_leaf(g, &self.w_up, trainable)?,
            scale: self.scale.as_ref().map(|s| bind_leaf(g, s, trainable)).transpose()?,
        })
    }
}

impl BoundAdapter {
    /// `e` is the input of the adapted sub-block, `h` its output.
    pub fn apply(&self, g: &mut Graph, e: Var, h: Var) -> Result<Var> {
        let src = match self.mode {
            AdapterMode::Sequential => h,
            AdapterMode::Parallel => e,
        };
        let z = g.matmul(src, self.w_down)?;
        let z = g.relu(z)?;
        let mut z = g.matmul(z, self.w_up)?;
        if let Some(s) = self.scale {
            z = g.scale_by(z, s)?;
        }
        Ok(g.add(h, z)?)
    }
}

#[derive(Clone, Debug)]
pub struct BoundLoraFactor {
    pub w_down: Var,
    pub w_up: Var,
    pub scale: Var,
}

impl LoraFactor {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundLoraFactor> {
        Ok(BoundLoraFactor {
            w_down: bind_leaf(g, &self.w_down, trainable)?,
            w_up: bind_leaf(g, &self.w_up, trainable)?,
            scale: bind_leaf(g, &self.scale, trainable)?,
        })
    }
}

impl BoundLoraFactor {
    /// `h + s·(e·W_down)·W_up`, where `h = e·W` is the un-adapted projection.
    pub fn apply(&self, g: &mut Graph, e: Var, h: Var) -> Result<Var> {
        let z = g.matmul(e, self.w_down)?;
        let z = g.matmul(z, self.w_up)?;
        let z = g.scale_by(z, self.scale)?;
        Ok(g.add(h, z)?)
    }
}

#[derive(Clone, Debug)]
pub struct BoundLora {
    pub query: BoundLoraFactor,
    pub value: BoundLoraFactor,
}

impl LoraParams {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundLora> {
        Ok(BoundLora { query: self.query.bind(g, trainable)?, value: self.value.bind(g, trainable)? })
    }
}

#[derive(Clone, Debug)]
pub struct BoundPrefix {
    pub keys: Var,
    pub values: Var,
    pub key_scale: Option<Var>,
    pub value_scale: Option<Var>,
    pub variant: PrefixVariant,
}

impl PrefixParams {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundPrefix> {
        Ok(BoundPrefix {
            keys: bind_leaf(g, &self.keys, trainable)?,
            values: bind_leaf(g, &self.values, trainable)?,
            key_scale: self.key_scale.as_ref().map(|s| bind_leaf(g, s, trainable)).transpose()?,
            value_scale: self.value_scale.as_ref().map(|s| bind_leaf(g, s, trainable)).transpose()?,
            variant: self.variant,
        })
    }
}

impl BoundPrefix {
    fn tiled(&self, g: &mut Graph, batch: usize) -> Result<(Var, Var)> {
        let pk = g.tile(self.keys, batch)?;
        let pv = match self.value_scale {
            Some(s) => g.scale_by(self.values, s)?,
            None => self.values,
        };
        let pv = g.tile(pv, batch)?;
        Ok((pk, pv))
    }

    /// Per-query, per-head prefix attention mass λ `[batch, tokens, heads]`.
    pub fn lambda(&self, g: &mut Graph, q: Var, k: Var, heads: usize) -> Result<Var> {
        let pk = g.tile(self.keys, g.shape(q)[0])?;
        Ok(g.prefix_mass(q, pk, k, heads)?)
    }

    /// Attention over prefix plus content keys, in whichever form the variant
    /// asks for. The plain variant attends over the concatenated sequence; the
    /// others use the decomposition `(1 − λ)·h + [λ]·softmax(s^k·q·P_kᵀ)·(s^v·P_v)`.
    pub fn attend(&self, g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let batch = g.shape(q)[0];
        let (pk, pv) = self.tiled(g, batch)?;
        let v_ = self.variant;
        if !v_.compensation && self.key_scale.is_none() && self.value_scale.is_none() {
            let keys = g.concat(&[pk, k], 1)?;
            let vals = g.concat(&[pv, v], 1)?;
            return Ok(g.attention(q, keys, vals, heads)?);
        }
        let h = g.attention(q, k, v, heads)?;
        let lambda = g.prefix_mass(q, pk, k, heads)?;
        let kept = if v_.compensation && v_.detach_lambda { g.detach(lambda)? } else { lambda };
        let qs = match self.key_scale {
            Some(s) => g.scale_by(q, s)?,
            None => q,
        };
        let branch = g.attention(qs, pk, pv, heads)?;
        let one_minus = g.affine(kept, -1.0, 1.0)?;
        let h = g.head_scale(h, one_minus)?;
        let branch = if v_.compensation { branch } else { g.head_scale(branch, lambda)? };
        Ok(g.add(h, branch)?)
    }
}

// ---- standalone forms ------------------------------------------------------

/// Adapter on concrete tensors; `e` is the sub-block input, `h` its output.
pub fn adapter_forward(p: &AdapterParams, e: &Tensor, h: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = p.bind(&mut g, false)?;
    let (ve, vh) = (g.constant(e)?, g.constant(h)?);
    let out = b.apply(&mut g, ve, vh)?;
    Ok(g.tensor(out))
}

/// `h + s·e·W_down·W_up`.
pub fn lora_forward(p: &LoraFactor, e: &Tensor, h: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = p.bind(&mut g, false)?;
    let (ve, vh) = (g.constant(e)?, g.constant(h)?);
    let out = b.apply(&mut g, ve, vh)?;
    Ok(g.tensor(out))
}

/// `W + s·W_down·W_up`, the weight that makes the low-rank branch free at
/// inference time.
pub fn lora_merge(p: &LoraFactor, w: &Tensor) -> Result<Tensor> {
    let (wd, wu) = (p.w_down.shape(), p.w_up.shape());
    if w.rank() != 2 || wd.len() != 2 || wu.len() != 2 || wd[0] != w.shape()[0] || wu[1] != w.shape()[1] || wd[1] != wu[0]
    {
        return Err(Error::Dimension(format!("cannot merge LoRA {wd:?}·{wu:?} into weight {:?}", w.shape())));
    }
    let mut g = Graph::new();
    let b = p.bind(&mut g, false)?;
    let vw = g.constant(w)?;
    let delta = g.matmul(b.w_down, b.w_up)?;
    let delta = g.scale_by(delta, b.scale)?;
    let out = g.add(vw, delta)?;
    Ok(g.tensor(out))
}

/// Projections shared by the standalone prefix forms: `q = e·W_q` etc.
struct Projected {
    g: Graph,
    q: Var,
    k: Var,
    v: Var,
    prefix: BoundPrefix,
}

fn project(p: &PrefixParams, e: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Result<Projected> {
    let d = *e.shape().last().unwrap_or(&0);
    if e.rank() != 3 || p.keys.shape() != p.values.shape() || p.keys.rank() != 2 || p.keys.shape()[1] != d {
        return Err(Error::Dimension(format!(
            "prefix {:?}/{:?} against content {:?}",
            p.keys.shape(),
            p.values.shape(),
            e.shape()
        )));
    }
    let mut g = Graph::new();
    let prefix = p.bind(&mut g, false)?;
    let ve = g.constant(e)?;
    let (vq, vk, vv) = (g.constant(wq)?, g.constant(wk)?, g.constant(wv)?);
    let q = g.matmul(ve, vq)?;
    let k = g.matmul(ve, vk)?;
    let v = g.matmul(ve, vv)?;
    Ok(Projected { g, q, k, v, prefix })
}

/// `Attn(e·W_q, [P_k; e·W_k], [P_v; e·W_v])` over the concatenated sequence;
/// scales and variant flags are ignored.
pub fn prefix_attention(p: &PrefixParams, e: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, heads: usize) -> Result<Tensor> {
    let Projected { mut g, q, k, v, prefix } = project(p, e, wq, wk, wv)?;
    let batch = g.shape(q)[0];
    if p.is_empty() {
        let out = g.attention(q, k, v, heads)?;
        return Ok(g.tensor(out));
    }
    let pk = g.tile(prefix.keys, batch)?;
    let pv = g.tile(prefix.values, batch)?;
    let keys = g.concat(&[pk, k], 1)?;
    let vals = g.concat(&[pv, v], 1)?;
    let out = g.attention(q, keys, vals, heads)?;
    Ok(g.tensor(out))
}

/// Prefix attention mass λ(e) per query and head, shape `[batch, tokens, heads]`.
pub fn prefix_lambda(p: &PrefixParams, e: &Tensor, wq: &Tensor, wk: &Tensor, heads: usize) -> Result<Tensor> {
    let Projected { mut g, q, k, prefix, .. } = project(p, e, wq, wk, wk)?;
    let lam = prefix.lambda(&mut g, q, k, heads)?;
    Ok(g.tensor(lam))
}

/// `(1 − λ)·h + λ·softmax(e·W_1)·W_2` with `W_1 = W_q·P_kᵀ`, `W_2 = P_v` and `h`
/// the content-only attention output. Mathematically identical to
/// [`prefix_attention`] but assembled from separate pieces.
pub fn prefix_as_adapter_form(
    p: &PrefixParams,
    e: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    heads: usize,
) -> Result<Tensor> {
    let Projected { mut g, q, k, v, prefix } = project(p, e, wq, wk, wv)?;
    let batch = g.shape(q)[0];
    let h = g.attention(q, k, v, heads)?;
    let pk = g.tile(prefix.keys, batch)?;
    let pv = g.tile(prefix.values, batch)?;
    let lam = g.prefix_mass(q, pk, k, heads)?;
    let branch = g.attention(q, pk, pv, heads)?;
    let one_minus = g.affine(lam, -1.0, 1.0)?;
    let a = g.head_scale(h, one_minus)?;
    let b = g.head_scale(branch, lam)?;
    let out = g.add(a, b)?;
    Ok(g.tensor(out))
}

/// `softmax(s^k·e·W_1)·(s^v·W_2)`: the prefix-only branch.
pub fn prefix_branch(p: &PrefixParams, e: &Tensor, wq: &Tensor, heads: usize) -> Result<Tensor> {
    let Projected { mut g, q, prefix, .. } = project(p, e, wq, wq, wq)?;
    let batch = g.shape(q)[0];
    let (pk, pv) = prefix.tiled(&mut g, batch)?;
    let qs = match prefix.key_scale {
        Some(s) => g.scale_by(q, s)?,
        None => q,
    };
    let out = g.attention(qs, pk, pv, heads)?;
    Ok(g.tensor(out))
}

/// `(1 − λ̂)·h + softmax(s^k·e·W_1)·(s^v·W_2)`; requires a calibrated prefix.
pub fn calibrated_prefix_attention(
    p: &PrefixParams,
    e: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    heads: usize,
) -> Result<Tensor> {
    if !p.calibrated() {
        return Err(Error::Config("calibrated_prefix_attention needs a calibrated prefix".into()));
    }
    let Projected { mut g, q, k, v, prefix } = project(p, e, wq, wk, wv)?;
    let out = prefix.attend(&mut g, q, k, v, heads)?;
    Ok(g.tensor(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{self, Rng};
    use rand::Rng as _;

    fn random(shape: &[usize], r: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    fn mm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                for j in 0..m {
                    out[i * m + j] += a[i * k + p] * b[p * m + j];
                }
            }
        }
        out
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    /// Loop-level multi-head attention of one sequence; also returns the
    /// probabilities `[head][query][key]`.
    fn attn_oracle(q: &[f64], k: &[f64], v: &[f64], t: usize, s: usize, d: usize, heads: usize) -> (Vec<f64>, Vec<Vec<Vec<f64>>>) {
        let dh = d / heads;
        let mut out = vec![0.0; t * d];
        let mut probs = vec![vec![vec![0.0; s]; t]; heads];
        for h in 0..heads {
            for i in 0..t {
                let logits: Vec<f64> = (0..s)
                    .map(|j| (h * dh..(h + 1) * dh).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for j in 0..s {
                    let p = (logits[j] - m).exp() / z;
                    probs[h][i][j] = p;
                    for c in h * dh..(h + 1) * dh {
                        out[i * d + c] += p * v[j * d + c];
                    }
                }
            }
        }
        (out, probs)
    }

    fn prefix(l: usize, d: usize, variant: PrefixVariant, r: &mut Rng) -> PrefixParams {
        let (key_scale, value_scale) = if variant.scales {
            (Some(Tensor::scalar(1.0)), Some(Tensor::scalar(1.0)))
        } else {
            (None, None)
        };
        PrefixParams { keys: random(&[l, d], r), values: random(&[l, d], r), key_scale, value_scale, variant }
    }

    struct Instance {
        e: Tensor,
        wq: Tensor,
        wk: Tensor,
        wv: Tensor,
        heads: usize,
        b: usize,
        t: usize,
        d: usize,
    }

    fn instance(b: usize, t: usize, d: usize, heads: usize, r: &mut Rng) -> Instance {
        Instance {
            e: random(&[b, t, d], r),
            wq: random(&[d, d], r),
            wk: random(&[d, d], r),
            wv: random(&[d, d], r),
            heads,
            b,
            t,
            d,
        }
    }

    /// Brute-force concat attention for every batch element; returns outputs
    /// and the per-query, per-head prefix mass `[b, t, heads]`.
    fn concat_oracle(p: &PrefixParams, x: &Instance) -> (Vec<f64>, Vec<f64>) {
        let (t, d, l) = (x.t, x.d, p.len());
        let (mut out, mut mass) = (Vec::new(), Vec::new());
        for bi in 0..x.b {
            let e = &x.e.data()[bi * t * d..(bi + 1) * t * d];
            let q = mm(e, x.wq.data(), t, d, d);
            let mut k = p.keys.data().to_vec();
            k.extend(mm(e, x.wk.data(), t, d, d));
            let mut v = p.values.data().to_vec();
            v.extend(mm(e, x.wv.data(), t, d, d));
            let (o, probs) = attn_oracle(&q, &k, &v, t, l + t, d, x.heads);
            out.extend(o);
            for i in 0..t {
                for h in 0..x.heads {
                    mass.push(probs[h][i][..l].iter().sum());
                }
            }
        }
        (out, mass)
    }

    fn scale_heads(x: &[f64], lam: &[f64], heads: usize, d: usize) -> Vec<f64> {
        let dh = d / heads;
        x.iter().enumerate().map(|(i, v)| v * lam[(i / d) * heads + (i % d) / dh]).collect()
    }

    #[test]
    fn adapter_identity_cases() {
        let mut r = rng::seeded(1);
        let (e, h) = (random(&[3, 8], &mut r), random(&[3, 8], &mut r));
        for mode in [AdapterMode::Sequential, AdapterMode::Parallel] {
            let p = AdapterParams {
                mode,
                w_down: random(&[8, 2], &mut r),
                w_up: Tensor::zeros(&[2, 8]),
                scale: (mode == AdapterMode::Parallel).then(|| Tensor::scalar(0.7)),
            };
            assert!(adapter_forward(&p, &e, &h).unwrap().bit_eq(&h));
        }
        let p = AdapterParams {
            mode: AdapterMode::Parallel,
            w_down: random(&[8, 2], &mut r),
            w_up: random(&[2, 8], &mut r),
            scale: Some(Tensor::scalar(0.0)),
        };
        assert!(adapter_forward(&p, &e, &h).unwrap().bit_eq(&h));
    }

    #[test]
    fn adapter_matches_two_matmul_oracle() {
        let mut r = rng::seeded(2);
        let (e, h) = (random(&[4, 8], &mut r), random(&[4, 8], &mut r));
        let (wd, wu) = (random(&[8, 2], &mut r), random(&[2, 8], &mut r));
        for (mode, s) in [(AdapterMode::Parallel, Some(0.3)), (AdapterMode::Sequential, None)] {
            let p = AdapterParams { mode, w_down: wd.clone(), w_up: wu.clone(), scale: s.map(Tensor::scalar) };
            let src = if mode == AdapterMode::Parallel { &e } else { &h };
            let z: Vec<f64> = mm(src.data(), wd.data(), 4, 8, 2).into_iter().map(|x| x.max(0.0)).collect();
            let z = mm(&z, wu.data(), 4, 2, 8);
            let oracle: Vec<f64> = h.data().iter().zip(&z).map(|(a, b)| a + s.unwrap_or(1.0) * b).collect();
            assert!(close(adapter_forward(&p, &e, &h).unwrap().data(), &oracle, 1e-12));
        }
        let bad = AdapterParams { mode: AdapterMode::Parallel, w_down: wd, w_up: random(&[3, 8], &mut r), scale: None };
        assert!(adapter_forward(&bad, &e, &h).is_err());
    }

    #[test]
    fn lora_forward_cases() {
        let mut r = rng::seeded(3);
        let (e, h) = (random(&[5, 6], &mut r), random(&[5, 4], &mut r));
        let zero = LoraFactor { w_down: random(&[6, 2], &mut r), w_up: Tensor::zeros(&[2, 4]), scale: Tensor::scalar(0.1) };
        assert!(lora_forward(&zero, &e, &h).unwrap().bit_eq(&h));

        let p = LoraFactor { w_down: random(&[6, 2], &mut r), w_up: random(&[2, 4], &mut r), scale: Tensor::scalar(1.0) };
        let delta = mm(p.w_down.data(), p.w_up.data(), 6, 2, 4);
        let via_delta: Vec<f64> = h.data().iter().zip(mm(e.data(), &delta, 5, 6, 4)).map(|(a, b)| a + b).collect();
        assert!(close(lora_forward(&p, &e, &h).unwrap().data(), &via_delta, 1e-12));

        let p = LoraFactor { scale: Tensor::scalar(-0.4), ..p };
        let z = mm(&mm(e.data(), p.w_down.data(), 5, 6, 2), p.w_up.data(), 5, 2, 4);
        let oracle: Vec<f64> = h.data().iter().zip(z).map(|(a, b)| a - 0.4 * b).collect();
        assert!(close(lora_forward(&p, &e, &h).unwrap().data(), &oracle, 1e-12));
    }

    /// Rank by Gaussian elimination with partial pivoting.
    fn rank(m: &[f64], rows: usize, cols: usize, tol: f64) -> usize {
        let mut a = m.to_vec();
        let mut rank = 0;
        for c in 0..cols {
            let Some(p) = (rank..rows).max_by(|&x, &y| a[x * cols + c].abs().total_cmp(&a[y * cols + c].abs())) else {
                break;
            };
            if a[p * cols + c].abs() <= tol {
                continue;
            }
            for j in 0..cols {
                a.swap(p * cols + j, rank * cols + j);
            }
            for i in rank + 1..rows {
                let f = a[i * cols + c] / a[rank * cols + c];
                for j in c..cols {
                    a[i * cols + j] -= f * a[rank * cols + j];
                }
            }
            rank += 1;
        }
        rank
    }

    #[test]
    fn lora_merge_cases() {
        let mut r = rng::seeded(4);
        let w = random(&[8, 8], &mut r);
        let zero = LoraFactor { w_down: random(&[8, 2], &mut r), w_up: Tensor::zeros(&[2, 8]), scale: Tensor::scalar(0.1) };
        assert!(lora_merge(&zero, &w).unwrap().bit_eq(&w));

        for rk in 1..=3 {
            let p = LoraFactor { w_down: random(&[8, rk], &mut r), w_up: random(&[rk, 8], &mut r), scale: Tensor::scalar(0.5) };
            let merged = lora_merge(&p, &w).unwrap();
            let diff: Vec<f64> = merged.data().iter().zip(w.data()).map(|(a, b)| a - b).collect();
            assert_eq!(rank(&diff, 8, 8, 1e-9), rk);

            let e = random(&[6, 8], &mut r);
            let base = Tensor::new(&[6, 8], mm(e.data(), w.data(), 6, 8, 8)).unwrap();
            let unmerged = lora_forward(&p, &e, &base).unwrap();
            let via_merged = mm(e.data(), merged.data(), 6, 8, 8);
            assert!(close(unmerged.data(), &via_merged, 1e-10));
        }
        assert!(lora_merge(&zero, &random(&[7, 8], &mut r)).is_err());
    }

    #[test]
    fn rank_oracle_sanity() {
        assert_eq!(rank(&[1.0, 2.0, 2.0, 4.0], 2, 2, 1e-12), 1);
        assert_eq!(rank(&[1.0, 0.0, 0.0, 1.0], 2, 2, 1e-12), 2);
        assert_eq!(rank(&[0.0; 6], 2, 3, 1e-12), 0);
    }

    #[test]
    fn prefix_attention_matches_concat_oracle() {
        let mut r = rng::seeded(5);
        for _ in 0..10 {
            let x = instance(2, 5, 8, 2, &mut r);
            let p = prefix(3, 8, PrefixVariant::UNCALIBRATED, &mut r);
            let out = prefix_attention(&p, &x.e, &x.wq, &x.wk, &x.wv, x.heads).unwrap();
            let (oracle, _) = concat_oracle(&p, &x);
            assert!(close(out.data(), &oracle, 1e-10));
        }
    }

    #[test]
    fn empty_and_suppressed_prefix_give_vanilla_attention() {
        let mut r = rng::seeded(6);
        let x = instance(2, 4, 8, 2, &mut r);
        let vanilla = {
            let p = PrefixParams {
                keys: Tensor::zeros(&[0, 8]),
                values: Tensor::zeros(&[0, 8]),
                key_scale: None,
                value_scale: None,
                variant: PrefixVariant::UNCALIBRATED,
            };
            prefix_attention(&p, &x.e, &x.wq, &x.wk, &x.wv, x.heads).unwrap()
        };
        let (oracle, _) = concat_oracle(&prefix(0, 8, PrefixVariant::UNCALIBRATED, &mut r), &x);
        assert!(close(vanilla.data(), &oracle, 1e-12));

        // positive queries against hugely negative prefix keys
        let e = Tensor::from_fn(&[1, 4, 8], |_| r.random_range(0.5..1.0));
        let id = Tensor::from_fn(&[8, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
        let mut p = prefix(2, 8, PrefixVariant::UNCALIBRATED, &mut r);
        p.keys = Tensor::full(&[2, 8], -1e4);
        let with = prefix_attention(&p, &e, &id, &x.wk, &x.wv, 2).unwrap();
        p.keys = Tensor::zeros(&[0, 8]);
        p.values = Tensor::zeros(&[0, 8]);
        let without = prefix_attention(&p, &e, &id, &x.wk, &x.wv, 2).unwrap();
        assert!(with.max_abs_diff(&without) < 1e-12);
    }

    #[test]
    fn lambda_cases() {
        let mut r = rng::seeded(7);
        // all logits equal when W_q = 0
        for (l, t) in [(1, 3), (2, 5), (4, 4)] {
            let x = instance(1, t, 8, 2, &mut r);
            let p = prefix(l, 8, PrefixVariant::UNCALIBRATED, &mut r);
            let lam = prefix_lambda(&p, &x.e, &Tensor::zeros(&[8, 8]), &x.wk, 2).unwrap();
            let want = l as f64 / (l + t) as f64;
            assert!(lam.data().iter().all(|v| (v - want).abs() < 1e-14));
        }
        for _ in 0..10 {
            let x = instance(2, 5, 8, 4, &mut r);
            let p = prefix(3, 8, PrefixVariant::UNCALIBRATED, &mut r);
            let lam = prefix_lambda(&p, &x.e, &x.wq, &x.wk, x.heads).unwrap();
            assert_eq!(lam.shape(), &[2, 5, 4]);
            assert!(lam.data().iter().all(|&v| v > 0.0 && v < 1.0));
            let (_, mass) = concat_oracle(&p, &x);
            assert!(close(lam.data(), &mass, 1e-12));
        }
    }

    #[test]
    fn adapter_form_equivalence_and_limits() {
        let mut r = rng::seeded(8);
        for _ in 0..20 {
            let x = instance(2, 5, 8, 2, &mut r);
            let p = prefix(3, 8, PrefixVariant::UNCALIBRATED, &mut r);
            let a = prefix_attention(&p, &x.e, &x.wq, &x.wk, &x.wv, x.heads).unwrap();
            let b = prefix_as_adapter_form(&p, &x.e, &x.wq, &x.wk, &x.wv, x.heads).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-8);
        }

        let e = Tensor::from_fn(&[1, 4, 8], |_| r.random_range(0.5..1.0));
        let id = Tensor::from_fn(&[8, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
        let x = instance(1, 4, 8, 2, &mut r);
        let mut p = prefix(2, 8, PrefixVariant::UNCALIBRATED, &mut r);
        // λ → 0
        p.keys = Tensor::full(&[2, 8], -1e4);
        let out = prefix_as_adapter_form(&p, &e, &id, &x.wk, &x.wv, 2).unwrap();
        let empty = PrefixParams { keys: Tensor::zeros(&[0, 8]), values: Tensor::zeros(&[0, 8]), ..p.clone() };
        let vanilla = prefix_attention(&empty, &e, &id, &x.wk, &x.wv, 2).unwrap();
        assert!(out.max_abs_diff(&vanilla) < 1e-10);
        // λ → 1
        p.keys = Tensor::full(&[2, 8], 1e4);
        let out = prefix_as_adapter_form(&p, &e, &id, &x.wk, &x.wv, 2).unwrap();
        let branch = prefix_branch(&p, &e, &id, 2).unwrap();
        assert!(out.max_abs_diff(&branch) < 1e-10);
    }

    #[test]
    fn calibrated_forward_term_by_term() {
        let mut r = rng::seeded(9);
        for _ in 0..10 {
            let x = instance(2, 5, 8, 2, &mut r);
            let p = prefix(3, 8, PrefixVariant::CALIBRATED, &mut r);
            let cal = calibrated_prefix_attention(&p, &x.e, &x.wq, &x.wk, &x.wv, x.heads).unwrap();
            let lam = prefix_lambda(&p, &x.e, &x.wq, &x.wk, x.heads).unwrap();
            let empty = PrefixParams { keys: Tensor::zeros(&[0, 8]), values: Tensor::zeros(&[0, 8]), ..p.clone() };
            let h = prefix_attention(&empty, &x.e, &x.wq, &x.wk, &x.wv, x.heads).unwrap();
            let branch = prefix_branch(&p, &x.e, &x.wq, x.heads).unwrap();
            let one_minus: Vec<f64> = lam.data().iter().map(|l| 1.0 - l).collect();
            let want: Vec<f64> =
                scale_heads(h.data(), &one_minus, 2, 8).iter().zip(branch.data()).map(|(a, b)| a + b).collect();
            assert!(close(cal.data(), &want, 1e-10));

            // against the adapter form the only change is the λ on the branch
            let eq9 = prefix_as_adapter_form(&p, &x.e, &x.wq, &x.wk, &x.wv, x.heads).unwrap();
            let residual = scale_heads(branch.data(), &one_minus, 2, 8);
            let diff: Vec<f64> = cal.data().iter().zip(eq9.data()).map(|(a, b)| a - b).collect();
            assert!(close(&diff, &residual, 1e-10));
        }
        let x = instance(1, 3, 8, 2, &mut r);
        let p = prefix(2, 8, PrefixVariant::UNCALIBRATED, &mut r);
        assert!(calibrated_prefix_attention(&p, &x.e, &x.wq, &x.wk, &x.wv, 2).is_err());
    }

    #[test]
    fn key_scale_sits_inside_the_softmax() {
        let mut r = rng::seeded(10);
        let x = instance(1, 3, 8, 2, &mut r);
        let mut p = prefix(2, 8, PrefixVariant::CALIBRATED, &mut r);
        p.key_scale = Some(Tensor::scalar(2.0));
        p.value_scale = Some(Tensor::scalar(3.0));
        let got = prefix_branch(&p, &x.e, &x.wq, 2).unwrap();
        let q: Vec<f64> = mm(x.e.data(), x.wq.data(), 3, 8, 8).iter().map(|v| 2.0 * v).collect();
        let vals: Vec<f64> = p.values.data().iter().map(|v| 3.0 * v).collect();
        let (want, _) = attn_oracle(&q, p.keys.data(), &vals, 3, 2, 8, 2);
        assert!(close(got.data(), &want, 1e-12));
    }

    fn pv_grad_norm(p: &PrefixParams, x: &Instance, w: &Tensor) -> (f64, f64) {
        let mut g = Graph::new();
        let bp = p.bind(&mut g, true).unwrap();
        let e = g.constant(&x.e).unwrap();
        let (wq, wk, wv) = (g.constant(&x.wq).unwrap(), g.constant(&x.wk).unwrap(), g.constant(&x.wv).unwrap());
        let q = g.matmul(e, wq).unwrap();
        let k = g.matmul(e, wk).unwrap();
        let v = g.matmul(e, wv).unwrap();
        let out = bp.attend(&mut g, q, k, v, x.heads).unwrap();
        let wv_ = g.constant(w).unwrap();
        let prod = g.mul(out, wv_).unwrap();
        let loss = g.mean(prod).unwrap();
        let lam = bp.lambda(&mut g, q, k, x.heads).unwrap();
        let lam_bar = g.value(lam).iter().sum::<f64>() / g.value(lam).len() as f64;
        g.backward(loss).unwrap();
        let norm = g.grad(bp.values).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
        (norm, lam_bar)
    }

    #[test]
    fn calibration_removes_lambda_from_value_gradient() {
        let mut r = rng::seeded(11);
        for _ in 0..5 {
            let x = Instance {
                wq: Tensor::from_fn(&[8, 8], |_| 0.05 * r.random_range(-1.0..1.0)),
                wk: Tensor::from_fn(&[8, 8], |_| 0.05 * r.random_range(-1.0..1.0)),
                ..instance(2, 6, 8, 2, &mut r)
            };
            let mut p = prefix(2, 8, PrefixVariant::CALIBRATED, &mut r);
            p.keys = Tensor::from_fn(&[2, 8], |_| 0.05 * r.random_range(-1.0..1.0));
            let w = random(&[2, 6, 8], &mut r);
            let (cal, lam_bar) = pv_grad_norm(&p, &x, &w);
            let unc = PrefixParams { key_scale: None, value_scale: None, variant: PrefixVariant::UNCALIBRATED, ..p };
            let (plain, _) = pv_grad_norm(&unc, &x, &w);
            let ratio = cal / plain;
            assert!((ratio * lam_bar - 1.0).abs() < 0.2, "ratio {ratio}, 1/λ̄ {}", 1.0 / lam_bar);
        }
    }
}
