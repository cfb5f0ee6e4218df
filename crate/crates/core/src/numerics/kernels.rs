//! Raw slice kernels shared by the tape ops and the standalone tensor functions.
//!
//! Every kernel accumulates (`+=`) into its output so backward passes can sum
//! contributions from several consumers without temporaries.

/// `out[m,n] += a[m,k] · b[k,n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
}

/// `da[m,k] += dout[m,n] · b[k,n]ᵀ`
pub(crate) fn matmul_grad_lhs(dout: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let d_row = &dout[i * n..(i + 1) * n];
        let da_row = &mut da[i * k..(i + 1) * k];
        for (p, slot) in da_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            *slot += dot(d_row, b_row);
        }
    }
}

/// `db[k,n] += a[m,k]ᵀ · dout[m,n]`
pub(crate) fn matmul_grad_rhs(a: &[f64], dout: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let d_row = &dout[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let db_row = &mut db[p * n..(p + 1) * n];
            for (slot, &d) in db_row.iter_mut().zip(d_row) {
                *slot += a_ip * d;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place numerically stable softmax of one contiguous row.
pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `log Σ exp(row)` with max subtraction.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Geometry of a multi-head attention call: `q` is `[batch, t, d]`,
/// `k`/`v` are `[batch, s, d]`, split into `heads` column groups.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub t: usize,
    pub s: usize,
    pub d: usize,
    pub heads: usize,
}

impl AttnDims {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    #[inline]
    fn q_off(&self, b: usize, ti: usize, h: usize) -> usize {
        (b * self.t + ti) * self.d + h * self.head_dim()
    }

    #[inline]
    fn kv_off(&self, b: usize, si: usize, h: usize) -> usize {
        (b * self.s + si) * self.d + h * self.head_dim()
    }

    #[inline]
    fn prob_off(&self, b: usize, h: usize, ti: usize) -> usize {
        ((b * self.heads + h) * self.t + ti) * self.s
    }
}

/// Returns `(output [batch,t,d], probabilities [batch,heads,t,s])`.
pub(crate) fn attention_forward(q: &[f64], k: &[f64], v: &[f64], dims: AttnDims) -> (Vec<f64>, Vec<f64>) {
    let dh = dims.head_dim();
    let scale = dims.scale();
    let mut out = vec![0.0; dims.batch * dims.t * dims.d];
    let mut probs = vec![0.0; dims.batch * dims.heads * dims.t * dims.s];
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            for ti in 0..dims.t {
                let qo = dims.q_off(b, ti, h);
                let q_row = &q[qo..qo + dh];
                let po = dims.prob_off(b, h, ti);
                let p_row = &mut probs[po..po + dims.s];
                for (si, p) in p_row.iter_mut().enumerate() {
                    let ko = dims.kv_off(b, si, h);
                    *p = dot(q_row, &k[ko..ko + dh]) * scale;
                }
                softmax_row(p_row);
                let out_row = &mut out[qo..qo + dh];
                for (si, &p) in p_row.iter().enumerate() {
                    let vo = dims.kv_off(b, si, h);
                    for (o, &vv) in out_row.iter_mut().zip(&v[vo..vo + dh]) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

pub(crate) struct AttnGrads<'a> {
    pub dq: Option<&'a mut [f64]>,
    pub dk: Option<&'a mut [f64]>,
    pub dv: Option<&'a mut [f64]>,
}

pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    dims: AttnDims,
    mut grads: AttnGrads<'_>,
) {
    let dh = dims.head_dim();
    let scale = dims.scale();
    let mut dscore = vec![0.0; dims.s];
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            for ti in 0..dims.t {
                let qo = dims.q_off(b, ti, h);
                let d_row = &dout[qo..qo + dh];
                let po = dims.prob_off(b, h, ti);
                let p_row = &probs[po..po + dims.s];
                let mut weighted = 0.0;
                for (si, ds) in dscore.iter_mut().enumerate() {
                    let vo = dims.kv_off(b, si, h);
                    *ds = dot(d_row, &v[vo..vo + dh]);
                    weighted += p_row[si] * *ds;
                }
                for (ds, &p) in dscore.iter_mut().zip(p_row) {
                    *ds = p * (*ds - weighted) * scale;
                }
                if let Some(dv) = grads.dv.as_deref_mut() {
                    for (si, &p) in p_row.iter().enumerate() {
                        let vo = dims.kv_off(b, si, h);
                        for (slot, &g) in dv[vo..vo + dh].iter_mut().zip(d_row) {
                            *slot += p * g;
                        }
                    }
                }
                if let Some(dq) = grads.dq.as_deref_mut() {
                    let dq_row = &mut dq[qo..qo + dh];
                    for (si, &ds) in dscore.iter().enumerate() {
                        let ko = dims.kv_off(b, si, h);
                        for (slot, &kk) in dq_row.iter_mut().zip(&k[ko..ko + dh]) {
                            *slot += ds * kk;
                        }
                    }
                }
                if let Some(dk) = grads.dk.as_deref_mut() {
                    let q_row = &q[qo..qo + dh];
                    for (si, &ds) in dscore.iter().enumerate() {
                        let ko = dims.kv_off(b, si, h);
                        for (slot, &qq) in dk[ko..ko + dh].iter_mut().zip(q_row) {
                            *slot += ds * qq;
                        }
                    }
                }
            }
        }
    }
}

/// Per-(batch, token, head) probability mass that a softmax over
/// `[prefix keys, content keys]` assigns to the prefix block.
///
/// Returns `(mass [batch,t,heads], prefix weights [batch,heads,t,l],
/// content weights [batch,heads,t,s])`, where the weights are the softmax
/// normalized within each block.
pub(crate) fn prefix_mass_forward(
    q: &[f64],
    pk: &[f64],
    kc: &[f64],
    batch: usize,
    t: usize,
    l: usize,
    s: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let pdims = AttnDims { batch, t, s: l, d, heads };
    let cdims = AttnDims { batch, t, s, d, heads };
    let dh = pdims.head_dim();
    let scale = pdims.scale();
    let mut mass = vec![0.0; batch * t * heads];
    let mut wp = vec![0.0; batch * heads * t * l];
    let mut wc = vec![0.0; batch * heads * t * s];
    for b in 0..batch {
        for h in 0..heads {
            for ti in 0..t {
                let qo = pdims.q_off(b, ti, h);
                let q_row = &q[qo..qo + dh];
                let po = pdims.prob_off(b, h, ti);
                let p_row = &mut wp[po..po + l];
                for (i, p) in p_row.iter_mut().enumerate() {
                    let ko = pdims.kv_off(b, i, h);
                    *p = dot(q_row, &pk[ko..ko + dh]) * scale;
                }
                let co = cdims.prob_off(b, h, ti);
                let c_row = &mut wc[co..co + s];
                for (j, c) in c_row.iter_mut().enumerate() {
                    let ko = cdims.kv_off(b, j, h);
                    *c = dot(q_row, &kc[ko..ko + dh]) * scale;
                }
                let lse_p = log_sum_exp(p_row);
                let lse_c = log_sum_exp(c_row);
                mass[(b * t + ti) * heads + h] = 1.0 / (1.0 + (lse_c - lse_p).exp());
                softmax_row(p_row);
                softmax_row(c_row);
            }
        }
    }
    (mass, wp, wc)
}

pub(crate) struct MassGrads<'a> {
    pub dq: Option<&'a mut [f64]>,
    pub dpk: Option<&'a mut [f64]>,
    pub dkc: Option<&'a mut [f64]>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn prefix_mass_backward(
    q: &[f64],
    pk: &[f64],
    kc: &[f64],
    mass: &[f64],
    wp: &[f64],
    wc: &[f64],
    dmass: &[f64],
    batch: usize,
    t: usize,
    l: usize,
    s: usize,
    d: usize,
    heads: usize,
    mut grads: MassGrads<'_>,
) {
    let pdims = AttnDims { batch, t, s: l, d, heads };
    let cdims = AttnDims { batch, t, s, d, heads };
    let dh = pdims.head_dim();
    let scale = pdims.scale();
    for b in 0..batch {
        for h in 0..heads {
            for ti in 0..t {
                let lam = mass[(b * t + ti) * heads + h];
                // dλ/d(lse_p) = λ(1-λ), dλ/d(lse_c) = -λ(1-λ)
                let g = dmass[(b * t + ti) * heads + h] * lam * (1.0 - lam) * scale;
                if g == 0.0 {
                    continue;
                }
                let qo = pdims.q_off(b, ti, h);
                let po = pdims.prob_off(b, h, ti);
                let co = cdims.prob_off(b, h, ti);
                let p_row = &wp[po..po + l];
                let c_row = &wc[co..co + s];
                if let Some(dq) = grads.dq.as_deref_mut() {
                    let dq_row = &mut dq[qo..qo + dh];
                    for (i, &w) in p_row.iter().enumerate() {
                        let ko = pdims.kv_off(b, i, h);
                        for (slot, &kk) in dq_row.iter_mut().zip(&pk[ko..ko + dh]) {
                            *slot += g * w * kk;
                        }
                    }
                    for (j, &w) in c_row.iter().enumerate() {
                        let ko = cdims.kv_off(b, j, h);
                        for (slot, &kk) in dq_row.iter_mut().zip(&kc[ko..ko + dh]) {
                            *slot -= g * w * kk;
                        }
                    }
                }
                let q_row = &q[qo..qo + dh];
                if let Some(dpk) = grads.dpk.as_deref_mut() {
                    for (i, &w) in p_row.iter().enumerate() {
                        let ko = pdims.kv_off(b, i, h);
                        for (slot, &qq) in dpk[ko..ko + dh].iter_mut().zip(q_row) {
                            *slot += g * w * qq;
                        }
                    }
                }
                if let Some(dkc) = grads.dkc.as_deref_mut() {
                    for (j, &w) in c_row.iter().enumerate() {
                        let ko = cdims.kv_off(b, j, h);
                        for (slot, &qq) in dkc[ko..ko + dh].iter_mut().zip(q_row) {
                            *slot -= g * w * qq;
                        }
                    }
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
