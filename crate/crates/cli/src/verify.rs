//! Fast invariant suite behind `lae verify`.
//!
//! Each check builds its own random instances from fixed seeds, compares the
//! library against an independent computation, and reports one line.

use std::time::Instant;

use lae_core::continual::{ema_update, ensemble_from_logits, masked_local_ce};
use lae_core::model::{build_backbone, forward_features, head_forward, merge_lora, BackboneConfig, ClassifierHead};
use lae_core::numerics::gradcheck::{check, weighted_sum, GradCheckConfig};
use lae_core::numerics::rng::{self, Rng};
use lae_core::numerics::{Graph, NumericsError, Tensor, Var};
use lae_core::pet::{
    prefix_as_adapter_form, prefix_attention, prefix_lambda, PetConfig, PetKind, PetModule, PetSet, PrefixParams,
    PrefixVariant,
};

/// Deliberate bugs for checking that the suite notices them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Run the calibrated prefix without λ compensation while still
    /// expecting the compensated gradient ratio.
    LambdaCompensation,
}

impl std::str::FromStr for Fault {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lambda-compensation" => Ok(Fault::LambdaCompensation),
            other => Err(format!("unknown fault `{other}` (lambda-compensation)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!("{} {:<28} {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn result(name: &'static str, outcome: lae_core::Result<(bool, String)>) -> CheckResult {
    match outcome {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult { name, passed: false, detail: format!("error: {e}") },
    }
}

fn random(shape: &[usize], r: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng::uniform(r, -1.0, 1.0))
}

fn pick(r: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + ((rng::uniform(r, 0.0, 1.0) * (hi - lo + 1) as f64) as usize).min(hi - lo)
}

/// A random attention instance: content `e [b, t, d]`, projections and an
/// unscaled prefix of length `l`.
pub struct PrefixInstance {
    pub e: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub heads: usize,
    pub prefix: PrefixParams,
}

/// Instances with `d <= 16`, `l <= 4` and `tokens <= 8`.
pub fn prefix_instances(count: usize, seed: u64) -> Vec<PrefixInstance> {
    (0..count as u64)
        .map(|i| {
            let mut r = rng::derive(seed, i);
            let heads = pick(&mut r, 1, 4);
            let d = heads * pick(&mut r, 1, 16 / heads);
            let (b, t, l) = (pick(&mut r, 1, 3), pick(&mut r, 1, 8), pick(&mut r, 1, 4));
            PrefixInstance {
                e: random(&[b, t, d], &mut r),
                wq: random(&[d, d], &mut r),
                wk: random(&[d, d], &mut r),
                wv: random(&[d, d], &mut r),
                heads,
                prefix: PrefixParams {
                    keys: random(&[l, d], &mut r),
                    values: random(&[l, d], &mut r),
                    key_scale: None,
                    value_scale: None,
                    variant: PrefixVariant::UNCALIBRATED,
                },
            }
        })
        .collect()
}

/// Prefix attention over the concatenated sequence against its
/// `(1 − λ)·h + λ·branch` decomposition.
pub fn check_prefix_equivalence(instances: usize) -> CheckResult {
    let t0 = Instant::now();
    let outcome = (|| -> lae_core::Result<(bool, String)> {
        let mut worst = 0.0f64;
        for x in prefix_instances(instances, 0xe9) {
            let a = prefix_attention(&x.prefix, &x.e, &x.wq, &x.wk, &x.wv, x.heads)?;
            let b = prefix_as_adapter_form(&x.prefix, &x.e, &x.wq, &x.wk, &x.wv, x.heads)?;
            worst = worst.max(a.max_abs_diff(&b));
        }
        let secs = t0.elapsed().as_secs_f64();
        Ok((worst < 1e-8 && secs < 5.0, format!("{instances} instances, max |diff| {worst:.2e}, {secs:.2}s")))
    })();
    result("prefix-adapter-equivalence", outcome)
}

/// Loop oracle for λ: softmax over `[P_k; K]` per head and query, summed
/// over the prefix positions. Returns `[b, t, heads]`.
pub fn lambda_oracle(x: &PrefixInstance) -> Vec<f64> {
    let (b, t, d) = (x.e.shape()[0], x.e.shape()[1], x.e.shape()[2]);
    let l = x.prefix.keys.shape()[0];
    let dh = d / x.heads;
    let proj = |w: &Tensor, bi: usize, ti: usize, c: usize| -> f64 {
        (0..d).map(|p| x.e.data()[(bi * t + ti) * d + p] * w.data()[p * d + c]).sum()
    };
    let mut out = Vec::with_capacity(b * t * x.heads);
    for bi in 0..b {
        for ti in 0..t {
            let q: Vec<f64> = (0..d).map(|c| proj(&x.wq, bi, ti, c)).collect();
            for h in 0..x.heads {
                let cols = h * dh..(h + 1) * dh;
                let dot = |key: &dyn Fn(usize) -> f64| cols.clone().map(|c| q[c] * key(c)).sum::<f64>() / (dh as f64).sqrt();
                let mut logits: Vec<f64> = (0..l).map(|j| dot(&|c| x.prefix.keys.data()[j * d + c])).collect();
                logits.extend((0..t).map(|s| dot(&|c| proj(&x.wk, bi, s, c))));
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
                out.push(logits[..l].iter().map(|v| (v - m).exp() / z).sum());
            }
        }
    }
    out
}

pub fn check_lambda_mass(instances: usize) -> CheckResult {
    let outcome = (|| -> lae_core::Result<(bool, String)> {
        let mut worst = 0.0f64;
        for x in prefix_instances(instances, 0xe9) {
            let lam = prefix_lambda(&x.prefix, &x.e, &x.wq, &x.wk, x.heads)?;
            let want = lambda_oracle(&x);
            if lam.numel() != want.len() {
                return Ok((false, format!("λ has {} entries, expected {}", lam.numel(), want.len())));
            }
            worst = lam.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        }
        Ok((worst < 1e-12, format!("{instances} instances, max |diff| {worst:.2e}")))
    })();
    result("lambda-mass", outcome)
}

/// `‖∂L/∂P_v‖` and the mean prefix mass λ̄ for `L = mean(out · w)`.
pub fn value_grad_norm(p: &PrefixParams, x: &PrefixInstance, w: &Tensor) -> lae_core::Result<(f64, f64)> {
    let mut g = Graph::new();
    let bp = p.bind(&mut g, true)?;
    let e = g.constant(&x.e)?;
    let (wq, wk, wv) = (g.constant(&x.wq)?, g.constant(&x.wk)?, g.constant(&x.wv)?);
    let q = g.matmul(e, wq)?;
    let k = g.matmul(e, wk)?;
    let v = g.matmul(e, wv)?;
    let out = bp.attend(&mut g, q, k, v, x.heads)?;
    let wt = g.constant(w)?;
    let prod = g.mul(out, wt)?;
    let loss = g.mean(prod)?;
    let lam = bp.lambda(&mut g, q, k, x.heads)?;
    let lam_bar = g.value(lam).iter().sum::<f64>() / g.value(lam).len() as f64;
    g.backward(loss)?;
    let norm = g.grad(bp.values).map_or(0.0, |gr| gr.iter().map(|v| v * v).sum::<f64>().sqrt());
    Ok((norm, lam_bar))
}

/// Small-weight instance of `(prefix length, content length)`: attention is
/// near uniform, so λ̄ ≈ l / (l + t).
fn calibration_instance(l: usize, t: usize, r: &mut Rng) -> (PrefixInstance, Tensor) {
    let (b, d, heads) = (2, 8, 2);
    let small = |shape: &[usize], r: &mut Rng| Tensor::from_fn(shape, |_| 0.05 * rng::uniform(r, -1.0, 1.0));
    let x = PrefixInstance {
        e: random(&[b, t, d], r),
        wq: small(&[d, d], r),
        wk: small(&[d, d], r),
        wv: random(&[d, d], r),
        heads,
        prefix: PrefixParams {
            keys: small(&[l, d], r),
            values: random(&[l, d], r),
            key_scale: Some(Tensor::scalar(1.0)),
            value_scale: Some(Tensor::scalar(1.0)),
            variant: PrefixVariant::CALIBRATED,
        },
    };
    let w = random(&[b, t, d], r);
    (x, w)
}

/// The calibrated/uncalibrated value-gradient ratio sits within 20% of 1/λ̄,
/// and the uncalibrated gradient grows with λ̄ across three length settings.
pub fn check_gradient_compensation(fault: Option<Fault>) -> CheckResult {
    let outcome = (|| -> lae_core::Result<(bool, String)> {
        let calibrated = match fault {
            Some(Fault::LambdaCompensation) => PrefixVariant { compensation: false, ..PrefixVariant::CALIBRATED },
            None => PrefixVariant::CALIBRATED,
        };
        let mut r = rng::seeded(0xca1);
        let mut worst = 0.0f64;
        for (l, t) in [(1, 8), (2, 6), (2, 4), (4, 4), (4, 2)] {
            for _ in 0..4 {
                let (mut x, w) = calibration_instance(l, t, &mut r);
                x.prefix.variant = calibrated;
                let (cal, lam_bar) = value_grad_norm(&x.prefix, &x, &w)?;
                let plain = PrefixParams { key_scale: None, value_scale: None, variant: PrefixVariant::UNCALIBRATED, ..x.prefix.clone() };
                let (unc, _) = value_grad_norm(&plain, &x, &w)?;
                worst = worst.max((cal / unc * lam_bar - 1.0).abs());
            }
        }
        // Uncalibrated gradient against λ̄ with a fixed upstream direction.
        let mut series = Vec::new();
        for (l, t) in [(1, 8), (2, 4), (4, 2)] {
            let (x, _) = calibration_instance(l, t, &mut r);
            let ones = Tensor::full(x.e.shape(), 1.0);
            let plain = PrefixParams { key_scale: None, value_scale: None, variant: PrefixVariant::UNCALIBRATED, ..x.prefix.clone() };
            series.push(value_grad_norm(&plain, &x, &ones)?);
        }
        series.sort_by(|a, b| a.1.total_cmp(&b.1));
        let monotone = series.windows(2).all(|w| w[1].0 > w[0].0);
        let desc = series.iter().map(|(n, l)| format!("{l:.2}->{n:.3}")).collect::<Vec<_>>().join(" ");
        Ok((
            worst <= 0.2 && monotone,
            format!("max |ratio·λ̄ − 1| {worst:.3} (limit 0.2); uncalibrated norm by λ̄: {desc}"),
        ))
    })();
    result("gradient-compensation", outcome)
}

type Maker = fn(&mut Rng) -> (Vec<Tensor>, Tensor);
type OpFn = fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>;

fn away_from_zero(shape: &[usize], r: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng::uniform(r, 0.05, 1.0);
        if rng::uniform(r, 0.0, 1.0) < 0.5 {
            m
        } else {
            -m
        }
    })
}

/// Every differentiable op with an input generator; the generator also
/// returns the weights that contract the output to a scalar.
pub fn gradcheck_ops() -> Vec<(&'static str, Maker, OpFn)> {
    vec![
        ("matmul", |r| (vec![random(&[2, 3, 4], r), random(&[4, 5], r)], random(&[2, 3, 5], r)), |g, v| g.matmul(v[0], v[1])),
        ("matmul-batched", |r| (vec![random(&[2, 3, 4], r), random(&[2, 4, 2], r)], random(&[2, 3, 2], r)), |g, v| g.matmul(v[0], v[1])),
        ("add", |r| (vec![random(&[3, 4], r), random(&[4], r)], random(&[3, 4], r)), |g, v| g.add(v[0], v[1])),
        ("sub", |r| (vec![random(&[3, 4], r), random(&[3, 4], r)], random(&[3, 4], r)), |g, v| g.sub(v[0], v[1])),
        ("mul", |r| (vec![random(&[2, 3, 4], r), random(&[3, 4], r)], random(&[2, 3, 4], r)), |g, v| g.mul(v[0], v[1])),
        ("affine", |r| (vec![random(&[4, 3], r)], random(&[4, 3], r)), |g, v| g.affine(v[0], -1.7, 0.3)),
        ("scale", |r| (vec![random(&[4, 3], r)], random(&[4, 3], r)), |g, v| g.scale(v[0], 2.5)),
        ("scale_by", |r| (vec![random(&[4, 3], r), random(&[], r)], random(&[4, 3], r)), |g, v| g.scale_by(v[0], v[1])),
        ("relu", |r| (vec![away_from_zero(&[3, 5], r)], random(&[3, 5], r)), |g, v| g.relu(v[0])),
        (
            "gelu",
            |r| (vec![Tensor::from_fn(&[3, 5], |_| rng::uniform(r, -3.0, 3.0))], random(&[3, 5], r)),
            |g, v| g.gelu(v[0]),
        ),
        ("softmax", |r| (vec![random(&[2, 3, 4], r)], random(&[2, 3, 4], r)), |g, v| g.softmax(v[0], 2)),
        ("softmax-axis0", |r| (vec![random(&[2, 3, 4], r)], random(&[2, 3, 4], r)), |g, v| g.softmax(v[0], 0)),
        (
            "layer_norm",
            |r| (vec![random(&[2, 3, 6], r), random(&[6], r), random(&[6], r)], random(&[2, 3, 6], r)),
            |g, v| g.layer_norm(v[0], v[1], v[2]),
        ),
        (
            "attention",
            |r| (vec![random(&[2, 3, 4], r), random(&[2, 5, 4], r), random(&[2, 5, 4], r)], random(&[2, 3, 4], r)),
            |g, v| g.attention(v[0], v[1], v[2], 2),
        ),
        (
            "prefix_mass",
            |r| (vec![random(&[2, 3, 4], r), random(&[2, 2, 4], r), random(&[2, 5, 4], r)], random(&[2, 3, 2], r)),
            |g, v| g.prefix_mass(v[0], v[1], v[2], 2),
        ),
        (
            "head_scale",
            |r| (vec![random(&[2, 3, 6], r), random(&[2, 3, 3], r)], random(&[2, 3, 6], r)),
            |g, v| g.head_scale(v[0], v[1]),
        ),
        ("concat", |r| (vec![random(&[2, 1, 3], r), random(&[2, 4, 3], r)], random(&[2, 5, 3], r)), |g, v| g.concat(&[v[0], v[1]], 1)),
        ("tile", |r| (vec![random(&[2, 3], r)], random(&[4, 2, 3], r)), |g, v| g.tile(v[0], 4)),
        ("slice", |r| (vec![random(&[2, 5, 3], r)], random(&[2, 2, 3], r)), |g, v| g.slice(v[0], 1, 2, 2)),
        ("reshape", |r| (vec![random(&[2, 6], r)], random(&[3, 4], r)), |g, v| g.reshape(v[0], &[3, 4])),
        ("cross_entropy", |r| (vec![random(&[4, 5], r)], Tensor::scalar(1.0)), |g, v| g.cross_entropy(v[0], &[0, 4, 2, 2])),
        (
            "masked cross_entropy",
            |r| (vec![random(&[4, 6], r)], Tensor::scalar(1.0)),
            |g, v| {
                let m = g.mask_columns(v[0], 2, 5)?;
                g.cross_entropy(m, &[2, 4, 3, 2])
            },
        ),
        ("sum", |r| (vec![random(&[3, 2], r)], Tensor::scalar(1.0)), |g, v| g.sum(v[0])),
        ("mean", |r| (vec![random(&[3, 2], r)], Tensor::scalar(1.0)), |g, v| g.mean(v[0])),
    ]
}

/// Central finite differences for every op over `instances` random inputs.
/// Returns one result per op.
pub fn check_gradients(instances: usize) -> Vec<(&'static str, f64, bool)> {
    let mut out = Vec::new();
    for (k, (name, make, f)) in gradcheck_ops().into_iter().enumerate() {
        let mut worst = 0.0f64;
        let mut ok = true;
        for i in 0..instances as u64 {
            let mut r = rng::derive(0x6c + k as u64, i);
            let (inputs, weights) = make(&mut r);
            let diff = vec![true; inputs.len()];
            let report = check(
                |g: &mut Graph, v: &[Var]| {
                    let o = f(g, v)?;
                    if g.shape(o).is_empty() {
                        Ok(o)
                    } else {
                        weighted_sum(g, o, &weights)
                    }
                },
                &inputs,
                &diff,
                GradCheckConfig::default(),
            );
            match report {
                Ok(rep) => {
                    worst = worst.max(rep.max_rel_error);
                    ok &= rep.passed;
                }
                Err(_) => ok = false,
            }
        }
        out.push((name, worst, ok));
    }
    out
}

pub fn check_gradients_summary(instances: usize) -> CheckResult {
    let results = check_gradients(instances);
    let failed: Vec<&str> = results.iter().filter(|r| !r.2).map(|r| r.0).collect();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail = if failed.is_empty() {
        format!("{} ops x {instances} instances, max rel err {worst:.2e}", results.len())
    } else {
        format!("failing ops: {}", failed.join(", "))
    };
    CheckResult { name: "finite-difference-gradients", passed: failed.is_empty(), detail }
}

/// With a constant online PET, `off_k − θ = α^k (off_0 − θ)`.
pub fn check_ema_closed_form(k: usize, alpha: f64) -> CheckResult {
    let outcome = (|| -> lae_core::Result<(bool, String)> {
        let cfg = BackboneConfig { depth: 2, dim: 8, heads: 2, mlp_ratio: 2, patch_tokens: 3, token_dim: 4, seed: 0 };
        let mut r = rng::seeded(0xe3a);
        let mut online = PetSet::new(&PetConfig { kind: PetKind::Adapter, size: 2, ..PetConfig::default() }, &cfg, &mut r)
            ?;
        for t in online.tensors_mut() {
            for v in t.data_mut() {
                *v = rng::uniform(&mut r, -1.0, 1.0);
            }
        }
        let mut offline = online.clone();
        for t in offline.tensors_mut() {
            for v in t.data_mut() {
                *v = rng::uniform(&mut r, -1.0, 1.0);
            }
        }
        let (start, _) = offline.flatten();
        let (theta, _) = online.flatten();
        for _ in 0..k {
            ema_update(&mut offline, &online, alpha)?;
        }
        let (end, _) = offline.flatten();
        let decay = alpha.powi(k as i32);
        let worst = (0..end.len()).map(|i| ((end[i] - theta[i]) - decay * (start[i] - theta[i])).abs()).fold(0.0, f64::max);
        Ok((worst < 1e-9, format!("k={k}, alpha={alpha}, max |diff| {worst:.2e}")))
    })();
    result("ema-closed-form", outcome)
}

/// Masked local CE sends exactly zero gradient to old-class logits and to
/// the old head columns.
pub fn check_mask_nullity() -> CheckResult {
    let outcome = (|| -> lae_core::Result<(bool, String)> {
        let mut r = rng::seeded(0x3a5);
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let mut head = ClassifierHead::new(6);
            head.grow(3, &mut r)?;
            head.grow(4, &mut r)?;
            let (lo, hi) = (3, 7);
            let feats = random(&[5, 6], &mut r);
            let targets: Vec<usize> = (0..5).map(|_| pick(&mut r, lo, hi - 1)).collect();
            let mut g = Graph::new();
            let bh = head.bind(&mut g)?;
            let f = g.constant(&feats)?;
            let logits = bh.forward(&mut g, f)?;
            let loss = masked_local_ce(&mut g, logits, &targets, (lo, hi))?;
            g.backward(loss)?;
            let c = head.num_classes();
            let gl = g.grad(logits).unwrap_or(&[]);
            let gw = g.grad(bh.weight).unwrap_or(&[]);
            let gb = g.grad(bh.bias).unwrap_or(&[]);
            for row in gl.chunks(c).chain(gw.chunks(c)).chain(std::iter::once(gb)) {
                worst = row[..lo].iter().fold(worst, |m, v| m.max(v.abs()));
            }
            if gl.is_empty() || gw.is_empty() || gb.is_empty() {
                return Ok((false, "no gradient reached the head".to_string()));
            }
        }
        Ok((worst == 0.0, format!("max |old-class grad| {worst:e}")))
    })();
    result("masked-ce-nullity", outcome)
}

/// Identical experts reproduce the single model; every pick is one
/// expert's pick; exact ties go to the lowest index.
pub fn check_ensemble_contracts() -> CheckResult {
    let mut r = rng::seeded(0xe45);
    let (n, c) = (200, 7);
    let argmax = |row: &[f64]| {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    };
    let on = random(&[n, c], &mut r);
    let same = ensemble_from_logits(&on, Some(&on)).labels;
    let single: Vec<usize> = on.data().chunks(c).map(argmax).collect();
    let degenerate = same == single;

    let off = Tensor::from_fn(&[n, c], |_| 3.0 * rng::uniform(&mut r, -1.0, 1.0));
    let mixed = ensemble_from_logits(&on, Some(&off)).labels;
    let picks_one = mixed.iter().enumerate().all(|(i, &y)| y == argmax(on.row(i)) || y == argmax(off.row(i)));

    let tie = Tensor::new(&[2, 4], vec![0.0, 2.0, 2.0, 0.0, 1.0, 1.0, 1.0, 1.0]).expect("shape");
    let ties_low = ensemble_from_logits(&tie, Some(&tie)).labels == vec![1, 0];
    CheckResult {
        name: "ensemble-contracts",
        passed: degenerate && picks_one && ties_low,
        detail: format!("identical experts {degenerate}, pick from an expert {picks_one}, ties to lowest {ties_low}"),
    }
}

/// Merged LoRA weights give the same logits as the unmerged branch and
/// differ from the base weight by at most rank r.
pub fn check_lora_merge() -> CheckResult {
    let outcome = (|| -> lae_core::Result<(bool, String)> {
        let cfg = BackboneConfig { depth: 2, dim: 8, heads: 2, mlp_ratio: 2, patch_tokens: 3, token_dim: 4, seed: 3 };
        let mut bb = build_backbone(&cfg)?;
        bb.freeze();
        let mut r = rng::seeded(0x10a);
        let rank = 2;
        let mut pets = PetSet::new(&PetConfig { kind: PetKind::Lora, size: rank, ..PetConfig::default() }, &cfg, &mut r)
            ?;
        for t in pets.tensors_mut() {
            for v in t.data_mut() {
                *v += 0.5 * rng::uniform(&mut r, -1.0, 1.0);
            }
        }
        let mut head = ClassifierHead::new(cfg.dim);
        head.grow(5, &mut r)?;
        let x = random(&[6, 3, 4], &mut r);
        let unmerged = head_forward(&head, &forward_features(&bb, Some(&pets), &x)?)?;
        let merged_bb = merge_lora(&bb, &pets)?;
        let merged = head_forward(&head, &forward_features(&merged_bb, None, &x)?)?;
        let diff = merged.max_abs_diff(&unmerged);
        let mut max_rank = 0;
        for (point, module) in pets.modules() {
            if let PetModule::Lora(_) = module {
                let (a, b) = (&merged_bb.blocks[point.block], &bb.blocks[point.block]);
                for (m, w) in [(&a.wq, &b.wq), (&a.wv, &b.wv)] {
                    let delta: Vec<f64> = m.data().iter().zip(w.data()).map(|(x, y)| x - y).collect();
                    max_rank = max_rank.max(matrix_rank(&delta, cfg.dim, cfg.dim, 1e-9));
                }
            }
        }
        Ok((diff < 1e-10 && max_rank <= rank, format!("max |logit diff| {diff:.2e}, max rank(ΔW) {max_rank} (r = {rank})")))
    })();
    result("lora-merge", outcome)
}

/// Rank by Gaussian elimination with partial pivoting.
pub fn matrix_rank(m: &[f64], rows: usize, cols: usize, tol: f64) -> usize {
    let mut a = m.to_vec();
    let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1.0);
    let mut rank = 0;
    for col in 0..cols {
        if rank == rows {
            break;
        }
        let pivot = (rank..rows).max_by(|&i, &j| a[i * cols + col].abs().total_cmp(&a[j * cols + col].abs())).expect("rows left");
        if a[pivot * cols + col].abs() <= tol * scale {
            continue;
        }
        for k in 0..cols {
            a.swap(rank * cols + k, pivot * cols + k);
        }
        for i in rank + 1..rows {
            let f = a[i * cols + col] / a[rank * cols + col];
            for k in col..cols {
                a[i * cols + k] -= f * a[rank * cols + k];
            }
        }
        rank += 1;
    }
    rank
}

/// The whole fast suite.
pub fn run_suite(fault: Option<Fault>) -> Vec<CheckResult> {
    vec![
        check_prefix_equivalence(100),
        check_lambda_mass(100),
        check_gradient_compensation(fault),
        check_gradients_summary(3),
        check_ema_closed_form(1000, 0.9999),
        check_mask_nullity(),
        check_ensemble_contracts(),
        check_lora_merge(),
    ]
}
