//! Dense `f64` tensors and a record-on-forward reverse-mode tape.

mod adam;
pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
pub mod rng;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{Graph, Var, MASK_FILL};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("index {index} out of range for {len} entries")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("backward already ran on this graph; reset gradients first")]
    DoubleBackward,
}

/// Matrix product over the last two axes (see [`Graph::matmul`]).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a)?, g.constant(b)?);
    let out = g.matmul(va, vb)?;
    Ok(g.tensor(out))
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor, NumericsError> {
    let mut g = Graph::new();
    let v = g.constant(x)?;
    let out = g.softmax(v, axis)?;
    Ok(g.tensor(out))
}

/// Multi-head attention `softmax(QKᵀ/√d_h)V` with heads concatenated.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor, NumericsError> {
    let mut g = Graph::new();
    let (vq, vk, vv) = (g.constant(q)?, g.constant(k)?, g.constant(v)?);
    let out = g.attention(vq, vk, vv, heads)?;
    Ok(g.tensor(out))
}

/// Batch-mean cross-entropy of `[batch, classes]` logits.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64, NumericsError> {
    let mut g = Graph::new();
    let v = g.constant(logits)?;
    let out = g.cross_entropy(v, targets)?;
    Ok(g.value(out)[0])
}

/// Softmax of a plain slice.
pub fn softmax_slice(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    kernels::softmax_row(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(shape: &[usize], rng: &mut rng::Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let id = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[vec![0.3, -2.0], vec![5.0, 7.5]]).unwrap();
        assert!(matmul(&id, &m).unwrap().bit_eq(&m));

        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut r = rng::seeded(11);
        let a = random(&[5, 7], &mut r);
        let b = random(&[7, 3], &mut r);
        let c = matmul(&a, &b).unwrap();
        let mut oracle = vec![0.0; 15];
        for i in 0..5 {
            for j in 0..3 {
                for p in 0..7 {
                    oracle[i * 3 + j] += a.data()[i * 7 + p] * b.data()[p * 3 + j];
                }
            }
        }
        assert_close(c.data(), &oracle, 1e-12);
    }

    #[test]
    fn matmul_batched_and_shape_errors() {
        let mut r = rng::seeded(3);
        let a = random(&[2, 3, 4], &mut r);
        let b = random(&[2, 4, 5], &mut r);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 5]);
        let a1 = Tensor::new(&[3, 4], a.data()[12..].to_vec()).unwrap();
        let b1 = Tensor::new(&[4, 5], b.data()[20..].to_vec()).unwrap();
        assert_close(&c.data()[15..], matmul(&a1, &b1).unwrap().data(), 1e-15);

        let bad = random(&[3, 5], &mut r);
        assert!(matches!(matmul(&a, &bad), Err(NumericsError::Dimension(_))));
        let bad_batch = random(&[3, 4, 5], &mut r);
        assert!(matmul(&a, &bad_batch).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let x = Tensor::new(&[4], vec![2.0; 4]).unwrap();
        assert_close(softmax(&x, 0).unwrap().data(), &[0.25; 4], 1e-15);

        let y = Tensor::new(&[2], vec![0.0, 3f64.ln()]).unwrap();
        assert_close(softmax(&y, 0).unwrap().data(), &[0.25, 0.75], 1e-15);

        let mut r = rng::seeded(5);
        let z = random(&[3, 6], &mut r);
        let shifted = Tensor::from_fn(&[3, 6], |i| z.data()[i] + 123.0);
        let (s0, s1) = (softmax(&z, 1).unwrap(), softmax(&shifted, 1).unwrap());
        assert_close(s0.data(), s1.data(), 1e-12);
        for row in s0.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_on_non_last_axis() {
        let mut r = rng::seeded(8);
        let z = random(&[3, 4, 2], &mut r);
        let s = softmax(&z, 1).unwrap();
        for o in 0..3 {
            for i in 0..2 {
                let col: f64 = (0..4).map(|j| s.data()[(o * 4 + j) * 2 + i]).sum();
                assert!((col - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_single_key_returns_value() {
        let mut r = rng::seeded(2);
        let q = random(&[1, 3, 8], &mut r);
        let k = random(&[1, 1, 8], &mut r);
        let v = random(&[1, 1, 8], &mut r);
        let out = attention(&q, &k, &v, 2).unwrap();
        for row in out.data().chunks(8) {
            assert_close(row, v.data(), 1e-15);
        }
    }

    #[test]
    fn attention_saturates_on_huge_logit() {
        // one head; key 1 aligned with the query and enormous
        let q = Tensor::new(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
        let k = Tensor::new(&[1, 3, 2], vec![0.0, 1.0, 1e3, 0.0, 0.0, -1.0]).unwrap();
        let v = Tensor::new(&[1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = attention(&q, &k, &v, 1).unwrap();
        assert_close(out.data(), &[3.0, 4.0], 1e-12);
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let mut r = rng::seeded(17);
        let (b, t, s, d, heads) = (2, 3, 4, 6, 2);
        let q = random(&[b, t, d], &mut r);
        let k = random(&[b, s, d], &mut r);
        let v = random(&[b, s, d], &mut r);
        let out = attention(&q, &k, &v, heads).unwrap();
        let dh = d / heads;
        let mut oracle = vec![0.0; b * t * d];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let mut logits = Vec::new();
                    for si in 0..s {
                        let mut acc = 0.0;
                        for c in h * dh..(h + 1) * dh {
                            acc += q.data()[(bi * t + ti) * d + c] * k.data()[(bi * s + si) * d + c];
                        }
                        logits.push(acc / (dh as f64).sqrt());
                    }
                    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                    for si in 0..s {
                        let p = (logits[si] - max).exp() / z;
                        for c in h * dh..(h + 1) * dh {
                            oracle[(bi * t + ti) * d + c] += p * v.data()[(bi * s + si) * d + c];
                        }
                    }
                }
            }
        }
        assert_close(out.data(), &oracle, 1e-10);
        assert!(attention(&q, &k, &v, 4).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Tensor::zeros(&[3, 5]);
        assert!((cross_entropy(&uniform, &[0, 2, 4]).unwrap() - 5f64.ln()).abs() < 1e-14);

        let mut prev = 5f64.ln();
        for margin in [0.5, 1.0, 2.0, 4.0] {
            let mut l = Tensor::zeros(&[1, 5]);
            l.data_mut()[2] = margin;
            let ce = cross_entropy(&l, &[2]).unwrap();
            assert!(ce < prev);
            prev = ce;
        }

        let mut r = rng::seeded(23);
        let logits = random(&[6, 4], &mut r);
        let targets = [0, 3, 1, 2, 2, 0];
        let mut oracle = 0.0;
        for (row, &t) in logits.data().chunks(4).zip(&targets) {
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            oracle += lse - row[t];
        }
        oracle /= 6.0;
        assert!((cross_entropy(&logits, &targets).unwrap() - oracle).abs() < 1e-12);

        assert!(matches!(
            cross_entropy(&logits, &[0, 1, 2, 3, 4, 0]),
            Err(NumericsError::IndexOutOfRange { index: 4, len: 4 })
        ));
    }

    #[test]
    fn backward_linear_map_and_double_call() {
        let mut r = rng::seeded(31);
        let w = random(&[3, 2], &mut r);
        let x = random(&[1, 3], &mut r);
        let mut g = Graph::new();
        let vw = g.param(&w).unwrap();
        let vx = g.constant(&x).unwrap();
        let y = g.matmul(vx, vw).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        let gw = g.grad(vw).unwrap();
        for p in 0..3 {
            for j in 0..2 {
                assert_eq!(gw[p * 2 + j], x.data()[p]);
            }
        }
        assert!(g.grad(vx).is_none());
        assert_eq!(g.backward(loss), Err(NumericsError::DoubleBackward));
        g.reset_grads();
        g.backward(loss).unwrap();
    }

    #[test]
    fn detached_values_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let b = g.param(&Tensor::new(&[2], vec![3.0, -1.0]).unwrap()).unwrap();
        let db = g.detach(b).unwrap();
        let prod = g.mul(a, db).unwrap();
        let loss = g.sum(prod).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[3.0, -1.0]);
        assert!(g.grad(b).is_none());
        assert!(g.grad(db).is_none());
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::new(&[1], vec![1e300]).unwrap()).unwrap();
        let err = g.scale(a, 1e300).unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite(_)));
    }
}
