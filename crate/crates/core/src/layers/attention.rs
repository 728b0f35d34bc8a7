//! Single-head scaled dot-product self-attention with a residual skip.

use super::{check_upstream, missing_cache, Layer};
use crate::error::{Error, Result};
use crate::gradset::GradientSet;
use crate::rng::SplitMix64;
use crate::tensor::{softmax, Scalar, Tensor};

/// `softmax(logits, rows) . v` — split out so the logit-shift invariance
/// can be tested directly.
pub(crate) fn attention_from_logits<T: Scalar>(
    logits: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    softmax(logits, 1)?.matmul(v)
}

struct SampleCache<T: Scalar> {
    x: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    attn: Tensor<T>,
}

/// Self-attention over `[n, tokens, d]` with learned Q/K/V projections,
/// 1/sqrt(d) scaling and `y = x + attn(x)`.
pub struct SelfAttention1H<T: Scalar> {
    dim: usize,
    wq: Tensor<T>,
    bq: Tensor<T>,
    wk: Tensor<T>,
    bk: Tensor<T>,
    wv: Tensor<T>,
    bv: Tensor<T>,
    cache: Option<Vec<SampleCache<T>>>,
}

impl<T: Scalar> SelfAttention1H<T> {
    pub fn new(dim: usize, rng: &mut SplitMix64) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        SelfAttention1H {
            dim,
            wq: Tensor::randn(&[dim, dim], std, rng),
            bq: Tensor::zeros(&[dim]),
            wk: Tensor::randn(&[dim, dim], std, rng),
            bk: Tensor::zeros(&[dim]),
            wv: Tensor::randn(&[dim, dim], std, rng),
            bv: Tensor::zeros(&[dim]),
            cache: None,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<(usize, usize)> {
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::Config(format!(
                "self-attention expects [n,tokens,{}], got {shape:?}",
                self.dim
            )));
        }
        Ok((shape[0], shape[1]))
    }

    fn project(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        super::basic::linear_forward(x, w, b)
    }
}

impl<T: Scalar> Layer<T> for SelfAttention1H<T> {
    fn kind(&self) -> &'static str {
        "self-attention-1h"
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, tokens) = self.check_input(x.shape())?;
        let d = self.dim;
        let scale = T::from_f64(1.0 / (d as f64).sqrt());
        let mut out = Vec::with_capacity(x.numel());
        let mut caches = Vec::with_capacity(n);
        for s in 0..n {
            let xs = Tensor::new(
                vec![tokens, d],
                x.data()[s * tokens * d..(s + 1) * tokens * d].to_vec(),
            )?;
            let q = Self::project(&xs, &self.wq, &self.bq)?;
            let k = Self::project(&xs, &self.wk, &self.bk)?;
            let v = Self::project(&xs, &self.wv, &self.bv)?;
            let logits = q.matmul(&k.transpose2()?)?.scale(scale);
            let attn = softmax(&logits, 1)?;
            let ctx = attn.matmul(&v)?;
            let y = xs.add(&ctx)?;
            out.extend_from_slice(y.data());
            caches.push(SampleCache {
                x: xs,
                q,
                k,
                v,
                attn,
            });
        }
        self.cache = Some(caches);
        Tensor::new(vec![n, tokens, d], out)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<(Tensor<T>, GradientSet<T>)> {
        let caches = self
            .cache
            .take()
            .ok_or_else(|| missing_cache("self-attention-1h"))?;
        let n = caches.len();
        let tokens = caches[0].x.shape()[0];
        let d = self.dim;
        check_upstream("self-attention backward", upstream, &[n, tokens, d])?;
        let scale = T::from_f64(1.0 / (d as f64).sqrt());

        let mut dx_all = Vec::with_capacity(upstream.numel());
        let zeros_w = Tensor::zeros(&[d, d]);
        let zeros_b = Tensor::zeros(&[d]);
        let (mut dwq, mut dbq) = (zeros_w.clone(), zeros_b.clone());
        let (mut dwk, mut dbk) = (zeros_w.clone(), zeros_b.clone());
        let (mut dwv, mut dbv) = (zeros_w, zeros_b);

        for (s, c) in caches.iter().enumerate() {
            let dy = Tensor::new(
                vec![tokens, d],
                upstream.data()[s * tokens * d..(s + 1) * tokens * d].to_vec(),
            )?;
            // y = x + A v
            let d_ctx = &dy;
            let d_attn = d_ctx.matmul(&c.v.transpose2()?)?;
            let dv = c.attn.transpose2()?.matmul(d_ctx)?;

            // Softmax rows: dS = A .* (dA - rowsum(dA .* A))
            let mut d_logits = vec![T::zero(); tokens * tokens];
            for i in 0..tokens {
                let mut dot = T::zero();
                for j in 0..tokens {
                    dot += d_attn.data()[i * tokens + j] * c.attn.data()[i * tokens + j];
                }
                for j in 0..tokens {
                    let idx = i * tokens + j;
                    d_logits[idx] = c.attn.data()[idx] * (d_attn.data()[idx] - dot);
                }
            }
            let d_logits = Tensor::new(vec![tokens, tokens], d_logits)?.scale(scale);

            let dq = d_logits.matmul(&c.k)?;
            let dk = d_logits.transpose2()?.matmul(&c.q)?;

            // Projections: p = x W + b
            let xs_t = c.x.transpose2()?;
            dwq.add_scaled(&xs_t.matmul(&dq)?, T::one())?;
            dwk.add_scaled(&xs_t.matmul(&dk)?, T::one())?;
            dwv.add_scaled(&xs_t.matmul(&dv)?, T::one())?;
            for t in 0..tokens {
                for j in 0..d {
                    dbq.data_mut()[j] += dq.data()[t * d + j];
                    dbk.data_mut()[j] += dk.data()[t * d + j];
                    dbv.data_mut()[j] += dv.data()[t * d + j];
                }
            }

            let mut dx = dy.clone(); // residual
            dx.add_scaled(&dq.matmul(&self.wq.transpose2()?)?, T::one())?;
            dx.add_scaled(&dk.matmul(&self.wk.transpose2()?)?, T::one())?;
            dx.add_scaled(&dv.matmul(&self.wv.transpose2()?)?, T::one())?;
            dx_all.extend_from_slice(dx.data());
        }

        let mut grads = GradientSet::new();
        grads.insert("Wq", dwq)?;
        grads.insert("bq", dbq)?;
        grads.insert("Wk", dwk)?;
        grads.insert("bk", dbk)?;
        grads.insert("Wv", dwv)?;
        grads.insert("bv", dbv)?;
        Ok((Tensor::new(vec![n, tokens, d], dx_all)?, grads))
    }

    fn params(&self) -> Vec<(String, Tensor<T>)> {
        vec![
            ("Wq".into(), self.wq.clone()),
            ("bq".into(), self.bq.clone()),
            ("Wk".into(), self.wk.clone()),
            ("bk".into(), self.bk.clone()),
            ("Wv".into(), self.wv.clone()),
            ("bv".into(), self.bv.clone()),
        ]
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        match name {
            "Wq" => Some(&mut self.wq),
            "bq" => Some(&mut self.bq),
            "Wk" => Some(&mut self.wk),
            "bk" => Some(&mut self.bk),
            "Wv" => Some(&mut self.wv),
            "bv" => Some(&mut self.bv),
            _ => None,
        }
    }

    fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        self.check_input(in_shape)?;
        Ok(in_shape.to_vec())
    }

    fn flops(&self, in_shape: &[usize]) -> u64 {
        let (n, tokens) = (in_shape[0], in_shape[1]);
        let d = self.dim;
        // Q/K/V projections + logits + context per sample.
        (n * (3 * tokens * d * d + 2 * tokens * tokens * d)) as u64
    }

    fn activation_elems(&self, in_shape: &[usize]) -> u64 {
        let (n, tokens) = (in_shape[0], in_shape[1]);
        let d = self.dim;
        (n * (4 * tokens * d + tokens * tokens)) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::finite_diff_check;

    #[test]
    fn single_token_is_residual_plus_v() {
        let mut rng = SplitMix64::new(8);
        let mut attn = SelfAttention1H::<f64>::new(3, &mut rng);
        let x = Tensor::new(vec![1, 1, 3], vec![0.3, -0.7, 1.1]).unwrap();
        let y = attn.forward(&x).unwrap();
        // softmax over one logit = 1, so y = x + (x Wv + bv)
        let xs = x.reshape(&[1, 3]).unwrap();
        let v = super::super::basic::linear_forward(&xs, &attn.wv, &attn.bv).unwrap();
        for j in 0..3 {
            assert!((y.data()[j] - (x.data()[j] + v.data()[j])).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_v_projection_is_identity() {
        let mut rng = SplitMix64::new(9);
        let mut attn = SelfAttention1H::<f64>::new(4, &mut rng);
        *attn.param_mut("Wv").unwrap() = Tensor::zeros(&[4, 4]);
        let x = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
        let y = attn.forward(&x).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn two_token_case_matches_formula_oracle() {
        // Direct evaluation of softmax(QK^T/sqrt(d)) V + X with explicit
        // scalar arithmetic.
        let mut rng = SplitMix64::new(10);
        let d = 2;
        let mut attn = SelfAttention1H::<f64>::new(d, &mut rng);
        let x = Tensor::<f64>::randn(&[1, 2, d], 1.0, &mut rng);
        let y = attn.forward(&x).unwrap();

        let xs = x.reshape(&[2, d]).unwrap();
        let q = super::super::basic::linear_forward(&xs, &attn.wq, &attn.bq).unwrap();
        let k = super::super::basic::linear_forward(&xs, &attn.wk, &attn.bk).unwrap();
        let v = super::super::basic::linear_forward(&xs, &attn.wv, &attn.bv).unwrap();
        let scale = 1.0 / (d as f64).sqrt();
        for i in 0..2 {
            let mut logits = [0.0; 2];
            for j in 0..2 {
                let mut s = 0.0;
                for a in 0..d {
                    s += q.at(&[i, a]) * k.at(&[j, a]);
                }
                logits[j] = s * scale;
            }
            let m = logits[0].max(logits[1]);
            let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
            let z = e[0] + e[1];
            for a in 0..d {
                let want =
                    xs.at(&[i, a]) + (e[0] / z) * v.at(&[0, a]) + (e[1] / z) * v.at(&[1, a]);
                assert!((y.at(&[0, i, a]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logit_shift_invariance() {
        let mut rng = SplitMix64::new(11);
        let logits = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let shifted = logits.map(|x| x + 42.0);
        let a = attention_from_logits(&logits, &v).unwrap();
        let b = attention_from_logits(&shifted, &v).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn attention_passes_finite_difference() {
        let mut rng = SplitMix64::new(12);
        let mut attn = SelfAttention1H::<f64>::new(3, &mut rng);
        let x = Tensor::<f64>::randn(&[2, 4, 3], 1.0, &mut rng);
        let err = finite_diff_check(&mut attn, &x, 1e-5).unwrap();
        assert!(err < 1e-5, "attention fd err {err}");
    }
}
