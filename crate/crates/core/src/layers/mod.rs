//! Differentiable layer kernels with hand-derived backward passes.
//!
//! There is no autodiff graph: each layer caches what its own backward
//! needs, and composition is an explicit chain. This keeps the split
//! protocol's gradient handoff (client sends the upstream gradient, the
//! server continues the chain) a plain function call on either side.

mod attention;
mod basic;

pub use attention::SelfAttention1H;
pub use basic::{
    gelu_forward, linear_forward, patch_embed_forward, Conv1x1, Flatten, Gelu, Linear, PatchEmbed,
    SoftmaxLayer,
};

use crate::error::{Error, Result};
use crate::gradset::GradientSet;
use crate::rng::SplitMix64;
use crate::tensor::{softmax, Scalar, Tensor};

/// A differentiable block with named parameters and a forward cache.
///
/// `backward` may only be called after a matching `forward`; it consumes
/// the cache, returns the gradient w.r.t. the input and the gradients for
/// every parameter (same names and shapes as `params`).
pub trait Layer<T: Scalar>: Send {
    fn kind(&self) -> &'static str;

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>>;

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<(Tensor<T>, GradientSet<T>)>;

    fn params(&self) -> Vec<(String, Tensor<T>)> {
        Vec::new()
    }

    fn param_mut(&mut self, _name: &str) -> Option<&mut Tensor<T>> {
        None
    }

    /// Output shape for a given input shape (used by resource accounting).
    fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>>;

    /// Multiply-accumulate count of one forward pass on `in_shape`.
    fn flops(&self, _in_shape: &[usize]) -> u64 {
        0
    }

    /// Elements cached for backward by one forward pass on `in_shape`.
    fn activation_elems(&self, in_shape: &[usize]) -> u64 {
        in_shape.iter().product::<usize>() as u64
    }
}

impl<T: Scalar> dyn Layer<T> + '_ {
    pub fn param_count(&self) -> u64 {
        self.params().iter().map(|(_, t)| t.numel() as u64).sum()
    }
}

pub(crate) fn missing_cache(kind: &str) -> Error {
    Error::State(format!("{kind}: backward called without a cached forward"))
}

pub(crate) fn check_upstream<T: Scalar>(
    kind: &'static str,
    upstream: &Tensor<T>,
    out_shape: &[usize],
) -> Result<()> {
    if upstream.shape() != out_shape {
        return Err(Error::shape(kind, upstream.shape(), out_shape));
    }
    Ok(())
}

/// Sequential composition of layers. Parameter names are prefixed with the
/// layer position, e.g. `"2.W"`.
pub struct Stack<T: Scalar> {
    layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Scalar> Stack<T> {
    pub fn new(layers: Vec<Box<dyn Layer<T>>>) -> Self {
        Stack { layers }
    }

    pub fn empty() -> Self {
        Stack { layers: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[Box<dyn Layer<T>>] {
        &self.layers
    }

    /// Apply a plain SGD update `p -= lr * g` for every named gradient.
    pub fn apply_grads(&mut self, grads: &GradientSet<T>, lr: T) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = self
                .param_mut(name)
                .ok_or_else(|| Error::State(format!("unknown parameter {name}")))?;
            p.add_scaled(g, T::zero() - lr)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Layer<T> for Stack<T> {
    fn kind(&self) -> &'static str {
        "stack"
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<(Tensor<T>, GradientSet<T>)> {
        let mut grads = GradientSet::new();
        let mut cur = upstream.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let (dx, layer_grads) = layer.backward(&cur)?;
            for (name, g) in layer_grads.iter() {
                grads.insert(format!("{i}.{name}"), g.clone())?;
            }
            cur = dx;
        }
        // Re-emit in forward order so schemas are stable.
        let mut ordered = GradientSet::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, _) in layer.params() {
                let key = format!("{i}.{name}");
                if let Some(g) = grads.get(&key) {
                    ordered.insert(key, g.clone())?;
                }
            }
        }
        Ok((cur, ordered))
    }

    fn params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.params() {
                out.push((format!("{i}.{name}"), t));
            }
        }
        out
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let (idx, rest) = name.split_once('.')?;
        let idx: usize = idx.parse().ok()?;
        self.layers.get_mut(idx)?.param_mut(rest)
    }

    fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        let mut shape = in_shape.to_vec();
        for layer in &self.layers {
            shape = layer.out_shape(&shape)?;
        }
        Ok(shape)
    }

    fn flops(&self, in_shape: &[usize]) -> u64 {
        let mut shape = in_shape.to_vec();
        let mut total = 0;
        for layer in &self.layers {
            total += layer.flops(&shape);
            shape = match layer.out_shape(&shape) {
                Ok(s) => s,
                Err(_) => return total,
            };
        }
        total
    }

    fn activation_elems(&self, in_shape: &[usize]) -> u64 {
        let mut shape = in_shape.to_vec();
        let mut total = 0;
        for layer in &self.layers {
            total += layer.activation_elems(&shape);
            shape = match layer.out_shape(&shape) {
                Ok(s) => s,
                Err(_) => return total,
            };
        }
        total
    }
}

/// Mean squared error over all elements: `(loss, dloss/dpred)`.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mse_loss", pred.shape(), target.shape()));
    }
    let n = pred.numel() as f64;
    let mut loss = 0.0f64;
    let mut grad = Vec::with_capacity(pred.numel());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p - t;
        loss += d.to_f64() * d.to_f64();
        grad.push(T::from_f64(2.0 / n) * d);
    }
    Ok((loss / n, Tensor::new(pred.shape().to_vec(), grad)?))
}

/// Cross entropy over rows of `logits`: `(loss, dloss/dlogits)`.
/// Labels must lie in `[0, classes)`.
pub fn cross_entropy_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    if logits.ndim() != 2 {
        return Err(Error::shape("cross_entropy_loss", logits.shape(), &[0, 0]));
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::shape("cross_entropy_loss", &[labels.len()], &[n]));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::Data(format!(
                "label {l} out of range [0,{c}) at row {i}"
            )));
        }
    }
    let probs = softmax(logits, 1)?;
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut loss = 0.0f64;
    let mut grad = probs.data().to_vec();
    for (i, &l) in labels.iter().enumerate() {
        let p = probs.data()[i * c + l];
        loss -= p.to_f64().ln();
        grad[i * c + l] -= T::one();
    }
    for g in &mut grad {
        *g *= inv_n;
    }
    Ok((loss / n as f64, Tensor::new(vec![n, c], grad)?))
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Central-difference check of a layer's backward pass.
///
/// Probes the scalar objective `J = sum(U .* forward(x))` for a fixed
/// random `U`, compares the analytic input and parameter gradients against
/// central differences and returns the maximum relative error.
pub fn finite_diff_check<T: Scalar>(
    layer: &mut dyn Layer<T>,
    x: &Tensor<T>,
    eps: f64,
) -> Result<f64> {
    let y0 = layer.forward(x)?;
    let mut rng = SplitMix64::derive(0xFDC4EC, &[y0.numel() as u64]);
    let probe = Tensor::<T>::randn(y0.shape(), 1.0, &mut rng);

    let objective = |y: &Tensor<T>| -> f64 {
        y.data()
            .iter()
            .zip(probe.data())
            .map(|(&a, &b)| a.to_f64() * b.to_f64())
            .sum()
    };

    let (dx, dparams) = layer.backward(&probe)?;
    let mut max_err = 0.0f64;

    // Inputs.
    let mut xp = x.clone();
    for i in 0..x.numel() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + T::from_f64(eps);
        let plus = objective(&layer.forward(&xp)?);
        xp.data_mut()[i] = orig - T::from_f64(eps);
        let minus = objective(&layer.forward(&xp)?);
        xp.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        max_err = max_err.max(rel_err(dx.data()[i].to_f64(), numeric));
    }

    // Parameters.
    let names: Vec<String> = layer.params().into_iter().map(|(n, _)| n).collect();
    for name in names {
        let count = layer
            .param_mut(&name)
            .ok_or_else(|| Error::State(format!("param_mut missing for {name}")))?
            .numel();
        for i in 0..count {
            let orig = {
                let p = layer.param_mut(&name).unwrap();
                let orig = p.data()[i];
                p.data_mut()[i] = orig + T::from_f64(eps);
                orig
            };
            let plus = objective(&layer.forward(x)?);
            layer.param_mut(&name).unwrap().data_mut()[i] = orig - T::from_f64(eps);
            let minus = objective(&layer.forward(x)?);
            layer.param_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = dparams
                .get(&name)
                .ok_or_else(|| Error::State(format!("backward returned no grad for {name}")))?
                .data()[i]
                .to_f64();
            max_err = max_err.max(rel_err(analytic, numeric));
        }
    }

    // Leave the layer with a fresh cache for the original input.
    layer.forward(x)?;
    Ok(max_err)
}

/// Central-difference check of a scalar loss function `x -> (loss, grad)`.
pub fn finite_diff_check_fn<T: Scalar>(
    f: impl Fn(&Tensor<T>) -> Result<(f64, Tensor<T>)>,
    x: &Tensor<T>,
    eps: f64,
) -> Result<f64> {
    let (_, grad) = f(x)?;
    let mut xp = x.clone();
    let mut max_err = 0.0f64;
    for i in 0..x.numel() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + T::from_f64(eps);
        let (plus, _) = f(&xp)?;
        xp.data_mut()[i] = orig - T::from_f64(eps);
        let (minus, _) = f(&xp)?;
        xp.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        max_err = max_err.max(rel_err(grad.data()[i].to_f64(), numeric));
    }
    Ok(max_err)
}
