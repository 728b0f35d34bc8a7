//! Linear, 1x1 convolution, GELU, softmax, flatten and patch embedding.

use super::{check_upstream, missing_cache, Layer};
use crate::error::{Error, Result};
use crate::gradset::GradientSet;
use crate::rng::SplitMix64;
use crate::tensor::{softmax, Scalar, Tensor};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// `out = x W + b` with `b` broadcast over rows. `x` may carry leading
/// batch axes; the last axis must equal `W`'s first.
pub fn linear_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (rows, d_in) = x.as_rows();
    if w.ndim() != 2 || w.shape()[0] != d_in {
        return Err(Error::shape("linear_forward", x.shape(), w.shape()));
    }
    let d_out = w.shape()[1];
    if b.shape() != [d_out] {
        return Err(Error::shape("linear_forward bias", b.shape(), &[d_out]));
    }
    let x2 = x.reshape(&[rows, d_in])?;
    let mut y = x2.matmul(w)?;
    for r in 0..rows {
        for (o, &bv) in y.data_mut()[r * d_out..(r + 1) * d_out]
            .iter_mut()
            .zip(b.data())
        {
            *o += bv;
        }
    }
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = d_out;
    y.reshape(&out_shape)
}

/// Exact-erf GELU: `0.5 x (1 + erf(x / sqrt(2)))`.
pub fn gelu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64(0.5);
    x.map(|v| half * v * (T::one() + (v * T::from_f64(INV_SQRT_2)).erf()))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::from_f64(0.5) * (T::one() + (x * T::from_f64(INV_SQRT_2)).erf());
    let pdf = T::from_f64((-0.5 * x.to_f64() * x.to_f64()).exp() / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Fully connected layer over the last axis.
pub struct Linear<T: Scalar> {
    w: Tensor<T>,
    b: Tensor<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut SplitMix64) -> Self {
        Linear {
            w: Tensor::randn(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng),
            b: Tensor::zeros(&[d_out]),
            cache: None,
        }
    }

    pub fn from_parts(w: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        if w.ndim() != 2 || b.shape() != [w.shape()[1]] {
            return Err(Error::shape("Linear::from_parts", w.shape(), b.shape()));
        }
        Ok(Linear { w, b, cache: None })
    }

    fn dims(&self) -> (usize, usize) {
        (self.w.shape()[0], self.w.shape()[1])
    }
}

impl<T: Scalar> Layer<T> for Linear<T> {
    fn kind(&self) -> &'static str {
        "linear"
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = linear_forward(x, &self.w, &self.b)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<(Tensor<T>, GradientSet<T>)> {
        let x = self.cache.take().ok_or_else(|| missing_cache("linear"))?;
        let (d_in, d_out) = self.dims();
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = d_out;
        check_upstream("linear backward", upstream, &out_shape)?;

        let rows = x.numel() / d_in;
        let x2 = x.reshape(&[rows, d_in])?;
        let dy = upstream.reshape(&[rows, d_out])?;

        let dw = x2.transpose2()?.matmul(&dy)?;
        let mut db = Tensor::zeros(&[d_out]);
        for r in 0..rows {
            for (acc, &g) in db.data_mut().iter_mut().zip(&dy.data()[r * d_out..(r + 1) * d_out]) {
                *acc += g;
            }
        }
        let dx = dy.matmul(&self.w.transpose2()?)?.reshape(x.shape())?;

        let mut grads = GradientSet::new();
        grads.insert("W", dw)?;
        grads.insert("b", db)?;
        Ok((dx, grads))
    }

    fn params(&self) -> Vec<(String, Tensor<T>)> {
        vec![("W".into(), self.w.clone()), ("b".into(), self.b.clone())]
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        match name {
            "W" => Some(&mut self.w),
            "b" => Some(&mut self.b),
            _ => None,
        }
    }

    fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        let (d_in, d_out) = self.dims();
        if in_shape.last() != Some(&d_in) {
            return Err(Error::shape("linear", in_shape, self.w.shape()));
        }
        let mut out = in_shape.to_vec();
        *out.last_mut().unwrap() = d_out;
        Ok(out)
    }

    fn flops(&self, in_shape: &[usize]) -> u64 {
        let (d_in, d_out) = self.dims();
        let rows: usize = in_shape.iter().product::<usize>() / d_in;
        (rows * d_in * d_out + rows * d_out) as u64
    }
}

/// Pointwise (1x1) convolution over NCHW feature maps.
pub struct Conv1x1<T: Scalar> {
    w: Tensor<T>, // [c_in, c_out]
    b: Tensor<T>,
    cache: Option<Tensor<T>>, // channels-last input rows [n*h*w, c_in]
    in_shape: Vec<usize>,
}

fn nchw_to_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.ndim() != 4 {
        return Err(Error::shape("conv1x1 input", x.shape(), &[0, 0, 0, 0]));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let mut data = vec![T::zero(); x.numel()];
    for ni in 0..n {
        for ci in 0..c {
            let src = &x.data()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            for (p, &v) in src.iter().enumerate() {
                data[(ni * hw + p) * c + ci] = v;
            }
        }
    }
    Tensor::new(vec![n * hw, c], data)
}

fn rows_to_nchw<T: Scalar>(rows: &Tensor<T>, n: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let c = rows.shape()[1];
    let hw = h * w;
    let mut data = vec![T::zero(); rows.numel()];
    for ni in 0..n {
        for ci in 0..c {
            for p in 0..hw {
                data[(ni * c + ci) * hw + p] = rows.data()[(ni * hw + p) * c + ci];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], data)
}

impl<T: Scalar> Conv1x1<T> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut SplitMix64) -> Self {
        Conv1x1 {
            w: Tensor::randn(&[c_in, c_out], 1.0 / (c_in as f64).sqrt(), rng),
            b: Tensor::zeros(&[c_out]),
            cache: None,
            in_shape: Vec::new(),
        }
    }

    pub fn identity(c: usize) -> Self {
        Conv1x1 {
            w: Tensor::from_fn(&[c, c], |i| {
                if i / c == i % c {
                    T::one()
                } else {
                    T::zero()
                }
            }),
            b: Tensor::zeros(&[c]),
            cache: None,
            in_shape: Vec::new(),
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.w.shape()[0], self.w.shape()[1])
    }
}

impl<T: Scalar> Layer<T> for Conv1x1<T> {
    fn kind(&self) -> &'static str {
        "conv1x1"
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (c_in, _) = self.dims();
        if x.ndim() != 4 || x.shape()[1] != c_in {
            return Err(Error::Config(format!(
                "conv1x1 expects [n,{c_in},h,w], got {:?}",
                x.shape()
            )));
        }
        let rows = nchw_to_rows(x)?;
        let y = linear_forward(&rows, &self.w, &self.b)?;
        let out = rows_to_nchw(&y, x.shape()[0], x.shape()[2], x.shape()[3])?;
        self.in_shape = x.shape().to_vec();
        self.cache = Some(rows);
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<(Tensor<T>, GradientSet<T>)> {
        let rows = self.cache.take().ok_or_else(|| missing_cache("conv1x1"))?;
        let (_, c_out) = self.dims();
        let mut out_shape = self.in_shape.clone();
        out_shape[1] = c_out;
        check_upstream("conv1x1 backward", upstream, &out_shape)?;

        let dy = nchw_to_rows(upstream)?;
        let dw = rows.transpose2()?.matmul(&dy)?;
        let mut db = Tensor::zeros(&[c_out]);
        for r in 0..dy.shape()[0] {
            for (acc, &g) in db
                .data_mut()
                .iter_mut()
                .zip(&dy.data()[r * c_out..(r + 1) * c_out])
            {
                *acc += g;
            }
        }
        let dx_rows = dy.matmul(&self.w.transpose2()?)?;
        let dx = rows_to_nchw(&dx_rows, self.in_shape[0], self.in_shape[2], self.in_shape[3])?;

        let mut grads = GradientSet::new();
        grads.insert("W", dw)?;
        grads.insert("b", db)?;
        Ok((dx, grads))
    }

    fn params(&self) -> Vec<(String, Tensor<T>)> {
        vec![("W".into(), self.w.clone()), ("b".into(), self.b.clone())]
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        match name {
            "W" => Some(&mut self.w),
            "b" => Some(&mut self.b),
            _ => None,
        }
    }

    fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        let (c_in, c_out) = self.dims();
        if in_shape.len() != 4 || in_shape[1] != c_in {
            return Err(Error::shape("conv1x1", in_shape, self.w.shape()));
        }
        Ok(vec![in_shape[0], c_out, in_shape[2], in_shape[3]])
    }

    fn flops(&self, in_shape: &[usize]) -> u64 {
        let (c_in, c_out) = self.dims();
        let pixels = in_shape[0] * in_shape[2] * in_shape[3];
        (pixels * c_in * c_out + pixels * c_out) as u64
    }
}

/// Elementwise exact-erf GELU.
#[derive(Default)]
pub struct Gelu<T: Scalar> {
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Gelu<T> {
    pub fn new() -> Self {
        Gelu { cache: None }
    }
}

impl<T: Scalar> Layer<T> for Gelu<T> {
    fn kind(&self) -> &'static str {
        "gelu"
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.cache = Some(x.clone());
        Ok(gelu_forward(x))
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<(Tensor<T>, GradientSet<T>)> {
        let x = self.cache.take().ok_or_else(|| missing_cache("gelu"))?;
        check_upstream("gelu backward", upstream, x.shape())?;
        let dx = x.zip_map(upstream, |xv, g| g * gelu_grad(xv))?;
        Ok((dx, GradientSet::new()))
    }

    fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        Ok(in_shape.to_vec())
    }

    fn flops(&self, in_shape: &[usize]) -> u64 {
        in_shape.iter().product::<usize>() as u64
    }
}

/// Softmax along a fixed axis, as a layer.
pub struct SoftmaxLayer<T: Scalar> {
    axis: usize,
    cache: Option<Tensor<T>>, // forward output
}

impl<T: Scalar> SoftmaxLayer<T> {
    pub fn new(axis: usize) -> Self {
        SoftmaxLayer { axis, cache: None }
    }
}

impl<T: Scalar> Layer<T> for SoftmaxLayer<T> {
    fn kind(&self) -> &'static str {
        "softmax"
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = softmax(x, self.axis)?;
        self.cache = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<(Tensor<T>, GradientSet<T>)> {
        let y = self.cache.take().ok_or_else(|| missing_cache("softmax"))?;
        check_upstream("softmax backward", upstream, y.shape())?;
        // dx = y .* (dy - sum(dy .* y, axis))
        let shape = y.shape().to_vec();
        let axis_len = shape[self.axis];
        let inner: usize = shape[self.axis + 1..].iter().product();
        let outer: usize = shape[..self.axis].iter().product();
        let mut dx = vec![T::zero(); y.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut dot = T::zero();
                for a in 0..axis_len {
                    let idx = base + a * inner;
                    dot += upstream.data()[idx] * y.data()[idx];
                }
                for a in 0..axis_len {
                    let idx = base + a * inner;
                    dx[idx] = y.data()[idx] * (upstream.data()[idx] - dot);
                }
            }
        }
        Ok((Tensor::new(shape, dx)?, GradientSet::new()))
    }

    fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        Ok(in_shape.to_vec())
    }

    fn flops(&self, in_shape: &[usize]) -> u64 {
        3 * in_shape.iter().product::<usize>() as u64
    }
}

/// Merge all axes from `from_axis` onward into one.
pub struct Flatten {
    from_axis: usize,
    in_shape: Vec<usize>,
}

impl Flatten {
    pub fn new(from_axis: usize) -> Self {
        Flatten {
            from_axis,
            in_shape: Vec::new(),
        }
    }

    fn merged(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        if self.from_axis >= in_shape.len() {
            return Err(Error::Config(format!(
                "flatten axis {} out of range for {in_shape:?}",
                self.from_axis
            )));
        }
        let mut out = in_shape[..self.from_axis].to_vec();
        out.push(in_shape[self.from_axis..].iter().product());
        Ok(out)
    }
}

impl<T: Scalar> Layer<T> for Flatten {
    fn kind(&self) -> &'static str {
        "flatten"
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out_shape = self.merged(x.shape())?;
        self.in_shape = x.shape().to_vec();
        x.reshape(&out_shape)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<(Tensor<T>, GradientSet<T>)> {
        if self.in_shape.is_empty() {
            return Err(missing_cache("flatten"));
        }
        Ok((upstream.reshape(&self.in_shape)?, GradientSet::new()))
    }

    fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        self.merged(in_shape)
    }

    fn activation_elems(&self, _in_shape: &[usize]) -> u64 {
        0
    }
}

/// Non-overlapping PxP patch extraction followed by a linear projection;
/// equivalent to a strided convolution with stride P.
pub struct PatchEmbed<T: Scalar> {
    patch: usize,
    channels: usize,
    w: Tensor<T>, // [C*P*P, d]
    cache: Option<Tensor<T>>, // im2col rows [n*tokens, C*P*P]
    in_shape: Vec<usize>,
}

/// Row-major im2col over non-overlapping patches: token (ph,pw) yields the
/// flattened (c, i, j) patch vector.
fn im2col<T: Scalar>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!(
            "spatial size {h}x{w} not divisible by patch size {p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let patch_len = c * p * p;
    let mut data = Vec::with_capacity(n * gh * gw * patch_len);
    for ni in 0..n {
        for ph in 0..gh {
            for pw in 0..gw {
                for ci in 0..c {
                    for i in 0..p {
                        let row = ph * p + i;
                        let base = ((ni * c + ci) * h + row) * w + pw * p;
                        data.extend_from_slice(&x.data()[base..base + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![n * gh * gw, patch_len], data)
}

/// Stateless patch embedding: im2col then projection by `w_e`.
pub fn patch_embed_forward<T: Scalar>(
    x: &Tensor<T>,
    patch: usize,
    w_e: &Tensor<T>,
) -> Result<Tensor<T>> {
    if x.ndim() != 4 {
        return Err(Error::shape("patch_embed_forward", x.shape(), &[0; 4]));
    }
    let cols = im2col(x, patch)?;
    if w_e.ndim() != 2 || w_e.shape()[0] != cols.shape()[1] {
        return Err(Error::shape("patch_embed_forward", cols.shape(), w_e.shape()));
    }
    let y = cols.matmul(w_e)?;
    let n = x.shape()[0];
    let tokens = cols.shape()[0] / n;
    y.reshape(&[n, tokens, w_e.shape()[1]])
}

impl<T: Scalar> PatchEmbed<T> {
    pub fn new(channels: usize, patch: usize, embed_dim: usize, rng: &mut SplitMix64) -> Self {
        let patch_len = channels * patch * patch;
        PatchEmbed {
            patch,
            channels,
            w: Tensor::randn(&[patch_len, embed_dim], 1.0 / (patch_len as f64).sqrt(), rng),
            cache: None,
            in_shape: Vec::new(),
        }
    }

    pub fn from_weight(channels: usize, patch: usize, w: Tensor<T>) -> Result<Self> {
        if w.ndim() != 2 || w.shape()[0] != channels * patch * patch {
            return Err(Error::shape("PatchEmbed::from_weight", w.shape(), &[channels * patch * patch, 0]));
        }
        Ok(PatchEmbed {
            patch,
            channels,
            w,
            cache: None,
            in_shape: Vec::new(),
        })
    }
}

impl<T: Scalar> Layer<T> for PatchEmbed<T> {
    fn kind(&self) -> &'static str {
        "patch-embed"
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.ndim() != 4 || x.shape()[1] != self.channels {
            return Err(Error::Config(format!(
                "patch-embed expects [n,{},h,w], got {:?}",
                self.channels,
                x.shape()
            )));
        }
        let cols = im2col(x, self.patch)?;
        let y = cols.matmul(&self.w)?;
        let n = x.shape()[0];
        let tokens = cols.shape()[0] / n;
        self.in_shape = x.shape().to_vec();
        self.cache = Some(cols);
        y.reshape(&[n, tokens, self.w.shape()[1]])
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<(Tensor<T>, GradientSet<T>)> {
        let cols = self.cache.take().ok_or_else(|| missing_cache("patch-embed"))?;
        let d = self.w.shape()[1];
        let rows = cols.shape()[0];
        let n = self.in_shape[0];
        check_upstream("patch-embed backward", upstream, &[n, rows / n, d])?;

        let dy = upstream.reshape(&[rows, d])?;
        let dw = cols.transpose2()?.matmul(&dy)?;
        let dcols = dy.matmul(&self.w.transpose2()?)?;

        // Fold im2col gradient back into the NCHW image (patches are
        // disjoint, so this is a pure scatter).
        let (c, h, w) = (self.in_shape[1], self.in_shape[2], self.in_shape[3]);
        let p = self.patch;
        let (gh, gw) = (h / p, w / p);
        let mut dx = Tensor::zeros(&self.in_shape);
        let mut row_idx = 0;
        for ni in 0..n {
            for ph in 0..gh {
                for pw in 0..gw {
                    let row = &dcols.data()[row_idx * c * p * p..(row_idx + 1) * c * p * p];
                    let mut k = 0;
                    for ci in 0..c {
                        for i in 0..p {
                            let base = ((ni * c + ci) * h + ph * p + i) * w + pw * p;
                            for j in 0..p {
                                dx.data_mut()[base + j] = row[k];
                                k += 1;
                            }
                        }
                    }
                    row_idx += 1;
                }
            }
        }

        let mut grads = GradientSet::new();
        grads.insert("W", dw)?;
        Ok((dx, grads))
    }

    fn params(&self) -> Vec<(String, Tensor<T>)> {
        vec![("W".into(), self.w.clone())]
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        (name == "W").then_some(&mut self.w)
    }

    fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        if in_shape.len() != 4 || in_shape[1] != self.channels {
            return Err(Error::shape("patch-embed", in_shape, self.w.shape()));
        }
        let p = self.patch;
        if in_shape[2] % p != 0 || in_shape[3] % p != 0 {
            return Err(Error::Config(format!(
                "spatial size {}x{} not divisible by patch size {p}",
                in_shape[2], in_shape[3]
            )));
        }
        Ok(vec![
            in_shape[0],
            (in_shape[2] / p) * (in_shape[3] / p),
            self.w.shape()[1],
        ])
    }

    fn flops(&self, in_shape: &[usize]) -> u64 {
        let p = self.patch;
        let tokens = (in_shape[2] / p) * (in_shape[3] / p) * in_shape[0];
        (tokens * self.w.shape()[0] * self.w.shape()[1]) as u64
    }
}
