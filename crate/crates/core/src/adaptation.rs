//! Task adaptation: channel reduction, 1x1 mixing, GELU, deformable grid
//! sampling and intra-task self-attention.
//!
//! The deformable stage follows the deformable-convolution scheme: for
//! every reference position a small regular kernel grid is sampled at
//! learned fractional offsets, values are read by bilinear interpolation
//! with zero padding outside the map, and the weighted sum forms the
//! output feature for that position.

use crate::error::{Error, Result};
use crate::gradset::GradientSet;
use crate::layers::{
    check_upstream, gelu_forward, missing_cache, Conv1x1, Layer, Linear, SelfAttention1H,
};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};

/// Sampling description for one output position: integer reference points
/// `p + r` for each kernel slot, learned fractional offsets and per-slot
/// weights. Offsets are unbounded; reads outside the map contribute zero.
#[derive(Debug, Clone)]
pub struct DeformableGrid<T: Scalar> {
    pub points: Vec<(i64, i64)>, // (row, col)
    pub offsets: Tensor<T>,      // [k, 2] as (dy, dx)
    pub weights: Tensor<T>,      // [k]
}

impl<T: Scalar> DeformableGrid<T> {
    pub fn new(points: Vec<(i64, i64)>, offsets: Tensor<T>, weights: Tensor<T>) -> Result<Self> {
        let k = points.len();
        if offsets.shape() != [k, 2] || weights.shape() != [k] {
            return Err(Error::Config(format!(
                "deformable grid arity mismatch: {k} points, offsets {:?}, weights {:?}",
                offsets.shape(),
                weights.shape()
            )));
        }
        if !offsets.all_finite() {
            return Err(Error::Numeric("non-finite deformable offsets".into()));
        }
        Ok(DeformableGrid {
            points,
            offsets,
            weights,
        })
    }
}

#[inline]
fn floor_i(v: f64) -> i64 {
    v.floor() as i64
}

/// Bilinear read of `x[c]` at fractional position (y, x); zero outside
/// `[0,h) x [0,w)`. Returns the four corner taps so backward can reuse them.
fn bilinear_taps(h: i64, w: i64, y: f64, xq: f64) -> [(i64, i64, f64); 4] {
    let (y0, x0) = (floor_i(y), floor_i(xq));
    let (fy, fx) = (y - y0 as f64, xq - x0 as f64);
    [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x0 + 1, (1.0 - fy) * fx),
        (y0 + 1, x0, fy * (1.0 - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    ]
    .map(|(yy, xx, wgt)| {
        if yy < 0 || yy >= h || xx < 0 || xx >= w {
            (yy, xx, 0.0) // zero padding: tap dropped
        } else {
            (yy, xx, wgt)
        }
    })
}

/// Weighted deformable sampling of a `[c,h,w]` map for one grid:
/// `out = sum_k weights[k] * x(points[k] + offsets[k])` per channel.
pub fn deformable_sample<T: Scalar>(x: &Tensor<T>, grid: &DeformableGrid<T>) -> Result<Tensor<T>> {
    if x.ndim() != 3 {
        return Err(Error::shape("deformable_sample", x.shape(), &[0, 0, 0]));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![T::zero(); c];
    for (k, &(py, px)) in grid.points.iter().enumerate() {
        let dy = grid.offsets.data()[k * 2].to_f64();
        let dx = grid.offsets.data()[k * 2 + 1].to_f64();
        let taps = bilinear_taps(h as i64, w as i64, py as f64 + dy, px as f64 + dx);
        let wk = grid.weights.data()[k];
        for (yy, xx, tap) in taps {
            if tap == 0.0 {
                continue;
            }
            let tap = T::from_f64(tap);
            for (ci, o) in out.iter_mut().enumerate() {
                let v = x.data()[(ci * h + yy as usize) * w + xx as usize];
                *o += wk * tap * v;
            }
        }
    }
    Tensor::new(vec![c], out)
}

/// Gradients of [`deformable_sample`] w.r.t. the input map, the offsets and
/// the weights. Offset gradients use the right-limit subgradient of the
/// bilinear kernel at integer positions (floor semantics).
pub fn deformable_sample_backward<T: Scalar>(
    x: &Tensor<T>,
    grid: &DeformableGrid<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    check_upstream("deformable backward", upstream, &[c])?;
    let (hi, wi) = (h as i64, w as i64);
    let mut dx = Tensor::zeros(x.shape());
    let mut d_off = Tensor::zeros(&[grid.points.len(), 2]);
    let mut d_wgt = Tensor::zeros(&[grid.points.len()]);

    let read = |yy: i64, xx: i64, ci: usize| -> f64 {
        if yy < 0 || yy >= hi || xx < 0 || xx >= wi {
            0.0
        } else {
            x.data()[(ci * h + yy as usize) * w + xx as usize].to_f64()
        }
    };

    for (k, &(py, px)) in grid.points.iter().enumerate() {
        let dyk = grid.offsets.data()[k * 2].to_f64();
        let dxk = grid.offsets.data()[k * 2 + 1].to_f64();
        let (yq, xq) = (py as f64 + dyk, px as f64 + dxk);
        let (y0, x0) = (floor_i(yq), floor_i(xq));
        let (fy, fx) = (yq - y0 as f64, xq - x0 as f64);
        let wk = grid.weights.data()[k].to_f64();
        let taps = bilinear_taps(hi, wi, yq, xq);

        let mut dk_weight = 0.0f64;
        let mut dk_y = 0.0f64;
        let mut dk_x = 0.0f64;
        for ci in 0..c {
            let up = upstream.data()[ci].to_f64();
            // Input gradient through the live taps.
            for (yy, xx, tap) in taps {
                if tap == 0.0 {
                    continue;
                }
                let idx = (ci * h + yy as usize) * w + xx as usize;
                let cur = dx.data()[idx].to_f64();
                dx.data_mut()[idx] = T::from_f64(cur + up * wk * tap);
            }
            let v00 = read(y0, x0, ci);
            let v01 = read(y0, x0 + 1, ci);
            let v10 = read(y0 + 1, x0, ci);
            let v11 = read(y0 + 1, x0 + 1, ci);
            let sampled = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                + fy * ((1.0 - fx) * v10 + fx * v11);
            dk_weight += up * sampled;
            // d(sampled)/dy and /dx of the bilinear surface.
            dk_y += up * wk * (((1.0 - fx) * v10 + fx * v11) - ((1.0 - fx) * v00 + fx * v01));
            dk_x += up * wk * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
        }
        d_wgt.data_mut()[k] = T::from_f64(dk_weight);
        d_off.data_mut()[k * 2] = T::from_f64(dk_y);
        d_off.data_mut()[k * 2 + 1] = T::from_f64(dk_x);
    }
    Ok((dx, d_off, d_wgt))
}

/// Kernel slot displacements for a `g x g` regular grid centred on the
/// reference position (g=3 gives the classic 3x3 neighbourhood).
pub fn regular_kernel(g: usize) -> Vec<(i64, i64)> {
    let half = (g as i64 - 1) / 2;
    let mut out = Vec::with_capacity(g * g);
    for i in 0..g as i64 {
        for j in 0..g as i64 {
            out.push((i - half, j - half));
        }
    }
    out
}

/// Sizing for the adaptation module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationConfig {
    pub in_channels: usize,
    pub reduced_channels: usize,
    pub attention_dim: usize,
    pub grid_size: usize,
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduced_channels > self.in_channels {
            return Err(Error::Config(format!(
                "reduced_channels {} exceeds in_channels {}",
                self.reduced_channels, self.in_channels
            )));
        }
        if self.attention_dim != self.reduced_channels {
            return Err(Error::Config(format!(
                "attention_dim {} must equal reduced_channels {} (single head, token = position)",
                self.attention_dim, self.reduced_channels
            )));
        }
        if self.grid_size == 0 || self.in_channels == 0 || self.reduced_channels == 0 {
            return Err(Error::Config("adaptation dims must be positive".into()));
        }
        Ok(())
    }
}

struct DeformCache<T: Scalar> {
    mixed: Tensor<T>,     // x_h' [n, c', h, w]
    offsets: Tensor<T>,   // [n, positions, k, 2]
    sampled: Tensor<T>,   // [n, positions, c']
}

/// Channel reduce -> 1x1 conv -> GELU -> deformable sampling at every
/// position -> single-head intra-task attention over positions.
///
/// Input and output are token tensors `[n, tokens, channels]`; tokens map
/// to a square spatial grid internally.
pub struct AdaptationModule<T: Scalar> {
    cfg: AdaptationConfig,
    reduce: Linear<T>,
    mix: Conv1x1<T>,
    gelu_cache: Option<Tensor<T>>, // pre-activation [n, c', h, w]
    offset_head: Linear<T>,        // per-position c' -> 2k, zero-initialised
    sample_weights: Tensor<T>,     // [k]
    attention: SelfAttention1H<T>,
    deform_cache: Option<DeformCache<T>>,
    in_shape: Vec<usize>,
}

impl<T: Scalar> AdaptationModule<T> {
    pub fn new(cfg: AdaptationConfig, rng: &mut SplitMix64) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.grid_size * cfg.grid_size;
        let reduce = Linear::new(cfg.in_channels, cfg.reduced_channels, rng);
        let mix = Conv1x1::new(cfg.reduced_channels, cfg.reduced_channels, rng);
        // Zero-initialised offset head: the module starts as a plain
        // regular-grid sampler, which keeps early rounds stable.
        let offset_head = Linear::from_parts(
            Tensor::zeros(&[cfg.reduced_channels, 2 * k]),
            Tensor::zeros(&[2 * k]),
        )?;
        let sample_weights = Tensor::filled(&[k], T::from_f64(1.0 / k as f64));
        let attention = SelfAttention1H::new(cfg.attention_dim, rng);
        Ok(AdaptationModule {
            cfg,
            reduce,
            mix,
            gelu_cache: None,
            offset_head,
            sample_weights,
            attention,
            deform_cache: None,
            in_shape: Vec::new(),
        })
    }

    pub fn config(&self) -> &AdaptationConfig {
        &self.cfg
    }

    fn side_of(&self, tokens: usize) -> Result<usize> {
        let side = (tokens as f64).sqrt().round() as usize;
        if side * side != tokens {
            return Err(Error::Config(format!(
                "adaptation needs a square token grid, got {tokens} tokens"
            )));
        }
        Ok(side)
    }

    fn gelu_grad_at(x: T) -> T {
        let cdf = T::from_f64(0.5)
            * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
        let pdf = T::from_f64(
            (-0.5 * x.to_f64() * x.to_f64()).exp() / (2.0 * std::f64::consts::PI).sqrt(),
        );
        cdf + x * pdf
    }
}

/// Tokens `[n, tokens, c]` viewed as an NCHW map `[n, c, side, side]`.
fn tokens_to_map<T: Scalar>(x: &Tensor<T>, side: usize) -> Result<Tensor<T>> {
    let (n, tokens, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut data = vec![T::zero(); x.numel()];
    for ni in 0..n {
        for t in 0..tokens {
            for ci in 0..c {
                data[(ni * c + ci) * tokens + t] = x.data()[(ni * tokens + t) * c + ci];
            }
        }
    }
    Tensor::new(vec![n, c, side, side], data)
}

fn map_to_tokens<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let tokens = h * w;
    let mut data = vec![T::zero(); x.numel()];
    for ni in 0..n {
        for t in 0..tokens {
            for ci in 0..c {
                data[(ni * tokens + t) * c + ci] = x.data()[(ni * c + ci) * tokens + t];
            }
        }
    }
    Tensor::new(vec![n, tokens, c], data)
}

/// Stand-alone reduce -> 1x1 conv -> GELU path over an NCHW map, using
/// caller-provided parameters. The module uses the same composition with
/// its own learned parameters.
pub fn reduce_and_mix<T: Scalar>(
    x: &Tensor<T>,
    reduce_w: &Tensor<T>,
    reduce_b: &Tensor<T>,
    mix_w: &Tensor<T>,
    mix_b: &Tensor<T>,
) -> Result<Tensor<T>> {
    if x.ndim() != 4 {
        return Err(Error::shape("reduce_and_mix", x.shape(), &[0; 4]));
    }
    if reduce_w.shape()[0] != x.shape()[1] {
        return Err(Error::Config(format!(
            "reduce_and_mix: input has {} channels, reduce weight expects {}",
            x.shape()[1],
            reduce_w.shape()[0]
        )));
    }
    let tokens = map_to_tokens(x)?;
    let reduced = crate::layers::linear_forward(&tokens, reduce_w, reduce_b)?;
    let side = x.shape()[2];
    let map = tokens_to_map(&reduced, side)?;
    let mixed_tokens = map_to_tokens(&map)?;
    let mixed = crate::layers::linear_forward(&mixed_tokens, mix_w, mix_b)?;
    let map = tokens_to_map(&mixed, side)?;
    Ok(gelu_forward(&map))
}

impl<T: Scalar> Layer<T> for AdaptationModule<T> {
    fn kind(&self) -> &'static str {
        "task-adaptation"
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.ndim() != 3 || x.shape()[2] != self.cfg.in_channels {
            return Err(Error::Config(format!(
                "adaptation expects [n,tokens,{}], got {:?}",
                self.cfg.in_channels,
                x.shape()
            )));
        }
        let (n, tokens) = (x.shape()[0], x.shape()[1]);
        let side = self.side_of(tokens)?;
        let cp = self.cfg.reduced_channels;
        let k = self.cfg.grid_size * self.cfg.grid_size;
        let kernel = regular_kernel(self.cfg.grid_size);

        // reduce (per-token linear) then 1x1 conv, then GELU.
        let reduced = self.reduce.forward(x)?; // [n, tokens, c']
        let map = tokens_to_map(&reduced, side)?;
        let mixed_pre = self.mix.forward(&map)?;
        self.gelu_cache = Some(mixed_pre.clone());
        let mixed = gelu_forward(&mixed_pre); // x_h'

        // Offsets per position from the full map.
        let mixed_tokens = map_to_tokens(&mixed)?; // [n, tokens, c']
        let offsets = self.offset_head.forward(&mixed_tokens)?; // [n, tokens, 2k]
        let offsets = offsets.reshape(&[n, tokens, k, 2])?;

        // Deformable sampling at every position.
        let mut sampled = Tensor::zeros(&[n, tokens, cp]);
        for ni in 0..n {
            let xmap = Tensor::new(
                vec![cp, side, side],
                mixed.data()[ni * cp * tokens..(ni + 1) * cp * tokens].to_vec(),
            )?;
            for t in 0..tokens {
                let (py, px) = ((t / side) as i64, (t % side) as i64);
                let points: Vec<(i64, i64)> =
                    kernel.iter().map(|&(dy, dx)| (py + dy, px + dx)).collect();
                let off = Tensor::new(
                    vec![k, 2],
                    offsets.data()[(ni * tokens + t) * k * 2..(ni * tokens + t + 1) * k * 2]
                        .to_vec(),
                )?;
                let grid = DeformableGrid::new(points, off, self.sample_weights.clone())?;
                let v = deformable_sample(&xmap, &grid)?;
                sampled.data_mut()[(ni * tokens + t) * cp..(ni * tokens + t + 1) * cp]
                    .copy_from_slice(v.data());
            }
        }

        self.deform_cache = Some(DeformCache {
            mixed,
            offsets,
            sampled: sampled.clone(),
        });
        self.in_shape = x.shape().to_vec();

        self.attention.forward(&sampled)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<(Tensor<T>, GradientSet<T>)> {
        let cache = self
            .deform_cache
            .take()
            .ok_or_else(|| missing_cache("task-adaptation"))?;
        let pre = self
            .gelu_cache
            .take()
            .ok_or_else(|| missing_cache("task-adaptation"))?;
        let (n, tokens) = (self.in_shape[0], self.in_shape[1]);
        let side = self.side_of(tokens)?;
        let cp = self.cfg.reduced_channels;
        let k = self.cfg.grid_size * self.cfg.grid_size;
        let kernel = regular_kernel(self.cfg.grid_size);
        check_upstream("adaptation backward", upstream, &[n, tokens, cp])?;

        let (d_sampled, attn_grads) = self.attention.backward(upstream)?;

        // Backward through per-position sampling.
        let mut d_mixed = Tensor::zeros(&[n, cp, side, side]);
        let mut d_offsets = Tensor::zeros(&[n, tokens, k, 2]);
        let mut d_weights = Tensor::zeros(&[k]);
        for ni in 0..n {
            let xmap = Tensor::new(
                vec![cp, side, side],
                cache.mixed.data()[ni * cp * tokens..(ni + 1) * cp * tokens].to_vec(),
            )?;
            for t in 0..tokens {
                let (py, px) = ((t / side) as i64, (t % side) as i64);
                let points: Vec<(i64, i64)> =
                    kernel.iter().map(|&(dy, dx)| (py + dy, px + dx)).collect();
                let off = Tensor::new(
                    vec![k, 2],
                    cache.offsets.data()
                        [(ni * tokens + t) * k * 2..(ni * tokens + t + 1) * k * 2]
                        .to_vec(),
                )?;
                let grid = DeformableGrid::new(points, off, self.sample_weights.clone())?;
                let up = Tensor::new(
                    vec![cp],
                    d_sampled.data()[(ni * tokens + t) * cp..(ni * tokens + t + 1) * cp].to_vec(),
                )?;
                let (dxm, doff, dwgt) = deformable_sample_backward(&xmap, &grid, &up)?;
                for (idx, &v) in dxm.data().iter().enumerate() {
                    d_mixed.data_mut()[ni * cp * tokens + idx] += v;
                }
                d_offsets.data_mut()[(ni * tokens + t) * k * 2..(ni * tokens + t + 1) * k * 2]
                    .copy_from_slice(doff.data());
                d_weights.add_scaled(&dwgt, T::one())?;
            }
        }

        // Offsets came from the offset head on mixed tokens.
        let d_off_flat = d_offsets.reshape(&[n, tokens, 2 * k])?;
        let (d_mixed_tokens_from_off, off_grads) = self.offset_head.backward(&d_off_flat)?;
        let d_mixed_from_off = tokens_to_map(&d_mixed_tokens_from_off, side)?;
        let mut d_mixed_total = d_mixed;
        d_mixed_total.add_scaled(&d_mixed_from_off, T::one())?;

        // GELU.
        let d_pre = pre.zip_map(&d_mixed_total, |xv, g| g * Self::gelu_grad_at(xv))?;

        // 1x1 conv, then the reducing linear.
        let (d_map, mix_grads) = self.mix.backward(&d_pre)?;
        let d_reduced = map_to_tokens(&d_map)?;
        let (dx, reduce_grads) = self.reduce.backward(&d_reduced)?;

        let mut grads = GradientSet::new();
        for (name, g) in reduce_grads.iter() {
            grads.insert(format!("reduce.{name}"), g.clone())?;
        }
        for (name, g) in mix_grads.iter() {
            grads.insert(format!("mix.{name}"), g.clone())?;
        }
        for (name, g) in off_grads.iter() {
            grads.insert(format!("offset.{name}"), g.clone())?;
        }
        grads.insert("w", d_weights)?;
        for (name, g) in attn_grads.iter() {
            grads.insert(format!("attn.{name}"), g.clone())?;
        }
        Ok((dx, grads))
    }

    fn params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (name, t) in self.reduce.params() {
            out.push((format!("reduce.{name}"), t));
        }
        for (name, t) in self.mix.params() {
            out.push((format!("mix.{name}"), t));
        }
        for (name, t) in self.offset_head.params() {
            out.push((format!("offset.{name}"), t));
        }
        out.push(("w".into(), self.sample_weights.clone()));
        for (name, t) in self.attention.params() {
            out.push((format!("attn.{name}"), t));
        }
        out
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        if name == "w" {
            return Some(&mut self.sample_weights);
        }
        let (head, rest) = name.split_once('.')?;
        match head {
            "reduce" => self.reduce.param_mut(rest),
            "mix" => self.mix.param_mut(rest),
            "offset" => self.offset_head.param_mut(rest),
            "attn" => self.attention.param_mut(rest),
            _ => None,
        }
    }

    fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        if in_shape.len() != 3 || in_shape[2] != self.cfg.in_channels {
            return Err(Error::shape("task-adaptation", in_shape, &[]));
        }
        self.side_of(in_shape[1])?;
        Ok(vec![in_shape[0], in_shape[1], self.cfg.reduced_channels])
    }

    fn flops(&self, in_shape: &[usize]) -> u64 {
        let (n, tokens) = (in_shape[0], in_shape[1]);
        let cp = self.cfg.reduced_channels;
        let k = self.cfg.grid_size * self.cfg.grid_size;
        let reduce = self.reduce.flops(in_shape);
        let mix = n as u64 * tokens as u64 * (cp * cp + cp) as u64;
        let offsets = n as u64 * tokens as u64 * (cp * 2 * k + 2 * k) as u64;
        // 4 bilinear taps + 1 weighted accumulate per kernel slot/channel.
        let sampling = (n * tokens * k * cp * 5) as u64;
        let attn = self
            .attention
            .flops(&[n, tokens, self.cfg.attention_dim]);
        reduce + mix + offsets + sampling + attn
    }

    fn activation_elems(&self, in_shape: &[usize]) -> u64 {
        let (n, tokens) = (in_shape[0], in_shape[1]);
        let cp = self.cfg.reduced_channels;
        let k = self.cfg.grid_size * self.cfg.grid_size;
        let maps = 3 * (n * tokens * cp) as u64; // pre-GELU, mixed, sampled
        let offsets = (n * tokens * k * 2) as u64;
        in_shape.iter().product::<usize>() as u64
            + maps
            + offsets
            + self.attention.activation_elems(&[n, tokens, cp])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::finite_diff_check;

    fn map3(c: usize, h: usize, w: usize, vals: Vec<f64>) -> Tensor<f64> {
        Tensor::new(vec![c, h, w], vals).unwrap()
    }

    #[test]
    fn exact_grid_hit() {
        let x = map3(2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let grid = DeformableGrid::new(
            vec![(0, 0)],
            Tensor::zeros(&[1, 2]),
            Tensor::filled(&[1], 1.0),
        )
        .unwrap();
        let v = deformable_sample(&x, &grid).unwrap();
        assert_eq!(v.data(), &[1.0, 5.0]);
    }

    #[test]
    fn bilinear_midpoint() {
        // Values 1 and 3 in adjacent cells; offset (0, 0.5) reads 2.0.
        let x = map3(1, 1, 2, vec![1.0, 3.0]);
        let grid = DeformableGrid::new(
            vec![(0, 0)],
            Tensor::new(vec![1, 2], vec![0.0, 0.5]).unwrap(),
            Tensor::filled(&[1], 1.0),
        )
        .unwrap();
        let v = deformable_sample(&x, &grid).unwrap();
        assert_eq!(v.data(), &[2.0]);
    }

    #[test]
    fn far_out_of_bounds_contributes_zero() {
        let x = map3(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let grid = DeformableGrid::new(
            vec![(0, 0)],
            Tensor::new(vec![1, 2], vec![100.0, -50.0]).unwrap(),
            Tensor::filled(&[1], 1.0),
        )
        .unwrap();
        let v = deformable_sample(&x, &grid).unwrap();
        assert_eq!(v.data(), &[0.0]);
    }

    #[test]
    fn zero_offsets_unit_weights_equal_plain_gather() {
        let mut rng = SplitMix64::new(31);
        let x = Tensor::<f64>::randn(&[3, 4, 4], 1.0, &mut rng);
        for (py, px) in [(0i64, 0i64), (1, 2), (3, 3)] {
            let grid = DeformableGrid::new(
                vec![(py, px)],
                Tensor::zeros(&[1, 2]),
                Tensor::filled(&[1], 1.0),
            )
            .unwrap();
            let v = deformable_sample(&x, &grid).unwrap();
            for c in 0..3 {
                assert_eq!(v.data()[c], x.at(&[c, py as usize, px as usize]));
            }
        }
    }

    #[test]
    fn integer_aligned_backward_puts_weight_at_cell() {
        let x = map3(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let grid = DeformableGrid::new(
            vec![(1, 0)],
            Tensor::zeros(&[1, 2]),
            Tensor::filled(&[1], 0.7),
        )
        .unwrap();
        let up = Tensor::new(vec![1], vec![1.0]).unwrap();
        let (dx, _, dw) = deformable_sample_backward(&x, &grid, &up).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 0.7, 0.0]);
        assert_eq!(dw.data(), &[3.0]); // sampled value
    }

    #[test]
    fn zero_upstream_all_grads_zero() {
        let mut rng = SplitMix64::new(32);
        let x = Tensor::<f64>::randn(&[2, 3, 3], 1.0, &mut rng);
        let grid = DeformableGrid::new(
            vec![(1, 1), (0, 2)],
            Tensor::<f64>::randn(&[2, 2], 0.3, &mut rng),
            Tensor::<f64>::randn(&[2], 1.0, &mut rng),
        )
        .unwrap();
        let (dx, doff, dw) =
            deformable_sample_backward(&x, &grid, &Tensor::zeros(&[2])).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(doff.data().iter().all(|&v| v == 0.0));
        assert!(dw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sample_gradients_match_finite_differences() {
        // Check d/d(input), d/d(offsets), d/d(weights) at fractional
        // offsets against central differences on the free function.
        let mut rng = SplitMix64::new(33);
        let x = Tensor::<f64>::randn(&[2, 4, 4], 1.0, &mut rng);
        let offsets = Tensor::new(vec![3, 2], vec![0.3, -0.4, 0.15, 0.25, -0.35, 0.45]).unwrap();
        let weights = Tensor::new(vec![3], vec![0.5, -0.2, 0.8]).unwrap();
        let grid =
            DeformableGrid::new(vec![(1, 1), (2, 2), (0, 3)], offsets.clone(), weights.clone())
                .unwrap();
        let up = Tensor::<f64>::randn(&[2], 1.0, &mut rng);
        let (dx, doff, dw) = deformable_sample_backward(&x, &grid, &up).unwrap();

        let objective = |x: &Tensor<f64>, off: &Tensor<f64>, wgt: &Tensor<f64>| -> f64 {
            let g = DeformableGrid::new(grid.points.clone(), off.clone(), wgt.clone()).unwrap();
            deformable_sample(x, &g)
                .unwrap()
                .data()
                .iter()
                .zip(up.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let eps = 1e-6;
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let num = (objective(&xp, &offsets, &weights) - objective(&xm, &offsets, &weights))
                / (2.0 * eps);
            assert!((num - dx.data()[i]).abs() < 1e-6, "dx[{i}]");
        }
        for i in 0..offsets.numel() {
            let mut op = offsets.clone();
            op.data_mut()[i] += eps;
            let mut om = offsets.clone();
            om.data_mut()[i] -= eps;
            let num =
                (objective(&x, &op, &weights) - objective(&x, &om, &weights)) / (2.0 * eps);
            assert!((num - doff.data()[i]).abs() < 1e-5, "doff[{i}]");
        }
        for i in 0..weights.numel() {
            let mut wp = weights.clone();
            wp.data_mut()[i] += eps;
            let mut wm = weights.clone();
            wm.data_mut()[i] -= eps;
            let num =
                (objective(&x, &offsets, &wp) - objective(&x, &offsets, &wm)) / (2.0 * eps);
            assert!((num - dw.data()[i]).abs() < 1e-6, "dw[{i}]");
        }
    }

    fn toy_config() -> AdaptationConfig {
        AdaptationConfig {
            in_channels: 4,
            reduced_channels: 3,
            attention_dim: 3,
            grid_size: 3,
        }
    }

    #[test]
    fn config_validation() {
        let mut bad = toy_config();
        bad.reduced_channels = 5;
        assert!(bad.validate().is_err());
        let mut bad = toy_config();
        bad.attention_dim = 2;
        assert!(bad.validate().is_err());
        assert!(toy_config().validate().is_ok());
    }

    #[test]
    fn reduce_and_mix_identity_collapses_to_gelu() {
        let mut rng = SplitMix64::new(34);
        let x = Tensor::<f64>::randn(&[1, 2, 3, 3], 1.0, &mut rng).map(f64::abs);
        let eye = Tensor::from_fn(&[2, 2], |i| if i / 2 == i % 2 { 1.0 } else { 0.0 });
        let b = Tensor::zeros(&[2]);
        let y = reduce_and_mix(&x, &eye, &b, &eye, &b).unwrap();
        let want = gelu_forward(&x);
        for (a, w) in y.data().iter().zip(want.data()) {
            assert!((a - w).abs() < 1e-14);
        }
    }

    #[test]
    fn reduce_and_mix_zero_conv_is_zero() {
        let mut rng = SplitMix64::new(35);
        let x = Tensor::<f64>::randn(&[1, 2, 2, 2], 1.0, &mut rng);
        let eye = Tensor::from_fn(&[2, 2], |i| if i / 2 == i % 2 { 1.0 } else { 0.0 });
        let b = Tensor::zeros(&[2]);
        let zeros = Tensor::zeros(&[2, 2]);
        let y = reduce_and_mix(&x, &eye, &b, &zeros, &b).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reduce_and_mix_matches_composition_oracle() {
        // Step-by-step composition on a random 1x2x2x2 case.
        let mut rng = SplitMix64::new(36);
        let x = Tensor::<f64>::randn(&[1, 2, 2, 2], 1.0, &mut rng);
        let rw = Tensor::<f64>::randn(&[2, 2], 1.0, &mut rng);
        let rb = Tensor::<f64>::randn(&[2], 1.0, &mut rng);
        let mw = Tensor::<f64>::randn(&[2, 2], 1.0, &mut rng);
        let mb = Tensor::<f64>::randn(&[2], 1.0, &mut rng);
        let got = reduce_and_mix(&x, &rw, &rb, &mw, &mb).unwrap();
        for h in 0..2 {
            for w in 0..2 {
                // reduce
                let mut red = [0.0f64; 2];
                for co in 0..2 {
                    let mut acc = rb.data()[co];
                    for ci in 0..2 {
                        acc += x.at(&[0, ci, h, w]) * rw.at(&[ci, co]);
                    }
                    red[co] = acc;
                }
                // mix
                for co in 0..2 {
                    let mut acc = mb.data()[co];
                    for ci in 0..2 {
                        acc += red[ci] * mw.at(&[ci, co]);
                    }
                    let want = 0.5 * acc * (1.0 + libm::erf(acc * std::f64::consts::FRAC_1_SQRT_2));
                    assert!((got.at(&[0, co, h, w]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn adaptation_module_passes_finite_difference() {
        let mut rng = SplitMix64::new(37);
        let mut module = AdaptationModule::<f64>::new(toy_config(), &mut rng).unwrap();
        // Randomise the offset head so sampling happens at fractional
        // positions, where the bilinear surface is smooth.
        for name in ["offset.W", "offset.b"] {
            let p = module.param_mut(name).unwrap();
            let fresh = Tensor::<f64>::randn(p.shape(), 0.17, &mut rng);
            *p = fresh;
        }
        let x = Tensor::<f64>::randn(&[2, 4, 4], 1.0, &mut rng);
        let err = finite_diff_check(&mut module, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "adaptation fd err {err}");
    }

    #[test]
    fn backward_without_forward_errors() {
        let mut rng = SplitMix64::new(38);
        let mut module = AdaptationModule::<f64>::new(toy_config(), &mut rng).unwrap();
        assert!(module.backward(&Tensor::zeros(&[1, 4, 3])).is_err());
    }
}
