//! Small trainable building blocks on top of `candle` tensors.
//!
//! Every parameter is a [`Var`] created through a [`ParamStore`], which draws
//! initial values from a seeded ChaCha stream in construction order. That is
//! what makes `(spec, seed)` reproduce identical parameters.

use std::cell::Cell;

use candle_core::{Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::census::{Census, LayerKind};

/// Forward-pass mode. Dropout only draws masks in training mode.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Named, ordered parameters with seeded initialization.
pub struct ParamStore {
    prefix: Vec<String>,
    params: Vec<(String, Var)>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, device: &Device) -> Self {
        Self {
            prefix: Vec::new(),
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: device.clone(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.prefix.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.prefix.pop();
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    fn register(
        &mut self,
        name: &str,
        data: Vec<f32>,
        shape: &[usize],
    ) -> candle_core::Result<Var> {
        let tensor = Tensor::from_vec(data, shape, &self.device)?;
        let var = Var::from_tensor(&tensor)?;
        let full = self.full_name(name);
        self.params.push((full, var.clone()));
        Ok(var)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> candle_core::Result<Var> {
        let n: usize = shape.iter().product();
        let bound = bound as f32;
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.register(name, data, shape)
    }

    pub fn constant(
        &mut self,
        name: &str,
        shape: &[usize],
        value: f32,
    ) -> candle_core::Result<Var> {
        let n: usize = shape.iter().product();
        self.register(name, vec![value; n], shape)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> candle_core::Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0f32, std as f32).expect("finite std");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.register(name, data, shape)
    }

    /// Registers a tensor built by the caller (e.g. identity-plus-noise).
    pub fn from_data(
        &mut self,
        name: &str,
        shape: &[usize],
        data: Vec<f32>,
    ) -> candle_core::Result<Var> {
        self.register(name, data, shape)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn into_params(self) -> Vec<(String, Var)> {
        self.params
    }
}

thread_local! {
    static TRACK_GRADIENTS: Cell<bool> = const { Cell::new(true) };
}

/// Disables gradient tracking of parameters on this thread until dropped.
pub struct NoGradGuard {
    previous: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        Self {
            previous: TRACK_GRADIENTS.with(|t| t.replace(false)),
        }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        TRACK_GRADIENTS.with(|t| t.set(self.previous));
    }
}

/// The parameter as an operand: tracked for autograd unless a [`NoGradGuard`]
/// is alive, in which case no intermediate results are retained for backprop.
pub fn param(v: &Var) -> Tensor {
    if TRACK_GRADIENTS.with(|t| t.get()) {
        v.as_tensor().clone()
    } else {
        v.as_tensor().detach()
    }
}

/// `x W` over the last dimension of `x`, folding leading dimensions into one
/// matmul so the weight is never broadcast per batch item.
fn matmul_last(x: &Tensor, w: &Tensor) -> candle_core::Result<Tensor> {
    if x.rank() == 2 {
        return x.matmul(w);
    }
    let mut dims = x.dims().to_vec();
    let d_in = dims.pop().unwrap_or(1);
    let rows = dims.iter().product::<usize>();
    let y = x.contiguous()?.reshape((rows, d_in))?.matmul(w)?;
    dims.push(w.dim(1)?);
    y.reshape(dims)
}

/// Fully connected layer `y = x W^T + b` applied over the last dimension.
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
    kind: LayerKind,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> candle_core::Result<Self> {
        ps.push_scope(name);
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = ps.uniform("weight", &[d_out, d_in], bound)?;
        let bias = if bias {
            Some(ps.uniform("bias", &[d_out], bound)?)
        } else {
            None
        };
        ps.pop_scope();
        Ok(Self {
            weight,
            bias,
            kind: LayerKind::Linear,
        })
    }

    /// Output projection inside attention; counted under its own kind.
    pub fn attention_output(
        ps: &mut ParamStore,
        name: &str,
        width: usize,
    ) -> candle_core::Result<Self> {
        let mut layer = Self::new(ps, name, width, width, true)?;
        layer.kind = LayerKind::NonDynamicQuantiLinear;
        Ok(layer)
    }

    pub fn from_vars(weight: Var, bias: Option<Var>) -> Self {
        Self {
            weight,
            bias,
            kind: LayerKind::Linear,
        }
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = matmul_last(x, &param(&self.weight).t()?)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&param(b)),
            None => Ok(y),
        }
    }

    pub fn census(&self, c: &mut Census) {
        c.add(self.kind);
    }
}

/// 1-D convolution over `(B, C, L)`.
pub struct Conv1d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv1d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> candle_core::Result<Self> {
        ps.push_scope(name);
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        let weight = ps.uniform("weight", &[c_out, c_in, kernel], bound)?;
        let bias = ps.uniform("bias", &[c_out], bound)?;
        ps.pop_scope();
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (c_out, c_in, kernel) = self.weight.dims3()?;
        let y = if c_in == 1 && self.padding == 0 {
            self.framed_forward(x, c_out, kernel)?
        } else {
            x.conv1d(&param(&self.weight), self.padding, self.stride, 1, 1)?
        };
        y.broadcast_add(&param(&self.bias).reshape((1, (), 1))?)
    }

    /// Single-channel input: gather the strided frames and apply one matmul.
    /// Much cheaper than the generic kernel for long kernels on raw audio.
    fn framed_forward(
        &self,
        x: &Tensor,
        c_out: usize,
        kernel: usize,
    ) -> candle_core::Result<Tensor> {
        let (b, _, len) = x.dims3()?;
        if len < kernel {
            candle_core::bail!("input length {len} is shorter than kernel {kernel}");
        }
        let frames = (len - kernel) / self.stride + 1;
        let idx: Vec<u32> = (0..frames)
            .flat_map(|t| (0..kernel).map(move |k| (t * self.stride + k) as u32))
            .collect();
        let idx = Tensor::from_vec(idx, frames * kernel, x.device())?;
        let framed = x
            .reshape((b, len))?
            .index_select(&idx, 1)?
            .reshape((b * frames, kernel))?;
        let w = param(&self.weight).reshape((c_out, kernel))?;
        framed
            .matmul(&w.t()?)?
            .reshape((b, frames, c_out))?
            .transpose(1, 2)?
            .contiguous()
    }

    pub fn census(&self, c: &mut Census) {
        c.add(LayerKind::Conv1d);
    }
}

/// Layer normalization over the last dimension.
pub struct LayerNorm {
    weight: Var,
    bias: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize) -> candle_core::Result<Self> {
        ps.push_scope(name);
        let weight = ps.constant("weight", &[width], 1.0)?;
        let bias = ps.constant("bias", &[width], 0.0)?;
        ps.pop_scope();
        Ok(Self {
            weight,
            bias,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed
            .broadcast_mul(&param(&self.weight))?
            .broadcast_add(&param(&self.bias))
    }

    pub fn census(&self, c: &mut Census) {
        c.add(LayerKind::LayerNorm);
    }
}

/// Inverted dropout with masks drawn from the training RNG.
pub struct Dropout {
    rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        Self { rate }
    }

    pub fn forward(&self, x: &Tensor, mode: &mut Mode) -> candle_core::Result<Tensor> {
        let rng = match mode {
            Mode::Train(rng) if self.rate > 0.0 => rng,
            _ => return Ok(x.clone()),
        };
        let keep = 1.0 - self.rate;
        let scale = (1.0 / keep) as f32;
        let n = x.elem_count();
        let mask: Vec<f32> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    0.0
                }
            })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        x * mask
    }

    pub fn census(&self, c: &mut Census) {
        c.add(LayerKind::Dropout);
    }
}

/// Numerically shifted softmax built from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Silu,
}

impl Activation {
    pub fn forward(self, x: &Tensor) -> candle_core::Result<Tensor> {
        match self {
            Activation::Gelu => x.gelu_erf(),
            Activation::Silu => x.silu(),
        }
    }

    pub fn kind(self) -> LayerKind {
        match self {
            Activation::Gelu => LayerKind::Gelu,
            Activation::Silu => LayerKind::Silu,
        }
    }
}

/// Multi-head scaled dot-product attention with a packed input projection.
pub struct MultiheadAttention {
    in_proj_weight: Var,
    in_proj_bias: Var,
    out_proj: Linear,
    heads: usize,
    width: usize,
}

impl MultiheadAttention {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
    ) -> candle_core::Result<Self> {
        ps.push_scope(name);
        // Xavier-uniform over the packed (3W, W) matrix.
        let bound = (6.0 / (width + 3 * width) as f64).sqrt();
        let in_proj_weight = ps.uniform("in_proj_weight", &[3 * width, width], bound)?;
        let in_proj_bias = ps.constant("in_proj_bias", &[3 * width], 0.0)?;
        let out_proj = Linear::attention_output(ps, "out_proj", width)?;
        ps.pop_scope();
        Ok(Self {
            in_proj_weight,
            in_proj_bias,
            out_proj,
            heads,
            width,
        })
    }

    fn project(&self, x: &Tensor, slot: usize) -> candle_core::Result<Tensor> {
        let w = param(&self.in_proj_weight).narrow(0, slot * self.width, self.width)?;
        let b = param(&self.in_proj_bias).narrow(0, slot * self.width, self.width)?;
        matmul_last(x, &w.t()?)?.broadcast_add(&b)
    }

    fn split_heads(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        x.reshape((b, t, self.heads, self.width / self.heads))?
            .transpose(1, 2)?
            .contiguous()
    }

    /// `query: (B, Tq, W)`, `key_value: (B, Tk, W)` -> `(B, Tq, W)`.
    pub fn forward(&self, query: &Tensor, key_value: &Tensor) -> candle_core::Result<Tensor> {
        let (b, tq, _) = query.dims3()?;
        let head_dim = self.width / self.heads;
        let q = self.split_heads(&self.project(query, 0)?)?;
        let k = self.split_heads(&self.project(key_value, 1)?)?;
        let v = self.split_heads(&self.project(key_value, 2)?)?;
        let scores = (q.matmul(&k.t()?)? / (head_dim as f64).sqrt())?;
        let attn = softmax_last(&scores)?.matmul(&v)?;
        let merged = attn
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, tq, self.width))?;
        self.out_proj.forward(&merged)
    }

    pub fn census(&self, c: &mut Census) {
        c.add(LayerKind::MultiheadAttention);
        self.out_proj.census(c);
    }
}

/// Post-norm transformer encoder layer (self-attention then feed-forward).
pub struct TransformerEncoderLayer {
    self_attn: MultiheadAttention,
    linear1: Linear,
    dropout: Dropout,
    linear2: Linear,
    norm1: LayerNorm,
    norm2: LayerNorm,
    dropout1: Dropout,
    dropout2: Dropout,
}

impl TransformerEncoderLayer {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ff_width: usize,
        dropout: f64,
    ) -> candle_core::Result<Self> {
        ps.push_scope(name);
        let layer = Self {
            self_attn: MultiheadAttention::new(ps, "self_attn", width, heads)?,
            linear1: Linear::new(ps, "linear1", width, ff_width, true)?,
            dropout: Dropout::new(dropout),
            linear2: Linear::new(ps, "linear2", ff_width, width, true)?,
            norm1: LayerNorm::new(ps, "norm1", width)?,
            norm2: LayerNorm::new(ps, "norm2", width)?,
            dropout1: Dropout::new(dropout),
            dropout2: Dropout::new(dropout),
        };
        ps.pop_scope();
        Ok(layer)
    }

    pub fn forward(
        &self,
        x: &Tensor,
        act: Activation,
        mode: &mut Mode,
    ) -> candle_core::Result<Tensor> {
        let attn = self.self_attn.forward(x, x)?;
        let x = self
            .norm1
            .forward(&(x + self.dropout1.forward(&attn, mode)?)?)?;
        let hidden = self
            .dropout
            .forward(&act.forward(&self.linear1.forward(&x)?)?, mode)?;
        let ff = self.linear2.forward(&hidden)?;
        self.norm2
            .forward(&(&x + self.dropout2.forward(&ff, mode)?)?)
    }

    /// Residual fan-outs inside one layer.
    pub const BRANCHINGS: usize = 2;

    pub fn census(&self, c: &mut Census) {
        c.add(LayerKind::TransformerEncoderLayer);
        self.self_attn.census(c);
        self.linear1.census(c);
        self.dropout.census(c);
        self.linear2.census(c);
        self.norm1.census(c);
        self.norm2.census(c);
        self.dropout1.census(c);
        self.dropout2.census(c);
        c.branchings += Self::BRANCHINGS;
    }
}

/// Fixed sinusoidal position code, `(T, W)`.
pub fn sinusoidal_positions(
    t: usize,
    width: usize,
    device: &Device,
) -> candle_core::Result<Tensor> {
    let mut data = vec![0f32; t * width];
    for pos in 0..t {
        for i in 0..width {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let angle = pos as f64 * rate;
            data[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    Tensor::from_vec(data, (t, width), device)
}

/// Averaging matrix `(T, out)` reproducing adaptive average pooling windows.
pub fn adaptive_avg_matrix(t: usize, out: usize, device: &Device) -> candle_core::Result<Tensor> {
    let mut data = vec![0f32; t * out];
    for i in 0..out {
        let (start, end) = adaptive_window(i, t, out);
        let w = 1.0 / (end - start) as f32;
        for s in start..end {
            data[s * out + i] = w;
        }
    }
    Tensor::from_vec(data, (t, out), device)
}

/// Linear interpolation matrix `(T, out)` with half-pixel centers.
pub fn interpolation_matrix(t: usize, out: usize, device: &Device) -> candle_core::Result<Tensor> {
    let mut data = vec![0f32; t * out];
    let scale = t as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(t - 1);
        let i1 = (i0 + 1).min(t - 1);
        let frac = (src - i0 as f64) as f32;
        data[i0 * out + i] += 1.0 - frac;
        data[i1 * out + i] += frac;
    }
    Tensor::from_vec(data, (t, out), device)
}

/// `[start, end)` of output cell `i` when pooling `t` steps into `out` cells.
pub fn adaptive_window(i: usize, t: usize, out: usize) -> (usize, usize) {
    let start = i * t / out;
    let end = ((i + 1) * t).div_ceil(out);
    (start, end.max(start + 1))
}

/// Adaptive max pooling over the last axis of `(B, C, T)` into `out` cells.
pub fn adaptive_max_pool(x: &Tensor, out: usize) -> candle_core::Result<Tensor> {
    let (b, c, t) = x.dims3()?;
    let widest = (0..out)
        .map(|i| {
            let (s, e) = adaptive_window(i, t, out);
            e - s
        })
        .max()
        .unwrap_or(1);
    // Each window is padded to the widest one by repeating its last index.
    let mut idx = Vec::with_capacity(out * widest);
    for i in 0..out {
        let (s, e) = adaptive_window(i, t, out);
        for j in 0..widest {
            idx.push((s + j.min(e - s - 1)) as u32);
        }
    }
    let idx = Tensor::from_vec(idx, out * widest, x.device())?;
    x.index_select(&idx, 2)?
        .reshape((b, c, out, widest))?
        .max(D::Minus1)
}

pub fn param_count(params: &[(String, Var)]) -> usize {
    params.iter().map(|(_, v)| v.elem_count()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn framed_conv_matches_generic_conv() {
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(1, &dev);
        let conv = Conv1d::new(&mut ps, "c", 1, 5, 8, 3, 0).unwrap();
        let x = Tensor::arange(0f32, 2.0 * 41.0, &dev)
            .unwrap()
            .reshape((2, 1, 41))
            .unwrap();
        let x = (x * 0.1).unwrap().sin().unwrap();
        let framed = conv.forward(&x).unwrap();
        let generic = x
            .conv1d(conv.weight.as_tensor(), 0, 3, 1, 1)
            .unwrap()
            .broadcast_add(&conv.bias.as_tensor().reshape((1, (), 1)).unwrap())
            .unwrap();
        assert_eq!(framed.dims(), generic.dims());
        let diff = (framed - generic)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn adaptive_windows_cover_input() {
        for (t, out) in [(79usize, 77usize), (101, 77), (77, 77), (200, 77), (10, 77)] {
            let mut covered = vec![false; t];
            for i in 0..out {
                let (s, e) = adaptive_window(i, t, out);
                assert!(s < e && e <= t, "t={t} i={i}");
                covered[s..e].iter_mut().for_each(|c| *c = true);
            }
            assert!(covered.iter().all(|&c| c));
        }
    }

    #[test]
    fn avg_and_interp_rows_sum_to_one() {
        let d = Device::Cpu;
        for m in [
            adaptive_avg_matrix(101, 77, &d).unwrap(),
            interpolation_matrix(79, 77, &d).unwrap(),
        ] {
            let col_sums = m.sum(0).unwrap().to_vec1::<f32>().unwrap();
            assert!(col_sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn max_pool_matches_windows() {
        let d = Device::Cpu;
        let data: Vec<f32> = (0..2 * 3 * 10).map(|i| ((i * 7) % 13) as f32).collect();
        let x = Tensor::from_vec(data.clone(), (2, 3, 10), &d).unwrap();
        let y = adaptive_max_pool(&x, 4).unwrap().to_vec3::<f32>().unwrap();
        for b in 0..2 {
            for c in 0..3 {
                for i in 0..4 {
                    let (s, e) = adaptive_window(i, 10, 4);
                    let base = (b * 3 + c) * 10;
                    let expected = data[base + s..base + e]
                        .iter()
                        .cloned()
                        .fold(f32::MIN, f32::max);
                    assert_eq!(y[b][c][i], expected);
                }
            }
        }
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let d = Device::Cpu;
        let x = Tensor::ones((4, 5), DType::F32, &d).unwrap();
        let y = Dropout::new(0.5).forward(&x, &mut Mode::Eval).unwrap();
        assert_eq!(y.to_vec2::<f32>().unwrap(), x.to_vec2::<f32>().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = Dropout::new(0.5)
            .forward(&x, &mut Mode::Train(&mut rng))
            .unwrap();
        let vals = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(vals.contains(&0.0));
    }
}
