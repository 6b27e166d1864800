//! Layer primitives shared by every stage of the network, plus the named
//! parameter registry used for optimization and checkpointing.
//!
//! Everything here is expressed in differentiable tensor ops so that
//! `Tensor::backward` covers the whole model, including resampling.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// Whether a registered tensor is updated by the optimizer or is running state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub kind: ParamKind,
}

/// Registry of every tensor of a model keyed by canonical dotted name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, var: Var, kind: ParamKind) -> Result<()> {
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, Param { var, kind });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.entries
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(n, p)| (n, &p.var))
    }

    /// Number of scalar trainable parameters whose name starts with `prefix`.
    pub fn count_trainable(&self, prefix: &str) -> usize {
        self.trainable()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Mark every entry under `prefix` as a buffer so the optimizer skips it.
    pub fn freeze(&mut self, prefix: &str) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.kind = ParamKind::Buffer;
            }
        }
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(n, p)| (n.clone(), p.var.as_tensor().clone()))
            .collect()
    }

    /// Overwrite values from `tensors`. Every registered name must be present
    /// with a matching shape; any discrepancy is reported in full.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut problems = Vec::new();
        for (name, p) in &self.entries {
            match tensors.get(name) {
                None => problems.push(format!("missing `{name}`")),
                Some(t) if t.dims() != p.var.dims() => problems.push(format!(
                    "shape of `{name}`: expected {:?}, found {:?}",
                    p.var.dims(),
                    t.dims()
                )),
                Some(_) => {}
            }
        }
        for name in tensors.keys() {
            if !self.entries.contains_key(name) {
                problems.push(format!("unexpected `{name}`"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::IncompatibleCheckpoint(problems));
        }
        for (name, p) in &self.entries {
            let t = tensors[name].to_dtype(p.var.dtype())?;
            p.var.set(&t)?;
        }
        Ok(())
    }
}

/// Weight initialization scheme for a convolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// N(0, 2/fan_out), zero bias. Used for ReLU conv stacks.
    KaimingFanOut,
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
    UniformFanIn,
    Zeros,
}

/// Scoped constructor that registers tensors under dotted names while
/// drawing initial values from a seeded generator.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: Vec<String>,
    dtype: DType,
    device: Device,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, dtype: DType) -> Self {
        Self {
            store,
            rng,
            prefix: Vec::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    fn register(&mut self, leaf: &str, values: Vec<f64>, shape: &[usize], kind: ParamKind) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let name = self.full_name(leaf);
        self.store.insert(name, var.clone(), kind)?;
        Ok(var)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64, kind: ParamKind) -> Result<Var> {
        let n = shape.iter().product();
        self.register(leaf, vec![value; n], shape, kind)
    }

    pub fn normal(&mut self, leaf: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.register(leaf, values, shape, ParamKind::Trainable)
    }

    pub fn uniform(&mut self, leaf: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n = shape.iter().product();
        let values = if bound > 0.0 {
            let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
            (0..n).map(|_| dist.sample(self.rng)).collect()
        } else {
            vec![0.0; n]
        };
        self.register(leaf, values, shape, ParamKind::Trainable)
    }
}

/// 2-D convolution with square kernel, stride 1 and "same" padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder, in_channels: usize, out_channels: usize, kernel: usize, init: Init) -> Result<Self> {
        let shape = [out_channels, in_channels, kernel, kernel];
        let fan_in = in_channels * kernel * kernel;
        let fan_out = out_channels * kernel * kernel;
        let (weight, bias) = match init {
            Init::KaimingFanOut => (
                b.normal("weight", &shape, (2.0 / fan_out as f64).sqrt())?,
                b.constant("bias", &[out_channels], 0.0, ParamKind::Trainable)?,
            ),
            Init::UniformFanIn => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (
                    b.uniform("weight", &shape, bound)?,
                    b.uniform("bias", &[out_channels], bound)?,
                )
            }
            Init::Zeros => (
                b.constant("weight", &shape, 0.0, ParamKind::Trainable)?,
                b.constant("bias", &[out_channels], 0.0, ParamKind::Trainable)?,
            ),
        };
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let y = x.conv2d(self.weight.as_tensor(), self.kernel / 2, 1, 1, 1)?;
        let bias = self.bias.as_tensor().reshape((1, self.out_channels, 1, 1))?;
        Ok(y.broadcast_add(&bias)?)
    }
}

/// Batch normalization over (N, H, W) with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub weight: Var,
    pub bias: Var,
    pub running_mean: Var,
    pub running_var: Var,
    channels: usize,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(b: &mut Builder, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: b.constant("weight", &[channels], 1.0, ParamKind::Trainable)?,
            bias: b.constant("bias", &[channels], 0.0, ParamKind::Trainable)?,
            running_mean: b.constant("running_mean", &[channels], 0.0, ParamKind::Buffer)?,
            running_var: b.constant("running_var", &[channels], 1.0, ParamKind::Buffer)?,
            channels,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    /// In training mode normalizes with batch statistics and updates the
    /// running estimates (unbiased variance); otherwise uses the running
    /// estimates and is a pure affine map.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "batch norm expects {} channels, got {c}",
                self.channels
            )));
        }
        let shape = (1, c, 1, 1);
        let (mean, var) = if train {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
            let new_var =
                ((self.running_var.as_tensor() * (1.0 - m))? + (var.detach().flatten_all()? * (m * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape(shape)?,
                self.running_var.as_tensor().reshape(shape)?,
            )
        };
        let xhat = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let gamma = self.weight.as_tensor().reshape(shape)?;
        let beta = self.bias.as_tensor().reshape(shape)?;
        Ok(xhat.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

/// conv(k×k) → batch norm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBlock {
    pub fn new(b: &mut Builder, in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        let conv = b.scope("conv", |b| {
            Conv2d::new(b, in_channels, out_channels, kernel, Init::KaimingFanOut)
        })?;
        let bn = b.scope("bn", |b| BatchNorm2d::new(b, out_channels))?;
        Ok(Self { conv, bn })
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward_t(&self.conv.forward(x)?, train)?.relu()?)
    }
}

/// Row-interpolation matrix (`out × in`) for bilinear resampling with
/// half-pixel centers (corners not aligned). Each row is a convex
/// combination of at most two source samples.
pub fn bilinear_weights(in_size: usize, out_size: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_size * in_size];
    let scale = in_size as f64 / out_size as f64;
    for dst in 0..out_size {
        let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_size - 1);
        let i1 = if i0 + 1 < in_size { i0 + 1 } else { i0 };
        let frac = src - i0 as f64;
        m[dst * in_size + i0] += 1.0 - frac;
        m[dst * in_size + i1] += frac;
    }
    m
}

/// Bilinearly resample a (B, C, H, W) tensor to (B, C, out_h, out_w).
/// Implemented as two matrix products so gradients flow through it.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!("cannot resample {h}×{w} to {out_h}×{out_w}")));
    }
    let dev = x.device();
    let rw = Tensor::from_vec(bilinear_weights(w, out_w), (out_w, w), dev)?
        .to_dtype(x.dtype())?
        .t()?;
    let rh = Tensor::from_vec(bilinear_weights(h, out_h), (out_h, h), dev)?
        .to_dtype(x.dtype())?
        .t()?;
    let y = x.contiguous()?.reshape((b * c * h, w))?.matmul(&rw)?;
    let y = y.reshape((b * c, h, out_w))?.transpose(1, 2)?.contiguous()?;
    let y = y.reshape((b * c * out_w, h))?.matmul(&rh)?;
    let y = y.reshape((b * c, out_w, out_h))?.transpose(1, 2)?.contiguous()?;
    Ok(y.reshape((b, c, out_h, out_w))?)
}

/// 2×2 max pooling with stride 2. The gradient of each window goes to a
/// single maximal element, also when several elements tie.
///
/// candle's own `max_pool2d` backward scales the gradient by the fraction of
/// maxima in the window (1/4 for a unique maximum), and a plain max reduction
/// hands the full gradient to every tied element, so neither is used.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("2×2 pooling needs even sides, got {h}×{w}")));
    }
    let windows = x
        .reshape((b, c, h / 2, 2, w / 2, 2))?
        .permute((0, 1, 2, 4, 3, 5))?
        .contiguous()?
        .reshape((b, c, h / 2, w / 2, 4))?;
    let index = windows.argmax_keepdim(D::Minus1)?;
    Ok(windows.gather(&index, D::Minus1)?.squeeze(D::Minus1)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.neg()?.exp()?.affine(1.0, 1.0)?.recip()?)
}

/// Row-wise softmax over the last dimension with max subtraction.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// Compare the backpropagated gradient of the scalar `f()` with respect to
/// `var` against central finite differences with step `h`. Returns
/// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`. Intended for F64.
pub fn gradient_check(var: &Var, h: f64, f: impl Fn() -> Result<Tensor>) -> Result<f64> {
    let analytic = f()?
        .backward()?
        .get(var)
        .ok_or_else(|| Error::shape("scalar does not depend on the checked tensor"))?
        .flatten_all()?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?;
    let shape = var.shape().clone();
    let base = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let eval_at = |values: Vec<f64>| -> Result<f64> {
        var.set(&Tensor::from_vec(values, &shape, var.device())?.to_dtype(var.dtype())?)?;
        Ok(f()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    };
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        numeric.push((eval_at(plus)? - eval_at(minus)?) / (2.0 * h));
    }
    eval_at(base)?;
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(&numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        return Ok(diff);
    }
    Ok(diff / scale)
}
