//! Parameter storage and the small set of differentiable layers the
//! architectures are assembled from.
//!
//! Everything sits directly on `candle_core` tensors so that gradients are
//! available through `Tensor::backward`. Parameters are `Var`s; batch-norm
//! running statistics are `Var`s too but live in a separate buffer list and
//! are never handed to the optimizer or counted as learnable.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Forward-pass mode. Training carries the random source used by dropout so
/// that no layer ever reaches for ambient randomness.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

pub struct ParamStore {
    device: Device,
    dtype: DType,
    rng: ChaCha8Rng,
    params: Vec<(String, Var)>,
    buffers: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            path: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Learnable parameters in construction order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn buffers(&self) -> &[(String, Var)] {
        &self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Parameters followed by buffers, keyed by their stable dotted names.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every parameter and buffer from `map`. All names must be
    /// present with matching shapes; extra entries are rejected.
    pub fn load(&self, map: &HashMap<String, Tensor>) -> Result<()> {
        let expected = self.params.len() + self.buffers.len();
        if map.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} tensors, found {}",
                map.len()
            )));
        }
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            let t = map
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// A named position inside a [`ParamStore`] used while building layers.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    path: String,
}

impl Scope<'_> {
    pub fn sub(&mut self, name: &str) -> Scope<'_> {
        let path = self.full_name(name);
        Scope {
            store: self.store,
            path,
        }
    }

    fn full_name(&self, leaf: &str) -> String {
        if self.path.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.path)
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    fn make(&self, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(data, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    /// He-uniform weight: U(-b, b) with b = sqrt(6 / fan_in).
    pub fn he_uniform(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> Result<Var> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.store.rng.gen_range(-bound..bound))
            .collect();
        let var = self.make(data, shape)?;
        self.store.params.push((self.full_name(leaf), var.clone()));
        Ok(var)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let var = self.make(vec![value; n], shape)?;
        self.store.params.push((self.full_name(leaf), var.clone()));
        Ok(var)
    }

    pub fn buffer(&mut self, leaf: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let var = self.make(vec![value; n], shape)?;
        self.store.buffers.push((self.full_name(leaf), var.clone()));
        Ok(var)
    }
}

/// 2-D convolution with stride 1 and size-preserving zero padding.
#[derive(Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
}

impl Conv2d {
    pub fn new(s: &mut Scope, in_c: usize, out_c: usize, kernel: usize, bias: bool) -> Result<Self> {
        let weight = s.he_uniform("weight", &[out_c, in_c, kernel, kernel], in_c * kernel * kernel)?;
        let bias = if bias {
            Some(s.constant("bias", &[out_c], 0.0)?)
        } else {
            None
        };
        if kernel % 2 == 0 {
            return Err(Error::invalid(format!("conv kernel must be odd, got {kernel}")));
        }
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels() {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        let (b, _, h, w) = x.dims4()?;
        let (o, k) = (self.out_channels(), self.weight.dims()[2]);
        let cols = if k == 1 {
            x.reshape((b, c, h * w))?
        } else {
            x.contiguous()?.apply_op1(Im2Col { k, h, w })?
        };
        let wm = self.weight.as_tensor().reshape((o, c * k * k))?;
        let y = wm.broadcast_matmul(&cols)?.reshape((b, o, h, w))?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Unfolds `(B, C, H, W)` into `(B, C·k·k, H·W)` with zero padding `k / 2`;
/// row `c·k² + ky·k + kx` holds input pixel `(y + ky − k/2, x + kx − k/2)`.
/// Convolution then reduces to one matmul, and the backward pass is the
/// adjoint scatter ([`Col2Im`]) instead of a transposed convolution.
struct Im2Col {
    k: usize,
    h: usize,
    w: usize,
}

/// Adjoint of [`Im2Col`]: sums `(B, C·k·k, H·W)` columns back onto
/// `(B, C, H, W)`.
struct Col2Im {
    k: usize,
    h: usize,
    w: usize,
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &candle_core::Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("expected a contiguous input"),
    }
}

fn im2col<T: Copy + Default>(x: &[T], bc: usize, k: usize, h: usize, w: usize) -> Vec<T> {
    let (hw, p) = (h * w, (k / 2) as isize);
    let mut out = vec![T::default(); bc * k * k * hw];
    for (plane, src) in x.chunks_exact(hw).enumerate() {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut out[(plane * k * k + ky * k + kx) * hw..][..hw];
                let (dy, dx) = (ky as isize - p, kx as isize - p);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let s0 = sy as usize * w + (x0 as isize + dx) as usize;
                    row[y * w + x0..y * w + x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
    out
}

fn col2im<T: Copy + Default + std::ops::AddAssign>(cols: &[T], bc: usize, k: usize, h: usize, w: usize) -> Vec<T> {
    let (hw, p) = (h * w, (k / 2) as isize);
    let mut out = vec![T::default(); bc * hw];
    for (plane, dst) in out.chunks_exact_mut(hw).enumerate() {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[(plane * k * k + ky * k + kx) * hw..][..hw];
                let (dy, dx) = (ky as isize - p, kx as isize - p);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    let s0 = sy as usize * w;
                    for x in x0..x1 {
                        dst[s0 + (x as isize + dx) as usize] += row[y * w + x];
                    }
                }
            }
        }
    }
    out
}

impl candle_core::CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let (b, c, h, w) = layout.shape().dims4()?;
        if (h, w) != (self.h, self.w) {
            candle_core::bail!("im2col built for {}x{}, got {h}x{w}", self.h, self.w);
        }
        let shape = candle_core::Shape::from((b, c * self.k * self.k, h * w));
        let out = match storage {
            S::F32(d) => S::F32(im2col(contiguous_slice(d, layout)?, b * c, self.k, h, w)),
            S::F64(d) => S::F64(im2col(contiguous_slice(d, layout)?, b * c, self.k, h, w)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = grad.contiguous()?.apply_op1(Col2Im {
            k: self.k,
            h: self.h,
            w: self.w,
        })?;
        Ok(Some(g))
    }
}

impl candle_core::CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let (b, ckk, hw) = layout.shape().dims3()?;
        let kk = self.k * self.k;
        if hw != self.h * self.w || ckk % kk != 0 {
            candle_core::bail!("col2im got incompatible shape {:?}", layout.shape());
        }
        let c = ckk / kk;
        let shape = candle_core::Shape::from((b, c, self.h, self.w));
        let out = match storage {
            S::F32(d) => S::F32(col2im(contiguous_slice(d, layout)?, b * c, self.k, self.h, self.w)),
            S::F64(d) => S::F64(col2im(contiguous_slice(d, layout)?, b * c, self.k, self.h, self.w)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = grad.contiguous()?.apply_op1(Im2Col {
            k: self.k,
            h: self.h,
            w: self.w,
        })?;
        Ok(Some(g))
    }
}

/// Batch normalization over (batch, height, width) per channel.
#[derive(Clone)]
pub struct BatchNorm2d {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(s: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: s.constant("weight", &[channels], 1.0)?,
            bias: s.constant("bias", &[channels], 0.0)?,
            running_mean: s.buffer("running_mean", &[channels], 0.0)?,
            running_var: s.buffer("running_var", &[channels], 1.0)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.weight.dims()[0] {
            return Err(Error::shape(format!(
                "batch norm expects {} channels, got {c}",
                self.weight.dims()[0]
            )));
        }
        if mode.is_train() {
            let stats = Arc::new(Mutex::new(Vec::new()));
            let y = x.contiguous()?.apply_op3(
                self.weight.as_tensor(),
                self.bias.as_tensor(),
                BatchNormTrain {
                    eps: self.eps,
                    stats: stats.clone(),
                },
            )?;
            let stats = std::mem::take(&mut *stats.lock().expect("stats lock"));
            let n = (b * h * w) as f64;
            // Running variance tracks the unbiased estimate.
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let mean: Vec<f64> = stats.iter().map(|s| s.0).collect();
            let var: Vec<f64> = stats.iter().map(|s| s.1 * unbiased).collect();
            let dev = x.device();
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (Tensor::from_vec(mean, c, dev)?.to_dtype(x.dtype())? * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))?
                + (Tensor::from_vec(var, c, dev)?.to_dtype(x.dtype())? * m)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            return Ok(y);
        }
        let mean = self.running_mean.as_tensor().reshape((1, c, 1, 1))?;
        let var = self.running_var.as_tensor().reshape((1, c, 1, 1))?;
        let inv_std = (var + self.eps)?.sqrt()?.recip()?;
        let xhat = x.broadcast_sub(&mean)?.broadcast_mul(&inv_std)?;
        let scale = self.weight.as_tensor().reshape((1, c, 1, 1))?;
        let shift = self.bias.as_tensor().reshape((1, c, 1, 1))?;
        Ok(xhat.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

trait Elem: Copy + Default {
    fn to64(self) -> f64;
    fn from64(v: f64) -> Self;
}

impl Elem for f32 {
    fn to64(self) -> f64 {
        self as f64
    }
    fn from64(v: f64) -> Self {
        v as f32
    }
}

impl Elem for f64 {
    fn to64(self) -> f64 {
        self
    }
    fn from64(v: f64) -> Self {
        v
    }
}

/// Per-channel batch mean and biased variance of a contiguous
/// `(B, C, H·W)` buffer.
fn channel_moments<T: Elem>(x: &[T], b: usize, c: usize, hw: usize) -> Vec<(f64, f64)> {
    let n = (b * hw) as f64;
    (0..c)
        .map(|ch| {
            let planes = || (0..b).map(move |i| &x[(i * c + ch) * hw..][..hw]);
            let mean = planes().flatten().map(|v| v.to64()).sum::<f64>() / n;
            let var = planes().flatten().map(|v| (v.to64() - mean).powi(2)).sum::<f64>() / n;
            (mean, var)
        })
        .collect()
}

/// Training-mode batch norm `y = γ (x − μ_B) / sqrt(σ²_B + ε) + β` as one
/// op with an analytic backward. Batch moments are handed back through
/// `stats` for the running-average update.
struct BatchNormTrain {
    eps: f64,
    stats: Arc<Mutex<Vec<(f64, f64)>>>,
}

/// Backward of [`BatchNormTrain`] on `(x, γ, dy)`, packed as
/// `[dx (B·C·H·W), dγ (C), dβ (C)]`.
struct BatchNormTrainGrad {
    eps: f64,
}

fn bn_forward<T: Elem>(x: &[T], g: &[T], beta: &[T], dims: (usize, usize, usize), eps: f64) -> (Vec<T>, Vec<(f64, f64)>) {
    let (b, c, hw) = dims;
    let stats = channel_moments(x, b, c, hw);
    let mut y = vec![T::default(); x.len()];
    for i in 0..b {
        for (ch, &(mean, var)) in stats.iter().enumerate() {
            let k = g[ch].to64() / (var + eps).sqrt();
            let off = beta[ch].to64() - mean * k;
            let base = (i * c + ch) * hw;
            for (o, v) in y[base..base + hw].iter_mut().zip(&x[base..base + hw]) {
                *o = T::from64(v.to64() * k + off);
            }
        }
    }
    (y, stats)
}

fn bn_backward<T: Elem>(x: &[T], g: &[T], dy: &[T], dims: (usize, usize, usize), eps: f64) -> Vec<T> {
    let (b, c, hw) = dims;
    let n = (b * hw) as f64;
    let stats = channel_moments(x, b, c, hw);
    let mut out = vec![T::default(); x.len() + 2 * c];
    for (ch, &(mean, var)) in stats.iter().enumerate() {
        let inv = 1.0 / (var + eps).sqrt();
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for i in 0..b {
            let base = (i * c + ch) * hw;
            for (d, v) in dy[base..base + hw].iter().zip(&x[base..base + hw]) {
                sum_dy += d.to64();
                sum_dy_xhat += d.to64() * (v.to64() - mean) * inv;
            }
        }
        let k = g[ch].to64() * inv;
        for i in 0..b {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                let xhat = (x[j].to64() - mean) * inv;
                out[j] = T::from64(k * (dy[j].to64() - sum_dy / n - xhat * sum_dy_xhat / n));
            }
        }
        out[x.len() + ch] = T::from64(sum_dy_xhat);
        out[x.len() + c + ch] = T::from64(sum_dy);
    }
    out
}

fn bn_dims(l: &candle_core::Layout) -> candle_core::Result<(usize, usize, usize)> {
    let (b, c, h, w) = l.shape().dims4()?;
    Ok((b, c, h * w))
}

impl candle_core::CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &candle_core::CpuStorage,
        l1: &candle_core::Layout,
        s2: &candle_core::CpuStorage,
        l2: &candle_core::Layout,
        s3: &candle_core::CpuStorage,
        l3: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let dims = bn_dims(l1)?;
        let (y, stats) = match (s1, s2, s3) {
            (S::F32(x), S::F32(g), S::F32(b)) => {
                let (y, st) = bn_forward(
                    contiguous_slice(x, l1)?,
                    contiguous_slice(g, l2)?,
                    contiguous_slice(b, l3)?,
                    dims,
                    self.eps,
                );
                (S::F32(y), st)
            }
            (S::F64(x), S::F64(g), S::F64(b)) => {
                let (y, st) = bn_forward(
                    contiguous_slice(x, l1)?,
                    contiguous_slice(g, l2)?,
                    contiguous_slice(b, l3)?,
                    dims,
                    self.eps,
                );
                (S::F64(y), st)
            }
            _ => candle_core::bail!("batch norm expects matching f32 or f64 inputs"),
        };
        *self.stats.lock().expect("stats lock") = stats;
        Ok((y, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x.dims4()?;
        let n = b * c * h * w;
        let packed = x.detach().apply_op3_no_bwd(
            &gamma.detach(),
            &grad.detach().contiguous()?,
            &BatchNormTrainGrad { eps: self.eps },
        )?;
        let dx = packed.narrow(0, 0, n)?.reshape((b, c, h, w))?;
        let dg = packed.narrow(0, n, c)?;
        let db = packed.narrow(0, n + c, c)?;
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

impl candle_core::CustomOp3 for BatchNormTrainGrad {
    fn name(&self) -> &'static str {
        "batch-norm-train-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &candle_core::CpuStorage,
        l1: &candle_core::Layout,
        s2: &candle_core::CpuStorage,
        l2: &candle_core::Layout,
        s3: &candle_core::CpuStorage,
        l3: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let dims = bn_dims(l1)?;
        let len = l1.shape().elem_count() + 2 * dims.1;
        let out = match (s1, s2, s3) {
            (S::F32(x), S::F32(g), S::F32(d)) => S::F32(bn_backward(
                contiguous_slice(x, l1)?,
                contiguous_slice(g, l2)?,
                contiguous_slice(d, l3)?,
                dims,
                self.eps,
            )),
            (S::F64(x), S::F64(g), S::F64(d)) => S::F64(bn_backward(
                contiguous_slice(x, l1)?,
                contiguous_slice(g, l2)?,
                contiguous_slice(d, l3)?,
                dims,
                self.eps,
            )),
            _ => candle_core::bail!("batch norm grad expects matching f32 or f64 inputs"),
        };
        Ok((out, candle_core::Shape::from(len)))
    }
}

/// Affine map on the last dimension. Weight is stored `(out, in)`.
#[derive(Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(s: &mut Scope, in_f: usize, out_f: usize) -> Result<Self> {
        Ok(Self {
            weight: s.he_uniform("weight", &[out_f, in_f], in_f)?,
            bias: s.constant("bias", &[out_f], 0.0)?,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_f = *dims.last().ok_or_else(|| Error::shape("linear on a scalar"))?;
        let out_f = self.weight.dims()[0];
        if in_f != self.weight.dims()[1] {
            return Err(Error::shape(format!(
                "linear expects {} features, got {in_f}",
                self.weight.dims()[1]
            )));
        }
        let rows = x.elem_count() / in_f;
        let y = x
            .reshape((rows, in_f))?
            .matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = out_f;
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalization over the last dimension.
#[derive(Clone)]
pub struct LayerNorm {
    weight: Var,
    bias: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(s: &mut Scope, features: usize) -> Result<Self> {
        Ok(Self {
            weight: s.constant("weight", &[features], 1.0)?,
            bias: s.constant("bias", &[features], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let xhat = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

/// Inverted dropout. Identity outside training or when `p == 0`.
pub fn dropout(x: &Tensor, p: f64, mode: &mut Mode) -> Result<Tensor> {
    match mode {
        Mode::Train(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let mask: Vec<f64> = (0..x.elem_count())
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                .collect();
            let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
            Ok((x * mask)?)
        }
        _ => Ok(x.clone()),
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Softmax over the last dimension. The row maximum is subtracted as a
/// constant; this does not change the result or its gradient.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// 2×2 max pooling with stride 2. Built from a reshape and two max
/// reductions so the gradient routes the full upstream value to the argmax.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "max pooling needs even spatial dims, got {h}x{w}"
        )));
    }
    Ok(x
        .reshape((b, c, h / 2, 2, w / 2, 2))?
        .max(5)?
        .max(3)?)
}

fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.75;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Interpolation matrix of shape `(n, 2n)` for bicubic ×2 upsampling along
/// one axis (half-pixel centers, a = -0.75, reflected boundary taps).
/// Right-multiplying a row vector of length `n` yields the upsampled row.
pub fn bicubic_up2_matrix(n: usize) -> Vec<f64> {
    let out = 2 * n;
    let mut m = vec![0.0; n * out];
    for o in 0..out {
        let src = (o as f64 + 0.5) / 2.0 - 0.5;
        let base = src.floor();
        let t = src - base;
        let base = base as isize;
        let taps = [
            (base - 1, cubic_weight(1.0 + t)),
            (base, cubic_weight(t)),
            (base + 1, cubic_weight(1.0 - t)),
            (base + 2, cubic_weight(2.0 - t)),
        ];
        for (idx, wgt) in taps {
            m[reflect_index(idx, n) * out + o] += wgt;
        }
    }
    m
}

/// Interpolation matrix of shape `(n_in, n_out)` for bilinear resizing with
/// half-pixel centers and clamped edges. Every column is a convex weighting.
pub fn bilinear_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_in * n_out];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let t = src - i0 as f64;
        m[i0 * n_out + o] += 1.0 - t;
        m[i1 * n_out + o] += t;
    }
    m
}

/// Applies separable resampling matrices `rows` `(H, H')` and `cols`
/// `(W, W')` to a `(B, C, H, W)` tensor.
fn resample(x: &Tensor, rows: Vec<f64>, h_out: usize, cols: Vec<f64>, w_out: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let dev = x.device();
    let rows = Tensor::from_vec(rows, (h, h_out), dev)?.to_dtype(x.dtype())?;
    let cols = Tensor::from_vec(cols, (w, w_out), dev)?.to_dtype(x.dtype())?;
    let y = x.reshape((b * c * h, w))?.matmul(&cols)?;
    let y = y
        .reshape((b, c, h, w_out))?
        .transpose(2, 3)?
        .contiguous()?
        .reshape((b * c * w_out, h))?
        .matmul(&rows)?;
    Ok(y
        .reshape((b, c, w_out, h_out))?
        .transpose(2, 3)?
        .contiguous()?)
}

/// Bicubic ×2 upsampling of a `(B, C, H, W)` tensor.
pub fn upsample_bicubic2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    resample(x, bicubic_up2_matrix(h), 2 * h, bicubic_up2_matrix(w), 2 * w)
}

/// Bilinear resize of a `(B, C, H, W)` tensor to `(h_out, w_out)`.
pub fn resize_bilinear(x: &Tensor, h_out: usize, w_out: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (h_out, w_out) {
        return Ok(x.clone());
    }
    resample(x, bilinear_matrix(h, h_out), h_out, bilinear_matrix(w, w_out), w_out)
}
