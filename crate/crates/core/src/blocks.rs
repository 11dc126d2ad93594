//! Encoder/decoder building blocks shared by every architecture.
//!
//! Convolutions are size-preserving, so a 5-level encoder on a 256×256 input
//! produces stages at 256, 128, 64, 32 and 16 pixels and the decoder walks
//! back up through exactly those sizes.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::fusion::{flatten_tokens, unflatten_tokens, MultiHeadAttention};
use crate::nn::{self, BatchNorm2d, Conv2d, Mode, Scope};

fn spatial(x: &Tensor) -> Result<(usize, usize)> {
    let (_, _, h, w) = x.dims4()?;
    Ok((h, w))
}

/// conv3×3 → batch-norm → ReLU, twice.
#[derive(Clone)]
pub struct DoubleConv {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl DoubleConv {
    pub fn new(s: &mut Scope, in_c: usize, out_c: usize) -> Result<Self> {
        if in_c == 0 || out_c == 0 {
            return Err(Error::invalid("double conv needs positive channel counts"));
        }
        Ok(Self {
            conv1: Conv2d::new(&mut s.sub("conv1"), in_c, out_c, 3, true)?,
            bn1: BatchNorm2d::new(&mut s.sub("bn1"), out_c)?,
            conv2: Conv2d::new(&mut s.sub("conv2"), out_c, out_c, 3, true)?,
            bn2: BatchNorm2d::new(&mut s.sub("bn2"), out_c)?,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let (h, w) = spatial(x)?;
        if h < 3 || w < 3 {
            return Err(Error::shape(format!(
                "double conv needs spatial dims >= 3, got {h}x{w}"
            )));
        }
        let x = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        Ok(self.bn2.forward(&self.conv2.forward(&x)?, mode)?.relu()?)
    }
}

/// 2×2 max-pool down-sampling between encoder stages.
pub fn down_stage(x: &Tensor) -> Result<Tensor> {
    nn::max_pool2x2(x)
}

/// Decoder stage: bicubic ×2 upsampling, a 3×3 convolution (with batch-norm
/// and ReLU) reducing channels, concatenation with the skip map and a
/// [`DoubleConv`].
#[derive(Clone)]
pub struct UpStage {
    conv: Conv2d,
    bn: BatchNorm2d,
    merge: DoubleConv,
}

impl UpStage {
    /// `skip_c` is the channel count of whatever is concatenated at this
    /// stage (twice the encoder width for dual-encoder decoders).
    pub fn new(s: &mut Scope, in_c: usize, skip_c: usize, out_c: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut s.sub("up_conv"), in_c, out_c, 3, true)?,
            bn: BatchNorm2d::new(&mut s.sub("up_bn"), out_c)?,
            merge: DoubleConv::new(&mut s.sub("merge"), skip_c + out_c, out_c)?,
        })
    }

    pub fn upsample(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let up = nn::upsample_bicubic2x(x)?;
        Ok(self.bn.forward(&self.conv.forward(&up)?, mode)?.relu()?)
    }

    pub fn merge(&self, up: &Tensor, skip: &Tensor, mode: &Mode) -> Result<Tensor> {
        if spatial(up)? != spatial(skip)? {
            return Err(Error::shape(format!(
                "upsampled map is {:?} but skip is {:?}",
                spatial(up)?,
                spatial(skip)?
            )));
        }
        let cat = Tensor::cat(&[skip, up], 1)?;
        self.merge.forward(&cat, mode)
    }

    pub fn forward(&self, x: &Tensor, skip: &Tensor, mode: &Mode) -> Result<Tensor> {
        let (h, w) = spatial(x)?;
        if spatial(skip)? != (2 * h, 2 * w) {
            return Err(Error::shape(format!(
                "skip must be twice the size of the decoder input ({h}x{w}), got {:?}",
                spatial(skip)?
            )));
        }
        let up = self.upsample(x, mode)?;
        self.merge(&up, skip, mode)
    }
}

/// 1×1 convolution followed by batch-norm.
#[derive(Clone)]
struct Projection {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl Projection {
    fn new(s: &mut Scope, in_c: usize, out_c: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut s.sub("conv"), in_c, out_c, 1, true)?,
            bn: BatchNorm2d::new(&mut s.sub("bn"), out_c)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, mode)
    }
}

/// Additive attention gate on a skip connection.
///
/// `alpha = sigmoid(psi(relu(W_x x + W_g g + b_g)) + b_psi)` and the output is
/// `x * alpha`, with `alpha` broadcast over channels. Each linear map is a 1×1
/// convolution followed by batch-norm. A gating signal whose spatial size
/// differs from `x` is bilinearly resampled onto `x`'s grid first.
#[derive(Clone)]
pub struct AttentionGate {
    w_g: Projection,
    w_x: Projection,
    psi: Projection,
}

impl AttentionGate {
    pub fn new(s: &mut Scope, gate_c: usize, skip_c: usize, inter_c: usize) -> Result<Self> {
        if inter_c == 0 {
            return Err(Error::invalid("attention gate needs F_int > 0"));
        }
        Ok(Self {
            w_g: Projection::new(&mut s.sub("w_g"), gate_c, inter_c)?,
            w_x: Projection::new(&mut s.sub("w_x"), skip_c, inter_c)?,
            psi: Projection::new(&mut s.sub("psi"), inter_c, 1)?,
        })
    }

    pub fn w_g(&self) -> (&Conv2d, &BatchNorm2d) {
        (&self.w_g.conv, &self.w_g.bn)
    }

    pub fn w_x(&self) -> (&Conv2d, &BatchNorm2d) {
        (&self.w_x.conv, &self.w_x.bn)
    }

    pub fn psi(&self) -> (&Conv2d, &BatchNorm2d) {
        (&self.psi.conv, &self.psi.bn)
    }

    /// Attention coefficients, shape `(B, 1, H, W)`.
    pub fn coefficients(&self, x: &Tensor, g: &Tensor, mode: &Mode) -> Result<Tensor> {
        let (xb, _, h, w) = x.dims4()?;
        let (gb, _, _, _) = g.dims4()?;
        if xb != gb {
            return Err(Error::shape(format!(
                "gate batch {gb} differs from skip batch {xb}"
            )));
        }
        let g = nn::resize_bilinear(g, h, w)?;
        let joined = (self.w_g.forward(&g, mode)? + self.w_x.forward(x, mode)?)?.relu()?;
        nn::sigmoid(&self.psi.forward(&joined, mode)?)
    }

    pub fn forward(&self, x: &Tensor, g: &Tensor, mode: &Mode) -> Result<Tensor> {
        let alpha = self.coefficients(x, g, mode)?;
        Ok(x.broadcast_mul(&alpha)?)
    }
}

/// Cross-attention gate on a skip connection.
///
/// The deeper map `Y` (channels `deeper_c`, half the skip's size) and the
/// max-pooled skip `S` are each projected to the skip's channel count.
/// Single-head attention takes queries and keys from `Y` and values from `S`;
/// the result is projected, squashed through a sigmoid, bilinearly upsampled
/// back to the skip's size and multiplied into the skip per pixel and per
/// channel.
#[derive(Clone)]
pub struct CrossAttentionSkip {
    deeper_proj: Projection,
    skip_proj: Projection,
    attention: MultiHeadAttention,
    out_proj: Projection,
}

impl CrossAttentionSkip {
    pub fn new(s: &mut Scope, skip_c: usize, deeper_c: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            deeper_proj: Projection::new(&mut s.sub("deeper_proj"), deeper_c, skip_c)?,
            skip_proj: Projection::new(&mut s.sub("skip_proj"), skip_c, skip_c)?,
            attention: MultiHeadAttention::new(&mut s.sub("attention"), skip_c, heads)?,
            out_proj: Projection::new(&mut s.sub("out_proj"), skip_c, skip_c)?,
        })
    }

    pub fn attention(&self) -> &MultiHeadAttention {
        &self.attention
    }

    /// Gate values in `(0, 1)`, same shape as the skip map.
    pub fn gate(&self, skip: &Tensor, deeper: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let (sb, _, h, w) = skip.dims4()?;
        let (db, _, dh, dw) = deeper.dims4()?;
        if sb != db || h != 2 * dh || w != 2 * dw {
            return Err(Error::shape(format!(
                "cross-attention needs the deeper map at half the skip size: skip {:?}, deeper {:?}",
                skip.dims(),
                deeper.dims()
            )));
        }
        let y = self.deeper_proj.forward(deeper, mode)?.relu()?;
        let s = self
            .skip_proj
            .forward(&nn::max_pool2x2(skip)?, mode)?
            .relu()?;
        let yt = flatten_tokens(&y)?;
        let st = flatten_tokens(&s)?;
        let z = self.attention.forward(&yt, &yt, &st, mode)?;
        let z = unflatten_tokens(&z, dh, dw)?;
        let gate = nn::sigmoid(&self.out_proj.forward(&z, mode)?)?;
        nn::resize_bilinear(&gate, h, w)
    }

    pub fn forward(&self, skip: &Tensor, deeper: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let gate = self.gate(skip, deeper, mode)?;
        Ok((skip * gate)?)
    }
}
