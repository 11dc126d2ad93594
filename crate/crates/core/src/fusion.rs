//! Bottleneck fusion for the dual-encoder networks.
//!
//! Each fusion takes the two modalities' deepest encoder maps, both
//! `(B, C, H, W)`, and returns a stacked `(B, 2C, H, W)` map that feeds the
//! shared bottleneck stage of the dual networks.
//!
//! Bottleneck maps are turned into token sequences by taking every spatial
//! position as a token and the channels as its features, so a 16×16
//! bottleneck becomes 256 tokens. No positional encoding is added; the
//! transformer block is therefore equivariant to permutations of its query
//! tokens and invariant to permutations of its context tokens.
//!
//! The co-learn weighting produces full spatial weight maps (one value per
//! channel and pixel). Per-channel scalar weights would be the other plausible
//! reading.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, LayerNorm, Linear, Mode, Scope};

/// Query tiles above this many score entries are processed in chunks of
/// query rows, which bounds memory for long sequences.
const ATTENTION_CHUNK_ELEMS: usize = 1 << 24;

/// `(B, C, H, W)` → `(B, H·W, C)`.
pub fn flatten_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// `(B, H·W, C)` → `(B, C, H, W)`.
pub fn unflatten_tokens(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = t.dims3()?;
    if n != h * w {
        return Err(Error::shape(format!(
            "{n} tokens cannot be laid out on a {h}x{w} grid"
        )));
    }
    Ok(t.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize)> {
    let (qd, kd, vd) = (q.dims(), k.dims(), v.dims());
    if qd.len() < 2 || kd.len() != qd.len() || vd.len() != qd.len() {
        return Err(Error::shape("attention operands must share rank >= 2"));
    }
    let r = qd.len();
    if qd[..r - 2] != kd[..r - 2] || qd[..r - 2] != vd[..r - 2] {
        return Err(Error::shape("attention operands disagree on batch dims"));
    }
    let dk = qd[r - 1];
    if dk == 0 {
        return Err(Error::shape("attention key dimension is zero"));
    }
    if kd[r - 1] != dk {
        return Err(Error::shape(format!(
            "queries have {dk} features, keys have {}",
            kd[r - 1]
        )));
    }
    if kd[r - 2] != vd[r - 2] {
        return Err(Error::shape(format!(
            "{} keys but {} values",
            kd[r - 2],
            vd[r - 2]
        )));
    }
    Ok((r, dk))
}

/// Row-stochastic attention weights `softmax(Q Kᵀ / sqrt(d_k))`.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    check_qkv(q, k, k)?;
    let dk = *q.dims().last().unwrap();
    let r = q.rank();
    let scores = (q.matmul(&k.transpose(r - 2, r - 1)?)? / (dk as f64).sqrt())?;
    nn::softmax_last(&scores)
}

/// `softmax(Q Kᵀ / sqrt(d_k)) V` over the trailing two dimensions; any
/// leading dimensions are batch dimensions.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (r, _) = check_qkv(q, k, v)?;
    let tq = q.dims()[r - 2];
    let tk = k.dims()[r - 2];
    let batch: usize = q.dims()[..r - 2].iter().product();
    let per_row = batch * tk;
    if tq * per_row <= ATTENTION_CHUNK_ELEMS || tq == 1 {
        return Ok(attention_weights(q, k)?.matmul(v)?);
    }
    let rows = (ATTENTION_CHUNK_ELEMS / per_row).max(1);
    let mut parts = Vec::with_capacity(tq.div_ceil(rows));
    let mut start = 0;
    while start < tq {
        let len = rows.min(tq - start);
        let qc = q.narrow(r - 2, start, len)?;
        parts.push(attention_weights(&qc, k)?.matmul(v)?);
        start += len;
    }
    Ok(Tensor::cat(&parts, r - 2)?)
}

/// Multi-head attention with learned input and output projections.
#[derive(Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(s: &mut Scope, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!(
                "{heads} heads do not divide feature dim {dim}"
            )));
        }
        Ok(Self {
            q: Linear::new(&mut s.sub("q"), dim, dim)?,
            k: Linear::new(&mut s.sub("k"), dim, dim)?,
            v: Linear::new(&mut s.sub("v"), dim, dim)?,
            out: Linear::new(&mut s.sub("out"), dim, dim)?,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn projections(&self) -> [&Linear; 4] {
        [&self.q, &self.k, &self.v, &self.out]
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x
            .reshape((b, t, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `query` is `(B, Tq, d)`; `key` and `value` are `(B, Tk, d)`.
    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor, _mode: &mut Mode) -> Result<Tensor> {
        let (b, tq, d) = query.dims3()?;
        let (kb, tk, _) = key.dims3()?;
        let (vb, tv, _) = value.dims3()?;
        if kb != b || vb != b {
            return Err(Error::shape(format!(
                "batch sizes differ: query {b}, key {kb}, value {vb}"
            )));
        }
        if tk != tv {
            return Err(Error::shape(format!("{tk} keys but {tv} values")));
        }
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(key)?)?;
        let v = self.split_heads(&self.v.forward(value)?)?;
        let z = scaled_dot_attention(&q, &k, &v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, tq, d))?;
        self.out.forward(&z)
    }
}

/// Transformer block in which the primary sequence attends to a context
/// sequence from the other modality:
///
/// ```text
/// y1 = LayerNorm(primary + Dropout(MHA(Q = primary, K = V = context)))
/// y2 = LayerNorm(y1 + Dropout(FFN(y1)))
/// ```
///
/// The feed-forward network is `d → 2d → 2d → d` with ReLU between layers.
#[derive(Clone)]
pub struct CrossModalTransformerBlock {
    attention: MultiHeadAttention,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ff3: Linear,
    norm2: LayerNorm,
    dropout_p: f64,
}

impl CrossModalTransformerBlock {
    pub fn new(s: &mut Scope, dim: usize, heads: usize, dropout_p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::invalid(format!(
                "dropout probability {dropout_p} outside [0, 1)"
            )));
        }
        Ok(Self {
            attention: MultiHeadAttention::new(&mut s.sub("attention"), dim, heads)?,
            norm1: LayerNorm::new(&mut s.sub("norm1"), dim)?,
            ff1: Linear::new(&mut s.sub("ff1"), dim, 2 * dim)?,
            ff2: Linear::new(&mut s.sub("ff2"), 2 * dim, 2 * dim)?,
            ff3: Linear::new(&mut s.sub("ff3"), 2 * dim, dim)?,
            norm2: LayerNorm::new(&mut s.sub("norm2"), dim)?,
            dropout_p,
        })
    }

    pub fn attention(&self) -> &MultiHeadAttention {
        &self.attention
    }

    pub fn feed_forward(&self) -> [&Linear; 3] {
        [&self.ff1, &self.ff2, &self.ff3]
    }

    pub fn norms(&self) -> [&LayerNorm; 2] {
        [&self.norm1, &self.norm2]
    }

    pub fn forward(&self, primary: &Tensor, context: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let (pb, _, pd) = primary.dims3()?;
        let (cb, _, cd) = context.dims3()?;
        if pb != cb {
            return Err(Error::shape(format!(
                "primary batch {pb} differs from context batch {cb}"
            )));
        }
        if pd != cd {
            return Err(Error::shape(format!(
                "primary has {pd} features, context has {cd}"
            )));
        }
        let attn = self.attention.forward(primary, context, context, mode)?;
        let attn = nn::dropout(&attn, self.dropout_p, mode)?;
        let y1 = self.norm1.forward(&(primary + attn)?)?;
        let ff = self.ff1.forward(&y1)?.relu()?;
        let ff = self.ff2.forward(&ff)?.relu()?;
        let ff = self.ff3.forward(&ff)?;
        let ff = nn::dropout(&ff, self.dropout_p, mode)?;
        self.norm2.forward(&(y1 + ff)?)
    }
}

fn check_pair(jet: &Tensor, rgb: &Tensor) -> Result<()> {
    if jet.dims() != rgb.dims() {
        return Err(Error::shape(format!(
            "modality bottlenecks differ: {:?} vs {:?}",
            jet.dims(),
            rgb.dims()
        )));
    }
    jet.dims4()?;
    Ok(())
}

/// Late concatenation: the two maps stacked along channels.
pub fn late_concat_fuse(jet: &Tensor, rgb: &Tensor) -> Result<Tensor> {
    check_pair(jet, rgb)?;
    Ok(Tensor::cat(&[jet, rgb], 1)?)
}

/// Co-learn fusion: per-modality weight maps are predicted from the stacked
/// modalities by 3×3 convolutions with a sigmoid, multiplied into each
/// modality's features, and the weighted maps are stacked.
#[derive(Clone)]
pub struct CoLearnFusion {
    jet_weight: Conv2d,
    rgb_weight: Conv2d,
}

impl CoLearnFusion {
    pub fn new(s: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            jet_weight: Conv2d::new(&mut s.sub("jet_weight"), 2 * channels, channels, 3, true)?,
            rgb_weight: Conv2d::new(&mut s.sub("rgb_weight"), 2 * channels, channels, 3, true)?,
        })
    }

    /// Weight maps for (jet, rgb), each the shape of one input.
    pub fn weights(&self, jet: &Tensor, rgb: &Tensor) -> Result<(Tensor, Tensor)> {
        check_pair(jet, rgb)?;
        let stacked = Tensor::cat(&[jet, rgb], 1)?;
        Ok((
            nn::sigmoid(&self.jet_weight.forward(&stacked)?)?,
            nn::sigmoid(&self.rgb_weight.forward(&stacked)?)?,
        ))
    }

    pub fn combine(jet: &Tensor, rgb: &Tensor, jet_w: &Tensor, rgb_w: &Tensor) -> Result<Tensor> {
        check_pair(jet, rgb)?;
        let j = jet.broadcast_mul(jet_w)?;
        let r = rgb.broadcast_mul(rgb_w)?;
        Ok(Tensor::cat(&[&j, &r], 1)?)
    }

    pub fn forward(&self, jet: &Tensor, rgb: &Tensor) -> Result<Tensor> {
        let (jw, rw) = self.weights(jet, rgb)?;
        Self::combine(jet, rgb, &jw, &rw)
    }
}

/// Dual cross-modal transformer fusion: jet tokens attend to rgb tokens and
/// rgb tokens attend to jet tokens in two separate blocks; both outputs are
/// laid back out as maps and stacked as `[jet ← rgb, rgb ← jet]`.
#[derive(Clone)]
pub struct DxmFusion {
    jet_from_rgb: CrossModalTransformerBlock,
    rgb_from_jet: CrossModalTransformerBlock,
}

impl DxmFusion {
    pub fn new(s: &mut Scope, channels: usize, heads: usize, dropout_p: f64) -> Result<Self> {
        Ok(Self {
            jet_from_rgb: CrossModalTransformerBlock::new(&mut s.sub("jet_from_rgb"), channels, heads, dropout_p)?,
            rgb_from_jet: CrossModalTransformerBlock::new(&mut s.sub("rgb_from_jet"), channels, heads, dropout_p)?,
        })
    }

    pub fn from_blocks(jet_from_rgb: CrossModalTransformerBlock, rgb_from_jet: CrossModalTransformerBlock) -> Self {
        Self {
            jet_from_rgb,
            rgb_from_jet,
        }
    }

    pub fn blocks(&self) -> (&CrossModalTransformerBlock, &CrossModalTransformerBlock) {
        (&self.jet_from_rgb, &self.rgb_from_jet)
    }

    pub fn forward(&self, jet: &Tensor, rgb: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        check_pair(jet, rgb)?;
        let (_, _, h, w) = jet.dims4()?;
        let jt = flatten_tokens(jet)?;
        let rt = flatten_tokens(rgb)?;
        let j = self.jet_from_rgb.forward(&jt, &rt, mode)?;
        let r = self.rgb_from_jet.forward(&rt, &jt, mode)?;
        Ok(Tensor::cat(
            &[&unflatten_tokens(&j, h, w)?, &unflatten_tokens(&r, h, w)?],
            1,
        )?)
    }
}
