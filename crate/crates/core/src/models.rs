//! The six segmentation networks and their checkpoint format.
//!
//! Single-modality networks (`UNET`, `ATT_UNET`, `XATT_UNET`) use a 5-level
//! encoder of widths `w, 2w, 4w, 8w, 16w` and a bicubic-upsampling decoder.
//! The attention variants gate each skip connection before it is merged.
//!
//! Dual networks (`DUAL_UNET`, `COLEARN_UNET`, `DXM_TRANSFUSE`) run one
//! 4-level encoder per modality (`w .. 8w`), fuse the two pooled `8w`-channel
//! maps into a `16w`-channel stack, pass it through a shared `16w → 16w`
//! bottleneck stage and decode with skip maps formed by concatenating both
//! encoders' same-level outputs. Only the fusion differs between them.
//!
//! All networks end in a 1×1 convolution emitting one channel of logits; the
//! sigmoid is applied by the losses and metrics. The bicubic decoder is used
//! for every architecture, including the plain U-Net.
//!
//! At the default width of 64 the parameter counts are
//!
//! | architecture    | parameters |
//! |-----------------|-----------:|
//! | `UNET`          | 34,527,041 |
//! | `ATT_UNET`      | 34,878,573 |
//! | `XATT_UNET`     | 37,324,801 |
//! | `DUAL_UNET`     | 47,068,289 |
//! | `DXM_TRANSFUSE` | 53,373,057 |
//! | `COLEARN_UNET`  | 56,506,497 |

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype as StDtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::blocks::{down_stage, AttentionGate, CrossAttentionSkip, DoubleConv, UpStage};
use crate::error::{Error, Result};
use crate::fusion::{late_concat_fuse, CoLearnFusion, DxmFusion};
use crate::nn::{Conv2d, Mode, ParamStore, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Architecture {
    Unet,
    AttUnet,
    XattUnet,
    DualUnet,
    ColearnUnet,
    DxmTransfuse,
}

impl Architecture {
    pub const ALL: [Architecture; 6] = [
        Architecture::Unet,
        Architecture::AttUnet,
        Architecture::XattUnet,
        Architecture::DualUnet,
        Architecture::ColearnUnet,
        Architecture::DxmTransfuse,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Architecture::Unet => "UNET",
            Architecture::AttUnet => "ATT_UNET",
            Architecture::XattUnet => "XATT_UNET",
            Architecture::DualUnet => "DUAL_UNET",
            Architecture::ColearnUnet => "COLEARN_UNET",
            Architecture::DxmTransfuse => "DXM_TRANSFUSE",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Architecture::Unet => "U-Net",
            Architecture::AttUnet => "Att. U-Net",
            Architecture::XattUnet => "Cross-Att. U-Net",
            Architecture::DualUnet => "Dual U-Net",
            Architecture::ColearnUnet => "Co-Learn U-Net",
            Architecture::DxmTransfuse => "DXM-TransFuse U-Net",
        }
    }

    pub fn is_dual(self) -> bool {
        matches!(
            self,
            Architecture::DualUnet | Architecture::ColearnUnet | Architecture::DxmTransfuse
        )
    }

    pub fn arity(self) -> usize {
        if self.is_dual() {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace(['-', ' '], "_");
        Architecture::ALL
            .into_iter()
            .find(|a| a.key() == norm)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown architecture `{s}` (expected one of {})",
                    Architecture::ALL.map(|a| a.key()).join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub in_channels: usize,
    pub base_width: usize,
    /// Attention heads of the cross-modal transformer blocks. The
    /// cross-attention skips always use a single head.
    pub heads: usize,
    pub dropout_p: f64,
    pub seed: u64,
    /// Square input side length.
    pub image_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Unet,
            in_channels: 3,
            base_width: 64,
            heads: 4,
            dropout_p: 0.1,
            seed: 0,
            image_size: 256,
        }
    }
}

impl ModelConfig {
    pub fn new(architecture: Architecture) -> Self {
        Self {
            architecture,
            ..Self::default()
        }
    }

    /// Feature dimension of the fused bottleneck tokens.
    pub fn fusion_dim(&self) -> usize {
        8 * self.base_width
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.in_channels == 0 {
            errs.push("in_channels must be positive".to_string());
        }
        if self.base_width < 8 {
            errs.push(format!("base_width must be >= 8, got {}", self.base_width));
        }
        if self.heads == 0 || self.fusion_dim() % self.heads != 0 {
            errs.push(format!(
                "heads ({}) must divide the bottleneck feature dim ({})",
                self.heads,
                self.fusion_dim()
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            errs.push(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        if self.image_size % 16 != 0 || self.image_size < 48 {
            errs.push(format!(
                "image_size must be a multiple of 16 and >= 48, got {}",
                self.image_size
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Network input: one stream for single-modality networks, the `(jet, rgb)`
/// pair, in that order, for dual networks.
#[derive(Clone, Copy)]
pub enum ModelInput<'a> {
    Single(&'a Tensor),
    Pair { jet: &'a Tensor, rgb: &'a Tensor },
}

impl ModelInput<'_> {
    fn arity(&self) -> usize {
        match self {
            ModelInput::Single(_) => 1,
            ModelInput::Pair { .. } => 2,
        }
    }
}

#[derive(Clone)]
struct Encoder {
    stages: Vec<DoubleConv>,
}

impl Encoder {
    fn new(s: &mut Scope, in_c: usize, widths: &[usize]) -> Result<Self> {
        let mut stages = Vec::with_capacity(widths.len());
        let mut c = in_c;
        for (i, &w) in widths.iter().enumerate() {
            stages.push(DoubleConv::new(&mut s.sub(&i.to_string()), c, w)?);
            c = w;
        }
        Ok(Self { stages })
    }

    /// Output of every stage, finest first.
    fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Vec<Tensor>> {
        let mut outs: Vec<Tensor> = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let input = match outs.last() {
                Some(prev) => down_stage(prev)?,
                None => x.clone(),
            };
            debug_assert!(i == 0 || input.dims()[1] == outs[i - 1].dims()[1]);
            outs.push(stage.forward(&input, mode)?);
        }
        Ok(outs)
    }
}

#[derive(Clone)]
enum SkipGate {
    Plain,
    Attention(Vec<AttentionGate>),
    CrossAttention(Vec<CrossAttentionSkip>),
}

#[derive(Clone)]
struct SingleNet {
    encoder: Encoder,
    decoder: Vec<UpStage>,
    gates: SkipGate,
    head: Conv2d,
}

#[derive(Clone)]
enum Fusion {
    LateConcat,
    CoLearn(CoLearnFusion),
    Dxm(DxmFusion),
}

#[derive(Clone)]
struct DualNet {
    jet_encoder: Encoder,
    rgb_encoder: Encoder,
    fusion: Fusion,
    bottleneck: DoubleConv,
    decoder: Vec<UpStage>,
    head: Conv2d,
}

#[derive(Clone)]
enum Net {
    Single(SingleNet),
    Dual(DualNet),
}

/// A built network together with its parameters.
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    net: Net,
}

pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    Model::new(cfg, DType::F32)
}

/// Widths of the decoder levels, deepest first: `(level, width)`.
fn decoder_levels(w: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..4).rev().map(move |l| (l, w << l))
}

impl Model {
    pub fn new(cfg: &ModelConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed, dtype);
        let w = cfg.base_width;
        let net = {
            let mut root = store.root();
            if cfg.architecture.is_dual() {
                let enc_widths = [w, 2 * w, 4 * w, 8 * w];
                let jet_encoder = Encoder::new(&mut root.sub("jet_encoder"), cfg.in_channels, &enc_widths)?;
                let rgb_encoder = Encoder::new(&mut root.sub("rgb_encoder"), cfg.in_channels, &enc_widths)?;
                let fusion = match cfg.architecture {
                    Architecture::DualUnet => Fusion::LateConcat,
                    Architecture::ColearnUnet => {
                        Fusion::CoLearn(CoLearnFusion::new(&mut root.sub("fusion"), 8 * w)?)
                    }
                    _ => Fusion::Dxm(DxmFusion::new(
                        &mut root.sub("fusion"),
                        8 * w,
                        cfg.heads,
                        cfg.dropout_p,
                    )?),
                };
                let bottleneck = DoubleConv::new(&mut root.sub("bottleneck"), 16 * w, 16 * w)?;
                let mut dec = root.sub("decoder");
                let decoder = decoder_levels(w)
                    .map(|(l, c)| UpStage::new(&mut dec.sub(&l.to_string()), 2 * c, 2 * c, c))
                    .collect::<Result<Vec<_>>>()?;
                let head = Conv2d::new(&mut root.sub("head"), w, 1, 1, true)?;
                Net::Dual(DualNet {
                    jet_encoder,
                    rgb_encoder,
                    fusion,
                    bottleneck,
                    decoder,
                    head,
                })
            } else {
                let widths = [w, 2 * w, 4 * w, 8 * w, 16 * w];
                let encoder = Encoder::new(&mut root.sub("encoder"), cfg.in_channels, &widths)?;
                let decoder = {
                    let mut dec = root.sub("decoder");
                    decoder_levels(w)
                        .map(|(l, c)| UpStage::new(&mut dec.sub(&l.to_string()), 2 * c, c, c))
                        .collect::<Result<Vec<_>>>()?
                };
                let gates = match cfg.architecture {
                    Architecture::AttUnet => {
                        let mut gs = root.sub("gates");
                        SkipGate::Attention(
                            decoder_levels(w)
                                .map(|(l, c)| AttentionGate::new(&mut gs.sub(&l.to_string()), c, c, c / 2))
                                .collect::<Result<Vec<_>>>()?,
                        )
                    }
                    Architecture::XattUnet => {
                        let mut gs = root.sub("gates");
                        SkipGate::CrossAttention(
                            decoder_levels(w)
                                .map(|(l, c)| CrossAttentionSkip::new(&mut gs.sub(&l.to_string()), c, 2 * c, 1))
                                .collect::<Result<Vec<_>>>()?,
                        )
                    }
                    _ => SkipGate::Plain,
                };
                let head = Conv2d::new(&mut root.sub("head"), w, 1, 1, true)?;
                Net::Single(SingleNet {
                    encoder,
                    decoder,
                    gates,
                    head,
                })
            }
        };
        Ok(Self {
            config: cfg.clone(),
            store,
            net,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Number of learnable scalars. Batch-norm running statistics are
    /// buffers and are not counted.
    pub fn parameter_count(&self) -> usize {
        self.store.num_params()
    }

    fn check_image(&self, x: &Tensor, what: &str) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.config.image_size;
        if c != self.config.in_channels || h != s || w != s {
            return Err(Error::shape(format!(
                "{what} input must be (B, {}, {s}, {s}), got {:?}",
                self.config.in_channels,
                x.dims()
            )));
        }
        Ok(())
    }

    /// Per-pixel logits of shape `(B, 1, H, W)`.
    pub fn forward(&self, input: ModelInput, mode: &mut Mode) -> Result<Tensor> {
        let arity = self.config.architecture.arity();
        if input.arity() != arity {
            return Err(Error::invalid(format!(
                "{} takes {arity} input stream(s), got {}",
                self.config.architecture,
                input.arity()
            )));
        }
        match (&self.net, input) {
            (Net::Single(net), ModelInput::Single(x)) => {
                self.check_image(x, "image")?;
                net.forward(&x.to_dtype(self.dtype())?, mode)
            }
            (Net::Dual(net), ModelInput::Pair { jet, rgb }) => {
                self.check_image(jet, "jet")?;
                self.check_image(rgb, "rgb")?;
                if jet.dims()[0] != rgb.dims()[0] {
                    return Err(Error::shape("jet and rgb batches differ"));
                }
                net.forward(&jet.to_dtype(self.dtype())?, &rgb.to_dtype(self.dtype())?, mode)
            }
            _ => unreachable!("arity checked above"),
        }
    }
}

impl SingleNet {
    fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let feats = self.encoder.forward(x, mode)?;
        let mut d = feats[4].clone();
        for (i, up) in self.decoder.iter().enumerate() {
            let skip = &feats[3 - i];
            d = match &self.gates {
                SkipGate::Plain => up.forward(&d, skip, mode)?,
                SkipGate::Attention(gates) => {
                    let u = up.upsample(&d, mode)?;
                    let gated = gates[i].forward(skip, &u, mode)?;
                    up.merge(&u, &gated, mode)?
                }
                SkipGate::CrossAttention(gates) => {
                    let gated = gates[i].forward(skip, &d, mode)?;
                    up.forward(&d, &gated, mode)?
                }
            };
        }
        self.head.forward(&d)
    }
}

impl DualNet {
    fn forward(&self, jet: &Tensor, rgb: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let jf = self.jet_encoder.forward(jet, mode)?;
        let rf = self.rgb_encoder.forward(rgb, mode)?;
        let jp = down_stage(&jf[3])?;
        let rp = down_stage(&rf[3])?;
        let fused = match &self.fusion {
            Fusion::LateConcat => late_concat_fuse(&jp, &rp)?,
            Fusion::CoLearn(f) => f.forward(&jp, &rp)?,
            Fusion::Dxm(f) => f.forward(&jp, &rp, mode)?,
        };
        let mut d = self.bottleneck.forward(&fused, mode)?;
        for (i, up) in self.decoder.iter().enumerate() {
            let l = 3 - i;
            let skip = Tensor::cat(&[&jf[l], &rf[l]], 1)?;
            d = up.forward(&d, &skip, mode)?;
        }
        self.head.forward(&d)
    }
}

const CHECKPOINT_FORMAT: &str = "nerveseg-checkpoint/1";

/// Writes a checkpoint: one safetensors file whose tensors are the model's
/// parameters and buffers under their dotted names, and whose header
/// metadata carries `format`, `config` (the [`ModelConfig`] as JSON) and
/// `training_state` (free-form JSON supplied by the caller).
pub fn save_checkpoint(path: &Path, model: &Model, training_state: &serde_json::Value) -> Result<()> {
    let tensors = model.store.named_tensors();
    let mut blobs: Vec<(String, StDtype, Vec<usize>, Vec<u8>)> = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let shape = t.dims().to_vec();
        let flat = t.flatten_all()?;
        let (dt, bytes) = match t.dtype() {
            DType::F64 => (
                StDtype::F64,
                flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            ),
            _ => (
                StDtype::F32,
                flat.to_dtype(DType::F32)?
                    .to_vec1::<f32>()?
                    .iter()
                    .flat_map(|v| v.to_le_bytes())
                    .collect(),
            ),
        };
        blobs.push((name, dt, shape, bytes));
    }
    let views = blobs
        .iter()
        .map(|(n, dt, shape, bytes)| Ok((n.as_str(), TensorView::new(*dt, shape.clone(), bytes)?)))
        .collect::<Result<Vec<_>>>()?;
    let metadata = HashMap::from([
        ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
        ("config".to_string(), serde_json::to_string(&model.config)?),
        ("training_state".to_string(), serde_json::to_string(training_state)?),
    ]);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    safetensors::serialize_to_file(views, Some(metadata), path)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`], rebuilding the model
/// from the stored config (in the stored precision).
pub fn load_checkpoint(path: &Path) -> Result<(Model, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&bytes)?;
    let meta = meta
        .metadata()
        .clone()
        .ok_or_else(|| Error::Checkpoint(format!("{} has no metadata", path.display())))?;
    match meta.get("format") {
        Some(f) if f == CHECKPOINT_FORMAT => {}
        other => {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported format {other:?}",
                path.display()
            )))
        }
    }
    let get = |k: &str| {
        meta.get(k)
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing `{k}` record", path.display())))
    };
    let config: ModelConfig = serde_json::from_str(get("config")?)?;
    let state: serde_json::Value = serde_json::from_str(get("training_state")?)?;
    let st = SafeTensors::deserialize(&bytes)?;
    let mut map = HashMap::new();
    let mut dtype = DType::F32;
    for (name, view) in st.tensors() {
        let data = view.data();
        let t = match view.dtype() {
            StDtype::F32 => {
                let v: Vec<f32> = data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, view.shape(), &Device::Cpu)?
            }
            StDtype::F64 => {
                dtype = DType::F64;
                let v: Vec<f64> = data
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, view.shape(), &Device::Cpu)?
            }
            other => {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has unsupported dtype {other:?}"
                )))
            }
        };
        map.insert(name, t);
    }
    let model = Model::new(&config, dtype)?;
    model.store.load(&map)?;
    Ok((model, state))
}
