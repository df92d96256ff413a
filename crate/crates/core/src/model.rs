//! Encoder–decoder assembly for the ablation variants.
//!
//! Both backbones share a 34-layer residual encoder (stage widths 64, 64, 128,
//! 256, 512 at strides 2, 4, 8, 16, 32). UGDA refines stages 2–5 in place, so
//! the refined maps feed both the next stage and the decoder skips. Auxiliary
//! heads read stages 4 and 5.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::attention::{ugda_forward, UgdaParams, DEFAULT_REDUCTION};
use crate::error::{Result, SegError};
use crate::nn::{join, BatchNorm2d, Conv2d, ConvTranspose2d, ParamStore};
use crate::ops;

/// Encoder stage widths, shallowest first.
pub const STAGE_CHANNELS: [usize; 5] = [64, 64, 128, 256, 512];
const BLOCKS_PER_LAYER: [usize; 4] = [3, 4, 6, 3];
/// Input sides must be multiples of this (five stride-2 reductions).
pub const SIZE_DIVISOR: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Unet,
    Linknet,
}

impl Backbone {
    pub const ALL: [Backbone; 2] = [Backbone::Unet, Backbone::Linknet];

    pub fn key(self) -> &'static str {
        match self {
            Backbone::Unet => "unet",
            Backbone::Linknet => "linknet",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Backbone::Unet => "U-Net",
            Backbone::Linknet => "LinkNet",
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Backbone {
    type Err = SegError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unet" | "u-net" => Ok(Backbone::Unet),
            "linknet" => Ok(Backbone::Linknet),
            other => Err(SegError::Config(format!("unknown backbone '{other}'"))),
        }
    }
}

/// The five ablation rows, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    #[serde(rename = "loss")]
    LossOnly,
    #[serde(rename = "attn")]
    AttentionOnly,
    #[serde(rename = "ds")]
    DsOnly,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Baseline, Variant::LossOnly, Variant::AttentionOnly, Variant::DsOnly, Variant::Full];

    pub fn key(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::LossOnly => "loss",
            Variant::AttentionOnly => "attn",
            Variant::DsOnly => "ds",
            Variant::Full => "full",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::LossOnly => "Loss-only",
            Variant::AttentionOnly => "Attention-only",
            Variant::DsOnly => "DS-only",
            Variant::Full => "UGDA-Net",
        }
    }

    /// `(attention, entropy loss, deep supervision)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Variant::Baseline => (false, false, false),
            Variant::LossOnly => (false, true, false),
            Variant::AttentionOnly => (true, false, false),
            Variant::DsOnly => (false, false, true),
            Variant::Full => (true, true, true),
        }
    }

    pub fn order(self) -> usize {
        Variant::ALL.iter().position(|v| *v == self).unwrap_or(usize::MAX)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Variant {
    type Err = SegError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "baseline" => Ok(Variant::Baseline),
            "loss" | "loss-only" => Ok(Variant::LossOnly),
            "attn" | "attention" | "attention-only" => Ok(Variant::AttentionOnly),
            "ds" | "ds-only" => Ok(Variant::DsOnly),
            "full" | "ugda" | "ugda-net" => Ok(Variant::Full),
            other => Err(SegError::Config(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub backbone: Backbone,
    pub use_attention: bool,
    pub use_entropy_loss: bool,
    pub use_deep_supervision: bool,
    pub pretrained_encoder: bool,
}

impl VariantConfig {
    pub fn new(backbone: Backbone, variant: Variant) -> Self {
        let (use_attention, use_entropy_loss, use_deep_supervision) = variant.flags();
        Self { backbone, use_attention, use_entropy_loss, use_deep_supervision, pretrained_encoder: false }
    }

    /// The named variant these flags correspond to, if any.
    pub fn variant(&self) -> Option<Variant> {
        let flags = (self.use_attention, self.use_entropy_loss, self.use_deep_supervision);
        Variant::ALL.into_iter().find(|v| v.flags() == flags)
    }

    /// `{backbone}_{variant}`, used for run directories and checkpoints.
    pub fn run_name(&self) -> String {
        let variant = match self.variant() {
            Some(v) => v.key().to_string(),
            None => format!(
                "custom-a{}l{}d{}",
                u8::from(self.use_attention),
                u8::from(self.use_entropy_loss),
                u8::from(self.use_deep_supervision)
            ),
        };
        format!("{}_{}", self.backbone.key(), variant)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    fn is_train(self) -> bool {
        self == Mode::Train
    }
}

#[derive(Clone, Debug)]
pub struct ModelOutputs {
    /// `(N,1,H,W)` logits of the decoder head.
    pub main_logits: Tensor,
    /// `(shallow, deep)` auxiliary logits at input resolution; empty in eval
    /// mode or without deep supervision.
    pub aux_logits: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct BuildOptions {
    pub seed: u64,
    pub dtype: DType,
    pub device: Device,
    /// Encoder weights in torchvision `resnet34` naming, required when
    /// `pretrained_encoder` is set.
    pub encoder_weights: Option<PathBuf>,
    pub attention_reduction: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            seed: 42,
            dtype: DType::F32,
            device: Device::Cpu,
            encoder_weights: None,
            attention_reduction: DEFAULT_REDUCTION,
        }
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let downsample = if stride != 1 || cin != cout {
            Some((
                Conv2d::new(store, &join(prefix, "downsample.0"), cin, cout, 1, stride, 0, false)?,
                BatchNorm2d::new(store, &join(prefix, "downsample.1"), cout)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(store, &join(prefix, "conv1"), cin, cout, 3, stride, 1, false)?,
            bn1: BatchNorm2d::new(store, &join(prefix, "bn1"), cout)?,
            conv2: Conv2d::new(store, &join(prefix, "conv2"), cout, cout, 3, 1, 1, false)?,
            bn2: BatchNorm2d::new(store, &join(prefix, "bn2"), cout)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let out = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let out = self.bn2.forward(&self.conv2.forward(&out)?, train)?;
        let identity = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((out + identity)?.relu()?)
    }
}

#[derive(Clone, Debug)]
struct ResNetEncoder {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    layers: Vec<Vec<BasicBlock>>,
}

impl ResNetEncoder {
    fn new(store: &mut ParamStore, prefix: &str) -> Result<Self> {
        let conv1 = Conv2d::new(store, &join(prefix, "conv1"), 3, 64, 7, 2, 3, false)?;
        let bn1 = BatchNorm2d::new(store, &join(prefix, "bn1"), 64)?;
        let mut layers = Vec::with_capacity(4);
        let mut cin = 64;
        for (li, &blocks) in BLOCKS_PER_LAYER.iter().enumerate() {
            let cout = STAGE_CHANNELS[li + 1];
            let mut layer = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let stride = if b == 0 && li > 0 { 2 } else { 1 };
                let name = join(prefix, &format!("layer{}.{b}", li + 1));
                layer.push(BasicBlock::new(store, &name, cin, cout, stride)?);
                cin = cout;
            }
            layers.push(layer);
        }
        Ok(Self { conv1, bn1, layers })
    }

    fn stem(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?)
    }

    /// Residual layer `index` (0-based) producing encoder stage `index + 2`.
    fn layer(&self, index: usize, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = if index == 0 { ops::max_pool2d(x, 3, 2, 1)? } else { x.clone() };
        for block in &self.layers[index] {
            h = block.forward(&h, train)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
struct UnetBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl UnetBlock {
    fn new(store: &mut ParamStore, prefix: &str, cin: usize, skip: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &join(prefix, "conv1"), cin + skip, cout, 3, 1, 1, false)?,
            bn1: BatchNorm2d::new(store, &join(prefix, "bn1"), cout)?,
            conv2: Conv2d::new(store, &join(prefix, "conv2"), cout, cout, 3, 1, 1, false)?,
            bn2: BatchNorm2d::new(store, &join(prefix, "bn2"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor, skip: Option<&Tensor>, train: bool) -> Result<Tensor> {
        let mut h = ops::upsample_nearest2x(x)?;
        if let Some(s) = skip {
            h = Tensor::cat(&[&h, s], 1)?;
        }
        let h = self.bn1.forward(&self.conv1.forward(&h)?, train)?.relu()?;
        Ok(self.bn2.forward(&self.conv2.forward(&h)?, train)?.relu()?)
    }
}

#[derive(Clone, Debug)]
struct LinkBlock {
    reduce: Conv2d,
    bn_reduce: BatchNorm2d,
    up: ConvTranspose2d,
    bn_up: BatchNorm2d,
    expand: Conv2d,
    bn_expand: BatchNorm2d,
}

impl LinkBlock {
    fn new(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize) -> Result<Self> {
        let mid = cin / 4;
        Ok(Self {
            reduce: Conv2d::new(store, &join(prefix, "reduce"), cin, mid, 1, 1, 0, false)?,
            bn_reduce: BatchNorm2d::new(store, &join(prefix, "bn_reduce"), mid)?,
            up: ConvTranspose2d::new(store, &join(prefix, "up"), mid, mid, 4, 2, 1, false)?,
            bn_up: BatchNorm2d::new(store, &join(prefix, "bn_up"), mid)?,
            expand: Conv2d::new(store, &join(prefix, "expand"), mid, cout, 1, 1, 0, false)?,
            bn_expand: BatchNorm2d::new(store, &join(prefix, "bn_expand"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor, skip: Option<&Tensor>, train: bool) -> Result<Tensor> {
        let h = self.bn_reduce.forward(&self.reduce.forward(x)?, train)?.relu()?;
        let h = self.bn_up.forward(&self.up.forward(&h)?, train)?.relu()?;
        let h = self.bn_expand.forward(&self.expand.forward(&h)?, train)?.relu()?;
        match skip {
            Some(s) => Ok((h + s)?),
            None => Ok(h),
        }
    }
}

#[derive(Clone, Debug)]
enum Decoder {
    Unet { blocks: Vec<UnetBlock>, head: Conv2d },
    Linknet { blocks: Vec<LinkBlock>, head: Conv2d },
}

impl Decoder {
    fn new(store: &mut ParamStore, backbone: Backbone) -> Result<Self> {
        match backbone {
            Backbone::Unet => {
                // (input, skip, output) channels from the deepest stage upwards
                let spec = [(512, 256, 256), (256, 128, 128), (128, 64, 64), (64, 64, 32), (32, 0, 16)];
                let blocks = spec
                    .iter()
                    .enumerate()
                    .map(|(i, &(cin, skip, cout))| UnetBlock::new(store, &format!("decoder.blocks.{i}"), cin, skip, cout))
                    .collect::<Result<Vec<_>>>()?;
                let head = Conv2d::new(store, "decoder.head", 16, 1, 3, 1, 1, true)?;
                Ok(Decoder::Unet { blocks, head })
            }
            Backbone::Linknet => {
                let spec = [(512, 256), (256, 128), (128, 64), (64, 64), (64, 32)];
                let blocks = spec
                    .iter()
                    .enumerate()
                    .map(|(i, &(cin, cout))| LinkBlock::new(store, &format!("decoder.blocks.{i}"), cin, cout))
                    .collect::<Result<Vec<_>>>()?;
                let head = Conv2d::new(store, "decoder.head", 32, 1, 3, 1, 1, true)?;
                Ok(Decoder::Linknet { blocks, head })
            }
        }
    }

    /// `stages` holds encoder stages 1..=5 (index 0 = stride 2).
    fn forward(&self, stages: &[Tensor], train: bool) -> Result<Tensor> {
        let skips = [Some(&stages[3]), Some(&stages[2]), Some(&stages[1]), Some(&stages[0]), None];
        let mut h = stages[4].clone();
        match self {
            Decoder::Unet { blocks, head } => {
                for (block, skip) in blocks.iter().zip(skips) {
                    h = block.forward(&h, skip, train)?;
                }
                head.forward(&h)
            }
            Decoder::Linknet { blocks, head } => {
                for (block, skip) in blocks.iter().zip(skips) {
                    h = block.forward(&h, skip, train)?;
                }
                head.forward(&h)
            }
        }
    }
}

/// A built ablation variant with its parameters.
pub struct SegmentationModel {
    config: VariantConfig,
    store: ParamStore,
    encoder: ResNetEncoder,
    decoder: Decoder,
    attention: Vec<UgdaParams>,
    aux_heads: Vec<Conv2d>,
}

/// Builds the network for `cfg`.
///
/// Parameters are created encoder → decoder → attention → auxiliary heads, so
/// two variants built with the same seed start from identical shared weights.
pub fn build_variant(cfg: &VariantConfig, opts: &BuildOptions) -> Result<SegmentationModel> {
    let mut store = ParamStore::new(opts.dtype, opts.device.clone(), opts.seed);
    let encoder = ResNetEncoder::new(&mut store, "encoder")?;
    let decoder = Decoder::new(&mut store, cfg.backbone)?;
    let attention = if cfg.use_attention {
        (1..5)
            .map(|stage| {
                UgdaParams::new(&mut store, &format!("attention.{}", stage + 1), STAGE_CHANNELS[stage], opts.attention_reduction)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let aux_heads = if cfg.use_deep_supervision {
        vec![
            Conv2d::new(&mut store, "aux.0", STAGE_CHANNELS[3], 1, 1, 1, 0, true)?,
            Conv2d::new(&mut store, "aux.1", STAGE_CHANNELS[4], 1, 1, 1, 0, true)?,
        ]
    } else {
        Vec::new()
    };
    let model = SegmentationModel { config: *cfg, store, encoder, decoder, attention, aux_heads };
    if cfg.pretrained_encoder {
        let path = opts.encoder_weights.as_ref().ok_or_else(|| {
            SegError::Config("pretrained_encoder is set but no encoder weight file was given".into())
        })?;
        model.load_encoder_weights(path)?;
    }
    Ok(model)
}

impl SegmentationModel {
    pub fn config(&self) -> &VariantConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn attention_modules(&self) -> &[UgdaParams] {
        &self.attention
    }

    pub fn num_aux_heads(&self) -> usize {
        self.aux_heads.len()
    }

    /// Sets every UGDA residual scale to `value`.
    pub fn set_gamma(&self, value: f64) -> Result<()> {
        for a in &self.attention {
            let t = Tensor::full(value, 1, self.store.device())?.to_dtype(self.store.dtype())?;
            a.gamma.set(&t)?;
        }
        Ok(())
    }

    /// Loads torchvision-named `resnet34` weights (`conv1.weight`, `layer1.0.bn1.running_mean`, …).
    pub fn load_encoder_weights(&self, path: &std::path::Path) -> Result<usize> {
        let tensors = candle_core::safetensors::load(path, self.store.device())?;
        let mut loaded = 0;
        for (name, value) in tensors {
            let full = format!("encoder.{name}");
            if self.store.get(&full).is_some() {
                self.store.set(&full, &value)?;
                loaded += 1;
            }
        }
        let expected = self.store.iter().filter(|(n, _)| n.starts_with("encoder.")).count();
        if loaded != expected {
            return Err(SegError::Checkpoint(format!(
                "encoder weight file {} provided {loaded} of {expected} encoder tensors",
                path.display()
            )));
        }
        Ok(loaded)
    }

    /// Runs the network on `(N,3,H,W)` with `H`, `W` multiples of 32.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<ModelOutputs> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(SegError::Shape(format!("expected 3 input channels, got {c}")));
        }
        if h == 0 || w == 0 || h % SIZE_DIVISOR != 0 || w % SIZE_DIVISOR != 0 {
            return Err(SegError::Shape(format!(
                "input size {h}x{w} must be a positive multiple of {SIZE_DIVISOR} (five stride-2 stages)"
            )));
        }
        let train = mode.is_train();
        let x = x.to_dtype(self.store.dtype())?;
        let mut stages = Vec::with_capacity(5);
        stages.push(self.encoder.stem(&x, train)?);
        for layer in 0..4 {
            let mut s = self.encoder.layer(layer, &stages[layer], train)?;
            if let Some(attn) = self.attention.get(layer) {
                s = ugda_forward(&s, attn)?;
            }
            stages.push(s);
        }
        let main_logits = self.decoder.forward(&stages, train)?;
        let aux_logits = if train {
            self.aux_heads
                .iter()
                .zip([&stages[3], &stages[4]])
                .map(|(head, feat)| ops::upsample_bilinear(&head.forward(feat)?, h, w))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(ModelOutputs { main_logits, aux_logits })
    }
}
