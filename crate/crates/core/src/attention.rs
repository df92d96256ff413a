//! Uncertainty-guided dual attention (UGDA).
//!
//! For a feature map `X (N,C,H,W)` the module computes
//!
//! * a channel gate `(N,C,1,1)`: global average pool, two 1×1 convolutions
//!   with a ReLU between them (`C → C/r → C`), sigmoid;
//! * a spatial gate `(N,1,H,W)`: `[mean_c X, max_c X]` through a 7×7
//!   convolution (padding 3), sigmoid;
//! * an uncertainty map `(N,1,H,W)`: sigmoid of the population standard
//!   deviation of `X` across channels;
//!
//! and combines them into `A = channel · spatial · (1 + U)` and
//! `Y = X + γ · (X ⊙ A)` with a single learnable scalar `γ`.

use candle_core::{Tensor, Var};

use crate::error::{Result, SegError};
use crate::nn::{join, ParamStore};
use crate::ops;

/// Default channel reduction ratio of the channel gate.
pub const DEFAULT_REDUCTION: usize = 8;
/// Initial value of the residual scale γ.
pub const GAMMA_INIT: f64 = 0.1;
const SPATIAL_KERNEL: usize = 7;

/// Learnable parameters of one UGDA instance.
#[derive(Clone, Debug)]
pub struct UgdaParams {
    pub channels: usize,
    pub reduction: usize,
    /// `(C/r, C, 1, 1)`
    pub reduce_weight: Var,
    pub reduce_bias: Var,
    /// `(C, C/r, 1, 1)`
    pub expand_weight: Var,
    pub expand_bias: Var,
    /// `(1, 2, 7, 7)`
    pub spatial_weight: Var,
    pub spatial_bias: Var,
    /// Shape `(1,)`.
    pub gamma: Var,
}

impl UgdaParams {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels < reduction || channels % reduction != 0 {
            return Err(SegError::Config(format!(
                "UGDA reduction ratio {reduction} must divide and not exceed the channel count {channels}"
            )));
        }
        if channels < 2 {
            return Err(SegError::Config("UGDA needs at least two channels for the uncertainty map".into()));
        }
        let hidden = channels / reduction;
        let k = SPATIAL_KERNEL;
        Ok(Self {
            channels,
            reduction,
            reduce_weight: store.glorot(&join(prefix, "channel.reduce.weight"), &[hidden, channels, 1, 1], channels, hidden)?,
            reduce_bias: store.constant(&join(prefix, "channel.reduce.bias"), &[hidden], 0.0)?,
            expand_weight: store.glorot(&join(prefix, "channel.expand.weight"), &[channels, hidden, 1, 1], hidden, channels)?,
            expand_bias: store.constant(&join(prefix, "channel.expand.bias"), &[channels], 0.0)?,
            spatial_weight: store.glorot(&join(prefix, "spatial.weight"), &[1, 2, k, k], 2 * k * k, k * k)?,
            spatial_bias: store.constant(&join(prefix, "spatial.bias"), &[1], 0.0)?,
            gamma: store.constant(&join(prefix, "gamma"), &[1], GAMMA_INIT)?,
        })
    }

    pub fn gamma_value(&self) -> Result<f64> {
        Ok(self.gamma.as_tensor().to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?[0])
    }
}

/// The three gates that make up the attention map.
#[derive(Clone, Debug)]
pub struct AttentionComponents {
    /// `(N,C,1,1)`, values in (0,1)
    pub channel: Tensor,
    /// `(N,1,H,W)`, values in (0,1)
    pub spatial: Tensor,
    /// `(N,1,H,W)`, values in [0.5,1)
    pub uncertainty: Tensor,
}

impl AttentionComponents {
    /// `channel · spatial · (1 + uncertainty)` broadcast to `(N,C,H,W)`.
    pub fn combined(&self) -> Result<Tensor> {
        let boost = (&self.uncertainty + 1.0)?;
        Ok(self.channel.broadcast_mul(&self.spatial)?.broadcast_mul(&boost)?)
    }
}

fn check_channels(x: &Tensor, p: &UgdaParams) -> Result<(usize, usize, usize, usize)> {
    let dims = x.dims4()?;
    if dims.1 != p.channels {
        return Err(SegError::Shape(format!("UGDA built for {} channels, got {}", p.channels, dims.1)));
    }
    Ok(dims)
}

pub fn channel_attention(x: &Tensor, p: &UgdaParams) -> Result<Tensor> {
    let (n, c, _, _) = check_channels(x, p)?;
    let hidden = c / p.reduction;
    let pooled = x.mean((2, 3))?;
    let reduce = p.reduce_weight.as_tensor().reshape((hidden, c))?;
    let expand = p.expand_weight.as_tensor().reshape((c, hidden))?;
    let h = pooled.matmul(&reduce.t()?)?.broadcast_add(p.reduce_bias.as_tensor())?.relu()?;
    let logits = h.matmul(&expand.t()?)?.broadcast_add(p.expand_bias.as_tensor())?;
    ops::sigmoid(&logits.reshape((n, c, 1, 1))?)
}

pub fn spatial_attention(x: &Tensor, p: &UgdaParams) -> Result<Tensor> {
    check_channels(x, p)?;
    let mean = x.mean_keepdim(1)?;
    let max = x.max_keepdim(1)?;
    let planes = Tensor::cat(&[&mean, &max], 1)?;
    let logits = ops::conv2d(
        &planes,
        p.spatial_weight.as_tensor(),
        Some(p.spatial_bias.as_tensor()),
        1,
        SPATIAL_KERNEL / 2,
    )?;
    ops::sigmoid(&logits)
}

/// `sigmoid(std_c(X))` with the population standard deviation; parameter free.
pub fn uncertainty_map(x: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if c < 2 {
        return Err(SegError::Config("uncertainty map needs at least two channels".into()));
    }
    let mean = x.mean_keepdim(1)?;
    let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
    ops::sigmoid(&ops::safe_sqrt(&var)?)
}

pub fn attention_components(x: &Tensor, p: &UgdaParams) -> Result<AttentionComponents> {
    Ok(AttentionComponents {
        channel: channel_attention(x, p)?,
        spatial: spatial_attention(x, p)?,
        uncertainty: uncertainty_map(x)?,
    })
}

/// Residual fusion `Y = X + γ · (X ⊙ A)`.
pub fn ugda_forward(x: &Tensor, p: &UgdaParams) -> Result<Tensor> {
    if !ops::all_finite(x)? {
        return Err(SegError::NonFinite("UGDA input".into()));
    }
    let attn = attention_components(x, p)?.combined()?;
    let refined = x.mul(&attn)?.broadcast_mul(p.gamma.as_tensor())?;
    Ok((x + refined)?)
}
