//! Deep-supervision objective: `L = L_main + α · Σ_k w_k · L_aux(k)`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DsConfig {
    pub alpha: f64,
    /// `(shallow, deep)` head weights.
    pub weights: (f64, f64),
}

impl Default for DsConfig {
    fn default() -> Self {
        Self { alpha: 0.05, weights: (0.3, 0.7) }
    }
}

impl DsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(SegError::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        let (a, b) = self.weights;
        if a < 0.0 || b < 0.0 || (a + b - 1.0).abs() > 1e-9 {
            return Err(SegError::Config(format!("auxiliary weights must be non-negative and sum to 1, got ({a}, {b})")));
        }
        Ok(())
    }
}

fn check_aux_len(n: usize) -> Result<()> {
    if n == 0 || n == 2 {
        Ok(())
    } else {
        Err(SegError::Config(format!("expected 0 or 2 auxiliary losses (shallow, deep), got {n}")))
    }
}

/// Scalar form of the combined objective.
pub fn total_loss(main: f64, aux: &[f64], cfg: &DsConfig) -> Result<f64> {
    check_aux_len(aux.len())?;
    if aux.is_empty() {
        return Ok(main);
    }
    Ok(main + cfg.alpha * (cfg.weights.0 * aux[0] + cfg.weights.1 * aux[1]))
}

/// Differentiable form of [`total_loss`] over scalar tensors.
pub fn total_loss_tensor(main: &Tensor, aux: &[Tensor], cfg: &DsConfig) -> Result<Tensor> {
    check_aux_len(aux.len())?;
    if aux.is_empty() {
        return Ok(main.clone());
    }
    let weighted = ((&aux[0] * cfg.weights.0)? + (&aux[1] * cfg.weights.1)?)?;
    Ok((main + (weighted * cfg.alpha)?)?)
}
