//! Pixel entropy, entropy-weighted BCE, soft Dice, and their hybrid with a BCE warm-up.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::ops;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Entropy weight strength β in `W = 1 + β·H`.
    pub beta: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    /// Zero-based epochs `0..warmup_epochs` train on plain BCE.
    pub warmup_epochs: usize,
    pub prob_clamp_eps: f64,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { beta: 0.3, lambda_bce: 0.7, lambda_dice: 0.3, warmup_epochs: 3, prob_clamp_eps: 1e-7, dice_smooth: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(SegError::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.lambda_bce < 0.0 || self.lambda_dice < 0.0 || (self.lambda_bce + self.lambda_dice - 1.0).abs() > 1e-9 {
            return Err(SegError::Config(format!(
                "loss coefficients must be non-negative and sum to 1, got {} + {}",
                self.lambda_bce, self.lambda_dice
            )));
        }
        if !(self.prob_clamp_eps > 0.0 && self.prob_clamp_eps < 0.5) {
            return Err(SegError::Config("prob_clamp_eps must lie in (0, 0.5)".into()));
        }
        if !(self.dice_smooth >= 0.0) {
            return Err(SegError::Config("dice_smooth must be non-negative".into()));
        }
        Ok(())
    }
}

/// Binary entropy in bits of a single probability, clamped to `[eps, 1-eps]`.
pub fn binary_entropy(p: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    -(p * p.log2() + (1.0 - p) * (1.0 - p).log2())
}

/// Pixel-wise binary entropy (bits) of a probability map; values in [0,1].
pub fn pixel_entropy(p: &Tensor, eps: f64) -> Result<Tensor> {
    let p = p.clamp(eps, 1.0 - eps)?;
    let q = (1.0 - &p)?;
    let nats = ((&p * p.log()?)? + (&q * q.log()?)?)?.neg()?;
    Ok((nats / std::f64::consts::LN_2)?)
}

/// `W = 1 + β·H(p)`, detached from the autograd graph.
pub fn entropy_weight_map(p: &Tensor, beta: f64, eps: f64) -> Result<Tensor> {
    if !(beta >= 0.0) {
        return Err(SegError::Config(format!("beta must be non-negative, got {beta}")));
    }
    let h = pixel_entropy(&p.detach(), eps)?;
    Ok(((h * beta)? + 1.0)?.detach())
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(SegError::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Per-pixel BCE from logits: `max(x,0) − x·t + log(1 + e^{−|x|})`.
fn bce_terms(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((logits.relu()? - logits.mul(target)?)? + softplus)?)
}

/// Mean of `W_i · BCE_i`; `weights = None` is the plain BCE.
pub fn weighted_bce(logits: &Tensor, target: &Tensor, weights: Option<&Tensor>) -> Result<Tensor> {
    check_same_shape(logits, target, "weighted_bce logits/target")?;
    let target = target.to_dtype(logits.dtype())?;
    let terms = bce_terms(logits, &target)?;
    let terms = match weights {
        Some(w) => {
            check_same_shape(logits, w, "weighted_bce logits/weights")?;
            terms.mul(&w.to_dtype(logits.dtype())?)?
        }
        None => terms,
    };
    Ok(terms.mean_all()?)
}

pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    weighted_bce(logits, target, None)
}

/// Batch-aggregated soft Dice loss `1 − (2Σpg + s)/(Σp + Σg + s)`.
pub fn dice_loss(p: &Tensor, target: &Tensor, smooth: f64) -> Result<Tensor> {
    check_same_shape(p, target, "dice_loss")?;
    let target = target.to_dtype(p.dtype())?;
    let inter = p.mul(&target)?.sum_all()?;
    let denom = ((p.sum_all()? + target.sum_all()?)? + smooth)?;
    let ratio = ((inter * 2.0)? + smooth)?.div(&denom)?;
    Ok((1.0 - ratio)?)
}

/// `λ₁·wBCE(logits, t, W(σ(logits))) + λ₂·Dice(σ(logits), t)`.
pub fn hybrid_loss(logits: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let p = ops::sigmoid(logits)?;
    let w = entropy_weight_map(&p, cfg.beta, cfg.prob_clamp_eps)?;
    let bce = weighted_bce(logits, target, Some(&w))?;
    let dice = dice_loss(&p, target, cfg.dice_smooth)?;
    Ok(((bce * cfg.lambda_bce)? + (dice * cfg.lambda_dice)?)?)
}

/// Which objective a head is trained with in a given epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    PlainBce,
    Hybrid,
}

impl LossKind {
    pub fn evaluate(self, logits: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
        match self {
            LossKind::PlainBce => bce_with_logits(logits, target),
            LossKind::Hybrid => hybrid_loss(logits, target, cfg),
        }
    }
}

/// Plain BCE before `warmup_epochs`, the hybrid afterwards.
pub fn active_loss(epoch: usize, cfg: &LossConfig) -> LossKind {
    if epoch < cfg.warmup_epochs {
        LossKind::PlainBce
    } else {
        LossKind::Hybrid
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use candle_core::{Device, Var};
    use proptest::prelude::*;

    use super::*;

    fn t(v: &[f64], shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn entropy_reference_values() {
        let p = t(&[0.5, 0.0, 0.25, 1.0], (1, 1, 2, 2));
        let h = pixel_entropy(&p, 1e-7).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_abs_diff_eq!(h[0], 1.0, epsilon = 1e-15);
        assert!(h[1] < 1e-5 && h[3] < 1e-5);
        assert_abs_diff_eq!(h[2], 0.811_278_124_459_132_8, epsilon = 1e-12);
        assert_abs_diff_eq!(binary_entropy(0.25, 1e-7), h[2], epsilon = 1e-15);
    }

    #[test]
    fn weight_map_reference_values() {
        let p = t(&[0.5, 0.25], (1, 1, 1, 2));
        let w = entropy_weight_map(&p, 0.3, 1e-7).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_abs_diff_eq!(w[0], 1.3, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 1.243_383_437_337_739_8, epsilon = 1e-12);
        let ones = entropy_weight_map(&p, 0.0, 1e-7).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(ones, vec![1.0, 1.0]);
        assert!(entropy_weight_map(&p, -0.1, 1e-7).is_err());
    }

    #[test]
    fn bce_reference_values() {
        let zero = t(&[0.0], (1, 1, 1, 1));
        let one = t(&[1.0], (1, 1, 1, 1));
        assert_abs_diff_eq!(scalar(&bce_with_logits(&zero, &one).unwrap()), std::f64::consts::LN_2, epsilon = 1e-15);
        let confident = t(&[40.0, -40.0], (1, 1, 1, 2));
        let target = t(&[1.0, 0.0], (1, 1, 1, 2));
        assert!(scalar(&bce_with_logits(&confident, &target).unwrap()) < 1e-15);
        let logits = t(&[0.3, -1.2, 2.0, 0.1], (1, 1, 2, 2));
        let tgt = t(&[1.0, 0.0, 0.0, 1.0], (1, 1, 2, 2));
        let w = t(&[1.1, 1.2, 1.0, 1.3], (1, 1, 2, 2));
        let w2 = (&w * 2.0).unwrap();
        let a = scalar(&weighted_bce(&logits, &tgt, Some(&w)).unwrap());
        let b = scalar(&weighted_bce(&logits, &tgt, Some(&w2)).unwrap());
        assert_abs_diff_eq!(b, 2.0 * a, epsilon = 1e-14);
        assert!(weighted_bce(&logits, &t(&[1.0, 0.0], (1, 1, 1, 2)), None).is_err());
    }

    #[test]
    fn dice_reference_values() {
        let g: Vec<f64> = (0..200).map(|i| if i < 100 { 1.0 } else { 0.0 }).collect();
        let g = t(&g, (1, 1, 10, 20));
        assert_abs_diff_eq!(scalar(&dice_loss(&g, &g, 1.0).unwrap()), 0.0, epsilon = 1e-15);
        let zeros = g.zeros_like().unwrap();
        assert_abs_diff_eq!(scalar(&dice_loss(&zeros, &g, 1.0).unwrap()), 1.0 - 1.0 / 101.0, epsilon = 1e-15);
        assert_abs_diff_eq!(scalar(&dice_loss(&zeros, &zeros, 1.0).unwrap()), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn hybrid_decomposes_into_components() {
        let cfg = LossConfig::default();
        let logits = t(&[0.3, -1.2, 2.0, 0.1, -0.4, 0.9], (1, 1, 2, 3));
        let tgt = t(&[1.0, 0.0, 0.0, 1.0, 1.0, 0.0], (1, 1, 2, 3));
        let p = ops::sigmoid(&logits).unwrap();
        let w = entropy_weight_map(&p, cfg.beta, cfg.prob_clamp_eps).unwrap();
        let expected = 0.7 * scalar(&weighted_bce(&logits, &tgt, Some(&w)).unwrap())
            + 0.3 * scalar(&dice_loss(&p, &tgt, 1.0).unwrap());
        assert_abs_diff_eq!(scalar(&hybrid_loss(&logits, &tgt, &cfg).unwrap()), expected, epsilon = 1e-12);

        let flat = LossConfig { beta: 0.0, ..cfg.clone() };
        let unweighted = 0.7 * scalar(&bce_with_logits(&logits, &tgt).unwrap())
            + 0.3 * scalar(&dice_loss(&p, &tgt, 1.0).unwrap());
        assert_abs_diff_eq!(scalar(&hybrid_loss(&logits, &tgt, &flat).unwrap()), unweighted, epsilon = 1e-12);

        let bce_only = LossConfig { beta: 0.0, lambda_bce: 1.0, lambda_dice: 0.0, ..cfg };
        assert_abs_diff_eq!(
            scalar(&hybrid_loss(&logits, &tgt, &bce_only).unwrap()),
            scalar(&bce_with_logits(&logits, &tgt).unwrap()),
            epsilon = 1e-12
        );
    }

    #[test]
    fn warmup_schedule() {
        let cfg = LossConfig::default();
        let kinds: Vec<_> = (0..5).map(|e| active_loss(e, &cfg)).collect();
        assert_eq!(kinds, vec![LossKind::PlainBce, LossKind::PlainBce, LossKind::PlainBce, LossKind::Hybrid, LossKind::Hybrid]);
        let none = LossConfig { warmup_epochs: 0, ..cfg };
        assert_eq!(active_loss(0, &none), LossKind::Hybrid);
    }

    #[test]
    fn weight_map_carries_no_gradient() {
        // The hybrid gradient must equal the gradient with W frozen as a constant.
        let cfg = LossConfig::default();
        let logits = t(&[0.3, -1.2, 2.0, 0.1], (1, 1, 2, 2));
        let tgt = t(&[1.0, 0.0, 0.0, 1.0], (1, 1, 2, 2));
        let var = Var::from_tensor(&logits).unwrap();
        let g1 = hybrid_loss(var.as_tensor(), &tgt, &cfg).unwrap().backward().unwrap();
        let frozen_w = entropy_weight_map(&ops::sigmoid(&logits).unwrap(), cfg.beta, cfg.prob_clamp_eps).unwrap();
        let frozen_w = Tensor::from_vec(frozen_w.flatten_all().unwrap().to_vec1::<f64>().unwrap(), (1, 1, 2, 2), &Device::Cpu).unwrap();
        let p = ops::sigmoid(var.as_tensor()).unwrap();
        let manual = ((weighted_bce(var.as_tensor(), &tgt, Some(&frozen_w)).unwrap() * 0.7).unwrap()
            + (dice_loss(&p, &tgt, 1.0).unwrap() * 0.3).unwrap())
        .unwrap();
        let g2 = manual.backward().unwrap();
        let a = g1.get(&var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = g2.get(&var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { beta: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { lambda_bce: 0.5, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn entropy_is_symmetric_and_bounded(p in 0.0f64..=1.0) {
            let h = binary_entropy(p, 1e-7);
            prop_assert!((0.0..=1.0).contains(&h));
            prop_assert!((h - binary_entropy(1.0 - p, 1e-7)).abs() < 1e-12);
        }

        #[test]
        fn weights_stay_in_range(ps in proptest::collection::vec(0.0f64..=1.0, 1..32), beta in 0.0f64..2.0) {
            let n = ps.len();
            let p = Tensor::from_vec(ps, (1, 1, 1, n), &Device::Cpu).unwrap();
            let w = entropy_weight_map(&p, beta, 1e-7).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            prop_assert!(w.iter().all(|&v| v >= 1.0 && v <= 1.0 + beta + 1e-15));
        }

        #[test]
        fn losses_are_non_negative(
            pairs in proptest::collection::vec((-12.0f64..12.0, proptest::bool::ANY), 1..24)
        ) {
            let n = pairs.len();
            let logits = Tensor::from_vec(pairs.iter().map(|p| p.0).collect::<Vec<_>>(), (1, 1, 1, n), &Device::Cpu).unwrap();
            let tgt = Tensor::from_vec(pairs.iter().map(|p| f64::from(u8::from(p.1))).collect::<Vec<_>>(), (1, 1, 1, n), &Device::Cpu).unwrap();
            let cfg = LossConfig::default();
            prop_assert!(scalar(&hybrid_loss(&logits, &tgt, &cfg).unwrap()) >= 0.0);
            prop_assert!(scalar(&bce_with_logits(&logits, &tgt).unwrap()) >= 0.0);
        }
    }
}
