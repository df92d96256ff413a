//! Per-image Dice / IoU and test-set aggregation.

use std::fmt::Write as _;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{stack_batch, BinaryMask, PreprocessedExample};
use crate::error::{Result, SegError};
use crate::model::{Mode, SegmentationModel};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
const EVAL_BATCH: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<Confusion> {
    if pred.dim() != gt.dim() {
        return Err(SegError::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `2|P∩G| / (|P|+|G|)`, 1 when both masks are empty.
pub fn dice_score(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let c = confusion(pred, gt)?;
    let denom = 2 * c.tp + c.fp + c.fn_;
    Ok(if denom == 0 { 1.0 } else { 2.0 * c.tp as f64 / denom as f64 })
}

/// `|P∩G| / |P∪G|`, 1 when both masks are empty.
pub fn iou_score(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let c = confusion(pred, gt)?;
    let union = c.tp + c.fp + c.fn_;
    Ok(if union == 0 { 1.0 } else { c.tp as f64 / union as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub dsc: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub per_image: Vec<ImageMetrics>,
    pub mean_dsc: f64,
    pub mean_iou: f64,
}

impl MetricsRecord {
    pub fn from_per_image(per_image: Vec<ImageMetrics>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(SegError::Dataset("no images to evaluate".into()));
        }
        let n = per_image.len() as f64;
        let mean_dsc = per_image.iter().map(|m| m.dsc).sum::<f64>() / n;
        let mean_iou = per_image.iter().map(|m| m.iou).sum::<f64>() / n;
        Ok(Self { per_image, mean_dsc, mean_iou })
    }

    /// `id,dsc,iou` rows followed by a `mean` summary row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,dsc,iou\n");
        for m in &self.per_image {
            let _ = writeln!(out, "{},{:.6},{:.6}", m.id, m.dsc, m.iou);
        }
        let _ = writeln!(out, "mean,{:.6},{:.6}", self.mean_dsc, self.mean_iou);
        out
    }
}

/// Anything that maps an `(N,3,H,W)` batch to `(N,1,H,W)` logits.
pub trait LogitModel {
    fn predict_logits(&self, images: &Tensor) -> Result<Tensor>;
}

impl LogitModel for SegmentationModel {
    fn predict_logits(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.forward(images, Mode::Eval)?.main_logits)
    }
}

/// Foreground probabilities `(H, W)` for every example, in order.
pub fn predict_probabilities<M: LogitModel + ?Sized>(model: &M, examples: &[PreprocessedExample]) -> Result<Vec<Array2<f32>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let refs: Vec<&PreprocessedExample> = chunk.iter().collect();
        let (images, _) = stack_batch(&refs)?;
        let shape = images.dim();
        let x = Tensor::from_vec(images.into_raw_vec_and_offset().0, shape, &Device::Cpu)?;
        let probs = crate::ops::sigmoid(&model.predict_logits(&x)?.to_dtype(DType::F32)?)?;
        let (n, _, h, w) = probs.dims4()?;
        if n != chunk.len() || h != shape.2 || w != shape.3 {
            return Err(SegError::Shape(format!("model returned {:?} for a batch of {:?}", probs.dims(), shape)));
        }
        let flat = probs.flatten_all()?.to_vec1::<f32>()?;
        for plane in flat.chunks_exact(h * w) {
            out.push(Array2::from_shape_vec((h, w), plane.to_vec()).expect("plane size"));
        }
    }
    Ok(out)
}

/// `prob > threshold` as a `(1, H, W)` mask.
pub fn threshold_probabilities(p: &Array2<f32>, threshold: f64) -> BinaryMask {
    p.mapv(|v| u8::from(f64::from(v) > threshold)).insert_axis(Axis(0))
}

/// Thresholds main-head probabilities and averages per-image Dice and IoU.
pub fn evaluate<M: LogitModel + ?Sized>(model: &M, examples: &[PreprocessedExample], threshold: f64) -> Result<MetricsRecord> {
    if examples.is_empty() {
        return Err(SegError::Dataset("cannot evaluate an empty example list".into()));
    }
    let probs = predict_probabilities(model, examples)?;
    let per_image = examples
        .iter()
        .zip(&probs)
        .map(|(ex, p)| {
            let pred = threshold_probabilities(p, threshold);
            Ok(ImageMetrics { id: ex.id.clone(), dsc: dice_score(&pred, &ex.mask)?, iou: iou_score(&pred, &ex.mask)? })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsRecord::from_per_image(per_image)
}

#[cfg(test)]
mod tests {
    use ndarray::Array3;
    use proptest::prelude::*;

    use super::*;

    fn mask(bits: &[u8], h: usize, w: usize) -> BinaryMask {
        Array3::from_shape_vec((1, h, w), bits.to_vec()).unwrap()
    }

    #[test]
    fn reference_scores() {
        let a = mask(&[1, 1, 0, 0], 2, 2);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        assert_eq!(iou_score(&a, &a).unwrap(), 1.0);
        let b = mask(&[0, 0, 1, 1], 2, 2);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.0);
        let empty = mask(&[0, 0, 0, 0], 2, 2);
        assert_eq!(dice_score(&empty, &empty).unwrap(), 1.0);
        assert_eq!(iou_score(&empty, &empty).unwrap(), 1.0);
        assert!(dice_score(&a, &mask(&[0; 6], 2, 3)).is_err());
    }

    #[test]
    fn half_overlap_counts() {
        // |P| = |G| = 8, |P∩G| = 4, |P∪G| = 12
        let mut p = vec![0u8; 16];
        let mut g = vec![0u8; 16];
        p[..8].iter_mut().for_each(|v| *v = 1);
        g[4..12].iter_mut().for_each(|v| *v = 1);
        let (p, g) = (mask(&p, 4, 4), mask(&g, 4, 4));
        assert_eq!(dice_score(&p, &g).unwrap(), 0.5);
        assert!((iou_score(&p, &g).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    struct Fixed(Tensor);

    impl LogitModel for Fixed {
        fn predict_logits(&self, images: &Tensor) -> Result<Tensor> {
            let n = images.dim(0)?;
            Ok(self.0.narrow(0, 0, n)?.clone())
        }
    }

    #[test]
    fn empty_example_list_is_rejected() {
        let stub = Fixed(Tensor::zeros((1, 1, 2, 2), DType::F32, &Device::Cpu).unwrap());
        assert!(evaluate(&stub, &[], 0.5).is_err());
    }

    proptest! {
        #[test]
        fn iou_never_exceeds_dice(bits in proptest::collection::vec((0u8..=1, 0u8..=1), 1..64)) {
            let n = bits.len();
            let p = mask(&bits.iter().map(|b| b.0).collect::<Vec<_>>(), 1, n);
            let g = mask(&bits.iter().map(|b| b.1).collect::<Vec<_>>(), 1, n);
            let d = dice_score(&p, &g).unwrap();
            let i = iou_score(&p, &g).unwrap();
            prop_assert!(0.0 <= i && i <= d && d <= 1.0);
            prop_assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-12);
        }
    }
}
