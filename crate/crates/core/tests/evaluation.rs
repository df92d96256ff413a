mod common;

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use ugda_seg::data::{PreprocessedExample, BinaryMask};
use ugda_seg::metrics::{evaluate, predict_probabilities, LogitModel};
use ugda_seg::viz::{render_entropy_heatmap, render_overlay, FN_COLOR, FP_COLOR, TP_COLOR};
use ugda_seg::Result;

/// Returns fixed logits, one plane per example in call order.
struct Stub {
    planes: Vec<Array2<f32>>,
    calls: std::cell::Cell<usize>,
}

impl Stub {
    fn new(planes: Vec<Array2<f32>>) -> Self {
        Self { planes, calls: std::cell::Cell::new(0) }
    }
}

impl LogitModel for Stub {
    fn predict_logits(&self, images: &Tensor) -> Result<Tensor> {
        let (n, _, h, w) = images.dims4()?;
        let start = self.calls.get();
        self.calls.set(start + n);
        let mut flat = Vec::with_capacity(n * h * w);
        for p in &self.planes[start..start + n] {
            flat.extend(p.iter().copied());
        }
        Ok(Tensor::from_vec(flat, (n, 1, h, w), &Device::Cpu)?)
    }
}

fn example(id: &str, mask: BinaryMask) -> PreprocessedExample {
    let (_, h, w) = mask.dim();
    PreprocessedExample { id: id.into(), image: Array3::zeros((3, h, w)), mask, side: h }
}

fn logits_for(mask: &BinaryMask) -> Array2<f32> {
    mask.index_axis(ndarray::Axis(0), 0).mapv(|v| if v == 1 { 8.0 } else { -8.0 })
}

fn square_mask(side: usize, lo: usize, hi: usize) -> BinaryMask {
    Array3::from_shape_fn((1, side, side), |(_, y, x)| u8::from((lo..hi).contains(&y) && (lo..hi).contains(&x)))
}

#[test]
fn oracle_scores_one_and_background_scores_zero() {
    let masks: Vec<BinaryMask> = (0..5).map(|i| square_mask(16, i, 8 + i)).collect();
    let examples: Vec<_> = masks.iter().enumerate().map(|(i, m)| example(&format!("e{i}"), m.clone())).collect();

    let oracle = Stub::new(masks.iter().map(logits_for).collect());
    let record = evaluate(&oracle, &examples, 0.5).unwrap();
    assert_eq!((record.mean_dsc, record.mean_iou), (1.0, 1.0));

    let background = Stub::new(vec![Array2::from_elem((16, 16), -8.0); 5]);
    let record = evaluate(&background, &examples, 0.5).unwrap();
    assert_eq!((record.mean_dsc, record.mean_iou), (0.0, 0.0));
}

#[test]
fn hand_counted_metrics_on_three_images() {
    // image a: gt 4 pixels, pred 4 pixels, 2 shared -> dice 0.5, iou 1/3
    let mut gt_a = Array3::zeros((1, 4, 4));
    let mut pr_a = Array3::zeros((1, 4, 4));
    for x in 0..4 {
        gt_a[[0, 0, x]] = 1;
    }
    for x in 2..4 {
        pr_a[[0, 0, x]] = 1;
        pr_a[[0, 1, x]] = 1;
    }
    // image b: exact match on 3 pixels -> 1, 1
    let mut gt_b = Array3::zeros((1, 4, 4));
    for y in 0..3 {
        gt_b[[0, y, 0]] = 1;
    }
    let pr_b = gt_b.clone();
    // image c: gt 2 pixels, prediction empty -> 0, 0
    let mut gt_c = Array3::zeros((1, 4, 4));
    gt_c[[0, 3, 3]] = 1;
    gt_c[[0, 2, 3]] = 1;
    let pr_c = Array3::zeros((1, 4, 4));

    let examples = vec![example("a", gt_a), example("b", gt_b), example("c", gt_c)];
    let stub = Stub::new(vec![logits_for(&pr_a), logits_for(&pr_b), logits_for(&pr_c)]);
    let record = evaluate(&stub, &examples, 0.5).unwrap();
    let dsc: Vec<f64> = record.per_image.iter().map(|m| m.dsc).collect();
    let iou: Vec<f64> = record.per_image.iter().map(|m| m.iou).collect();
    assert_eq!(dsc, [0.5, 1.0, 0.0]);
    assert!((iou[0] - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(&iou[1..], [1.0, 0.0]);
    assert!((record.mean_dsc - 0.5).abs() < 1e-12);
    assert!((record.mean_iou - 4.0 / 9.0).abs() < 1e-12);

    let csv = record.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "id,dsc,iou");
    assert!(lines[1].starts_with("a,0.5"));
    assert!(lines.last().unwrap().starts_with("mean,"));
    assert_eq!(lines.len(), 5);
}

#[test]
fn mean_does_not_depend_on_example_order() {
    let masks: Vec<BinaryMask> = (0..7).map(|i| square_mask(16, i, 6 + i)).collect();
    let preds: Vec<BinaryMask> = (0..7).map(|i| square_mask(16, 2, 9 + i % 4)).collect();
    let forward = evaluate(
        &Stub::new(preds.iter().map(logits_for).collect()),
        &masks.iter().enumerate().map(|(i, m)| example(&i.to_string(), m.clone())).collect::<Vec<_>>(),
        0.5,
    )
    .unwrap();
    let backward = evaluate(
        &Stub::new(preds.iter().rev().map(logits_for).collect()),
        &masks.iter().enumerate().rev().map(|(i, m)| example(&i.to_string(), m.clone())).collect::<Vec<_>>(),
        0.5,
    )
    .unwrap();
    assert!((forward.mean_dsc - backward.mean_dsc).abs() < 1e-12);
    assert!((forward.mean_iou - backward.mean_iou).abs() < 1e-12);
}

#[test]
fn probabilities_are_batched_in_order() {
    // more examples than one evaluation batch
    let planes: Vec<Array2<f32>> = (0..19).map(|i| Array2::from_elem((8, 8), i as f32 - 9.0)).collect();
    let examples: Vec<_> = (0..19).map(|i| example(&i.to_string(), Array3::zeros((1, 8, 8)))).collect();
    let probs = predict_probabilities(&Stub::new(planes), &examples).unwrap();
    for (i, p) in probs.iter().enumerate() {
        let want = 1.0 / (1.0 + (9.0 - i as f32).exp());
        assert!((p[[3, 3]] - want).abs() < 1e-6);
    }
}

#[test]
fn heatmap_warms_only_at_the_uncertain_pixel() {
    let mut p = Array2::from_elem((8, 8), 0.999_99f32);
    p[[2, 5]] = 0.5;
    let heat = render_entropy_heatmap(&p, 1e-7);
    let warm: Vec<(u32, u32)> = heat.enumerate_pixels().filter(|(_, _, c)| c.0[0] > 128).map(|(x, y, _)| (x, y)).collect();
    assert_eq!(warm, [(5, 2)]);
    assert_eq!(*heat.get_pixel(5, 2), Rgb([255, 0, 0]));
}

#[test]
fn overlay_marks_each_outcome() {
    let gt = Array3::from_shape_vec((1, 1, 4), vec![1, 1, 0, 0]).unwrap();
    let pred = Array3::from_shape_vec((1, 1, 4), vec![1, 0, 1, 0]).unwrap();
    let overlay = render_overlay(&Array3::zeros((3, 1, 4)), &pred, &gt).unwrap();
    assert_eq!(*overlay.get_pixel(0, 0), TP_COLOR);
    assert_eq!(*overlay.get_pixel(1, 0), FN_COLOR);
    assert_eq!(*overlay.get_pixel(2, 0), FP_COLOR);
    assert!(![TP_COLOR, FP_COLOR, FN_COLOR].contains(overlay.get_pixel(3, 0)));
}

#[test]
fn model_outputs_of_the_wrong_size_are_rejected() {
    struct Small;
    impl LogitModel for Small {
        fn predict_logits(&self, images: &Tensor) -> Result<Tensor> {
            Ok(Tensor::zeros((images.dim(0)?, 1, 4, 4), DType::F32, &Device::Cpu)?)
        }
    }
    let examples = vec![example("x", Array3::zeros((1, 8, 8)))];
    assert!(evaluate(&Small, &examples, 0.5).is_err());
}

#[test]
fn gray_and_rgb_helpers_agree_with_image_crate() {
    // guards the image buffer conventions the pipeline relies on
    let mut g = GrayImage::new(3, 2);
    g.put_pixel(2, 1, Luma([200]));
    let arr = ugda_seg::data::gray_to_array(&g);
    assert_eq!(arr.dim(), (2, 3));
    assert_eq!(arr[[1, 2]], 200);
    let rgb = RgbImage::from_pixel(2, 2, Rgb([255, 0, 0]));
    let unit = ugda_seg::data::rgb_to_unit(&rgb);
    assert_eq!(unit.dim(), (3, 2, 2));
    assert_eq!((unit[[0, 1, 1]], unit[[1, 1, 1]]), (1.0, 0.0));
}
