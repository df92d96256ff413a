//! TP/FP/FN overlays and predictive-entropy heatmaps.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::data::{denormalize_to_rgb, BinaryMask};
use crate::error::{Result, SegError};
use crate::loss::binary_entropy;

pub const TP_COLOR: Rgb<u8> = Rgb([0, 255, 0]);
pub const FP_COLOR: Rgb<u8> = Rgb([255, 0, 0]);
pub const FN_COLOR: Rgb<u8> = Rgb([0, 0, 255]);

/// Green true positives, red false positives, blue false negatives; true
/// negatives keep the de-normalized input pixel.
pub fn render_overlay(image: &Array3<f32>, pred: &BinaryMask, gt: &BinaryMask) -> Result<RgbImage> {
    let (c, h, w) = image.dim();
    if c != 3 || pred.dim() != (1, h, w) || gt.dim() != (1, h, w) {
        return Err(SegError::Shape(format!(
            "overlay needs image (3,H,W) and masks (1,H,W); got {:?}, {:?}, {:?}",
            image.dim(),
            pred.dim(),
            gt.dim()
        )));
    }
    let mut out = denormalize_to_rgb(image);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let idx = [0, y as usize, x as usize];
        match (pred[idx] != 0, gt[idx] != 0) {
            (true, true) => *px = TP_COLOR,
            (true, false) => *px = FP_COLOR,
            (false, true) => *px = FN_COLOR,
            (false, false) => {}
        }
    }
    Ok(out)
}

/// Colour for an entropy value: linear from blue at 0 to red at 1.
pub fn entropy_color(h: f64) -> Rgb<u8> {
    let h = h.clamp(0.0, 1.0);
    Rgb([(255.0 * h).round() as u8, 0, (255.0 * (1.0 - h)).round() as u8])
}

/// Per-pixel binary entropy of `p` rendered with [`entropy_color`].
pub fn render_entropy_heatmap(p: &Array2<f32>, eps: f64) -> RgbImage {
    let (h, w) = p.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| entropy_color(binary_entropy(f64::from(p[[y as usize, x as usize]]), eps)))
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::normalize_in_place;
    use crate::metrics::confusion;

    fn gray_image(h: usize, w: usize) -> Array3<f32> {
        let mut img = Array3::from_elem((3, h, w), 0.5f32);
        normalize_in_place(&mut img);
        img
    }

    fn count(img: &RgbImage, c: Rgb<u8>) -> usize {
        img.pixels().filter(|p| **p == c).count()
    }

    #[test]
    fn perfect_prediction_has_no_red_or_blue() {
        let gt = Array3::from_shape_vec((1, 2, 2), vec![1u8, 0, 1, 0]).unwrap();
        let img = gray_image(2, 2);
        let out = render_overlay(&img, &gt, &gt).unwrap();
        assert_eq!(count(&out, TP_COLOR), 2);
        assert_eq!(count(&out, FP_COLOR) + count(&out, FN_COLOR), 0);
        assert_eq!(out.get_pixel(1, 0), denormalize_to_rgb(&img).get_pixel(1, 0));
    }

    #[test]
    fn all_false_positive_is_fully_red() {
        let pred = Array3::from_elem((1, 3, 3), 1u8);
        let gt = Array3::zeros((1, 3, 3));
        let out = render_overlay(&gray_image(3, 3), &pred, &gt).unwrap();
        assert_eq!(count(&out, FP_COLOR), 9);
    }

    #[test]
    fn overlay_counts_match_confusion() {
        let pred = Array3::from_shape_vec((1, 2, 3), vec![1u8, 1, 0, 0, 1, 0]).unwrap();
        let gt = Array3::from_shape_vec((1, 2, 3), vec![1u8, 0, 1, 0, 1, 0]).unwrap();
        let out = render_overlay(&gray_image(2, 3), &pred, &gt).unwrap();
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!((count(&out, TP_COLOR), count(&out, FP_COLOR), count(&out, FN_COLOR)), (c.tp, c.fp, c.fn_));
        assert!(render_overlay(&gray_image(2, 2), &pred, &gt).is_err());
    }

    #[test]
    fn heatmap_endpoints() {
        let half = Array2::from_elem((2, 2), 0.5f32);
        assert!(render_entropy_heatmap(&half, 1e-7).pixels().all(|p| *p == Rgb([255, 0, 0])));
        let zero = Array2::zeros((2, 2));
        assert!(render_entropy_heatmap(&zero, 1e-7).pixels().all(|p| *p == Rgb([0, 0, 255])));
    }

    #[test]
    fn entropy_color_is_monotone() {
        let mut prev = entropy_color(0.0);
        for i in 1..=100 {
            let c = entropy_color(f64::from(i) / 100.0);
            assert!(c[0] >= prev[0] && c[2] <= prev[2]);
            prev = c;
        }
    }
}
