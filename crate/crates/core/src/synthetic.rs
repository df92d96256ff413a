//! Deterministic synthetic seedling images for desk-scale runs.
//!
//! Each image is a tray with a speckled soil bed; each plant is a thin
//! wandering stem (1–4 px) carrying a few elliptical leaves. The mask is the
//! exact set of pixels painted as plant.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::SamplePair;
use crate::error::{Result, SegError};

pub const MIN_SIDE: usize = 32;

struct Canvas {
    side: i64,
    image: RgbImage,
    mask: GrayImage,
}

impl Canvas {
    fn paint_plant(&mut self, x: i64, y: i64, rng: &mut ChaCha8Rng) {
        if x < 0 || y < 0 || x >= self.side || y >= self.side {
            return;
        }
        let jitter = |rng: &mut ChaCha8Rng, base: i32| (base + rng.gen_range(-14..=14)).clamp(0, 255) as u8;
        let px = Rgb([jitter(rng, 62), jitter(rng, 158), jitter(rng, 48)]);
        self.image.put_pixel(x as u32, y as u32, px);
        self.mask.put_pixel(x as u32, y as u32, Luma([255]));
    }

    fn disc(&mut self, cx: f64, cy: f64, width: usize, rng: &mut ChaCha8Rng) {
        if width <= 1 {
            self.paint_plant(cx.round() as i64, cy.round() as i64, rng);
            return;
        }
        let r = width as f64 / 2.0;
        let (x0, x1) = ((cx - r).floor() as i64, (cx + r).ceil() as i64);
        let (y0, y1) = ((cy - r).floor() as i64, (cy + r).ceil() as i64);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    self.paint_plant(x, y, rng);
                }
            }
        }
    }

    fn ellipse(&mut self, cx: f64, cy: f64, a: f64, b: f64, angle: f64, rng: &mut ChaCha8Rng) {
        let (s, c) = angle.sin_cos();
        let reach = a.max(b).ceil() as i64 + 1;
        for y in (cy as i64 - reach)..=(cy as i64 + reach) {
            for x in (cx as i64 - reach)..=(cx as i64 + reach) {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                    self.paint_plant(x, y, rng);
                }
            }
        }
    }
}

fn soil(rng: &mut ChaCha8Rng) -> Rgb<u8> {
    let speck: i32 = if rng.gen_bool(0.06) { rng.gen_range(-45..=45) } else { 0 };
    let n = rng.gen_range(-18..=18) + speck;
    Rgb([(108 + n).clamp(0, 255) as u8, (76 + n * 3 / 4).clamp(0, 255) as u8, (50 + n / 2).clamp(0, 255) as u8])
}

fn tray(rng: &mut ChaCha8Rng) -> Rgb<u8> {
    let n = rng.gen_range(-8..=8);
    Rgb([(58 + n) as u8, (60 + n) as u8, (66 + n) as u8])
}

/// Renders one synthetic image and its `{0,255}` mask.
pub fn generate_synthetic_pair(seed: u64, side: usize, n_plants: usize) -> Result<(RgbImage, GrayImage)> {
    if side < MIN_SIDE {
        return Err(SegError::Config(format!("synthetic side must be at least {MIN_SIDE}, got {side}")));
    }
    if n_plants == 0 {
        return Err(SegError::Config("n_plants must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = side as f64;
    let margin = (s * rng.gen_range(0.05..0.1)).round() as u32;
    let inner = margin..(side as u32 - margin);
    let mut image = RgbImage::from_fn(side as u32, side as u32, |_, _| Rgb([0, 0, 0]));
    for (x, y, px) in image.enumerate_pixels_mut() {
        *px = if inner.contains(&x) && inner.contains(&y) { soil(&mut rng) } else { tray(&mut rng) };
    }
    let mut canvas = Canvas { side: side as i64, image, mask: GrayImage::new(side as u32, side as u32) };

    let lo = f64::from(margin) + s * 0.15;
    let hi = s - f64::from(margin) - s * 0.1;
    for _ in 0..n_plants {
        let mut x = rng.gen_range(lo..hi);
        let mut y = rng.gen_range(lo..hi).max(s * 0.35);
        let width = rng.gen_range(1..=4usize);
        let length = s * rng.gen_range(0.12..0.25);
        let mut heading = -std::f64::consts::FRAC_PI_2 + rng.gen_range(-0.5..0.5);
        let steps = (length / 0.5).ceil() as usize;
        let mut path = Vec::with_capacity(steps);
        for _ in 0..steps {
            canvas.disc(x, y, width, &mut rng);
            path.push((x, y));
            heading += rng.gen_range(-0.12..0.12);
            x += 0.5 * heading.cos();
            y += 0.5 * heading.sin();
        }
        let leaves = rng.gen_range(2..=3);
        let a_lo = (s * 0.06).max(4.0);
        let a_hi = (s * 0.1).max(6.0);
        for leaf in 0..leaves {
            // leaves cluster near the top of the stem
            let at = path[path.len() - 1 - (leaf * path.len() / 6).min(path.len() - 1)];
            let a = rng.gen_range(a_lo..a_hi);
            let b = a * rng.gen_range(0.35..0.6);
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let (dx, dy) = (a * 0.8 * angle.cos(), a * 0.8 * angle.sin());
            let sign = if leaf % 2 == 0 { 1.0 } else { -1.0 };
            canvas.ellipse(at.0 + sign * dx, at.1 + sign * dy, a, b, angle, &mut rng);
        }
    }
    Ok((canvas.image, canvas.mask))
}

/// Writes `count` synthetic pairs under `root/images` and `root/masks`.
pub fn write_synthetic_dataset(root: &Path, count: usize, side: usize, seed: u64) -> Result<Vec<SamplePair>> {
    let images = root.join("images");
    let masks = root.join("masks");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&masks)?;
    let mut picker = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let id = format!("synth_{i:04}");
            let n_plants = picker.gen_range(1..=3);
            let item_seed = picker.gen::<u64>();
            let (img, mask) = generate_synthetic_pair(item_seed, side, n_plants)?;
            let image_path = images.join(format!("{id}.png"));
            let mask_path = masks.join(format!("{id}.png"));
            img.save(&image_path)?;
            mask.save(&mask_path)?;
            Ok(SamplePair { id, image_path, mask_path })
        })
        .collect()
}
