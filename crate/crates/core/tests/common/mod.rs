#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ugda_seg::data::{example_rng, preprocess_loaded, LoadedSample, PrepMode, PreprocessedExample};
use ugda_seg::synthetic::generate_synthetic_pair;
use ugda_seg::train::Batch;

/// In-memory synthetic samples `synth_{i}` with one to three plants.
pub fn synthetic_samples(count: usize, side: usize, seed: u64) -> Vec<LoadedSample> {
    (0..count)
        .map(|i| {
            let (image, mask) = generate_synthetic_pair(seed + i as u64, side, 1 + i % 3).unwrap();
            LoadedSample { id: format!("synth_{i:02}"), image, mask }
        })
        .collect()
}

pub fn eval_examples(samples: &[LoadedSample], side: usize) -> Vec<PreprocessedExample> {
    samples
        .iter()
        .map(|s| preprocess_loaded(s, PrepMode::Eval, &mut example_rng(0, 0, &s.id), side).unwrap())
        .collect()
}

pub fn batch(examples: &[PreprocessedExample], dtype: DType) -> Batch {
    let refs: Vec<&PreprocessedExample> = examples.iter().collect();
    Batch::from_examples(&refs, dtype).unwrap()
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}
