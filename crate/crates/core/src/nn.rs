//! Parameter storage and the handful of layers the encoder/decoders are built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SegError};
use crate::ops;

/// A named parameter; buffers (normalization statistics) are not trained.
#[derive(Clone, Debug)]
pub struct Param {
    pub var: Var,
    pub trainable: bool,
}

/// Owns every variable of a model under a dotted name, with a seeded initializer.
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device, seed: u64) -> Self {
        Self { params: BTreeMap::new(), dtype, device, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(SegError::Config(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&tensor.to_dtype(self.dtype)?)?;
        self.params.insert(name.to_string(), Param { var: var.clone(), trainable });
        Ok(var)
    }

    /// Glorot-uniform weights with bound `sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<Var> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let t = Tensor::from_vec(values, shape, &self.device)?;
        self.insert(name, t, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = Tensor::full(value, shape, &self.device)?;
        self.insert(name, t, true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = Tensor::full(value, shape, &self.device)?;
        self.insert(name, t, false)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.params.values().filter(|p| p.trainable).map(|p| p.var.clone()).collect()
    }

    /// Total number of scalar parameters (buffers excluded).
    pub fn num_trainable(&self) -> usize {
        self.params.values().filter(|p| p.trainable).map(|p| p.var.elem_count()).sum()
    }

    /// Overwrites a parameter's value, checking the shape.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| SegError::Checkpoint(format!("unknown parameter {name}")))?;
        if p.var.dims() != value.dims() {
            return Err(SegError::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                p.var.dims(),
                value.dims()
            )));
        }
        p.var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    /// Copies every parameter present in both stores; returns how many were copied.
    pub fn copy_shared_from(&self, other: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for (name, p) in other.iter() {
            if self.params.contains_key(name) {
                self.set(name, p.var.as_tensor())?;
                copied += 1;
            }
        }
        Ok(copied)
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.glorot(&join(prefix, "weight"), &[cout, cin, k, k], cin * k * k, cout * k * k)?;
        let bias = if bias { Some(store.constant(&join(prefix, "bias"), &[cout], 0.0)?) } else { None };
        Ok(Self { weight, bias, stride, pad })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, self.weight.as_tensor(), self.bias.as_ref().map(|b| b.as_tensor()), self.stride, self.pad)
    }
}

/// Transposed convolution; weight layout `(Cin, Cout, k, k)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.glorot(&join(prefix, "weight"), &[cin, cout, k, k], cout * k * k, cin * k * k)?;
        let bias = if bias { Some(store.constant(&join(prefix, "bias"), &[cout], 0.0)?) } else { None };
        Ok(Self { weight, bias, stride, pad })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv_transpose2d(x, self.weight.as_tensor(), self.bias.as_ref().map(|b| b.as_tensor()), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub weight: Var,
    pub bias: Var,
    pub running_mean: Var,
    pub running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.constant(&join(prefix, "weight"), &[channels], 1.0)?,
            bias: store.constant(&join(prefix, "bias"), &[channels], 0.0)?,
            running_mean: store.buffer(&join(prefix, "running_mean"), &[channels], 0.0)?,
            running_var: store.buffer(&join(prefix, "running_var"), &[channels], 1.0)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    /// Batch statistics in training (running averages updated in place), running statistics otherwise.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if train {
            let (y, mean, var) = ops::batch_norm_train(x, self.weight.as_tensor(), self.bias.as_tensor(), self.eps)?;
            let count = (n * h * w) as f64;
            let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.momentum;
            let dev = x.device();
            let mean = Tensor::from_vec(mean, c, dev)?.to_dtype(x.dtype())?;
            let var = Tensor::from_vec(var.into_iter().map(|v| v * correction).collect::<Vec<_>>(), c, dev)?.to_dtype(x.dtype())?;
            self.running_mean.set(&((self.running_mean.as_tensor() * (1.0 - m))? + (mean * m)?)?)?;
            self.running_var.set(&((self.running_var.as_tensor() * (1.0 - m))? + (var * m)?)?)?;
            return Ok(y);
        }
        let inv_std = (self.running_var.as_tensor() + self.eps)?.sqrt()?.recip()?;
        let scale = self.weight.as_tensor().mul(&inv_std)?;
        let shift = (self.bias.as_tensor() - self.running_mean.as_tensor().mul(&scale)?)?;
        Ok(x.broadcast_mul(&scale.reshape((1, c, 1, 1))?)?.broadcast_add(&shift.reshape((1, c, 1, 1))?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_bound_is_respected_and_seeded() {
        let mut a = ParamStore::new(DType::F64, Device::Cpu, 3);
        let mut b = ParamStore::new(DType::F64, Device::Cpu, 3);
        let wa = a.glorot("w", &[8, 4, 3, 3], 36, 72).unwrap();
        let wb = b.glorot("w", &[8, 4, 3, 3], 36, 72).unwrap();
        let va = wa.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let vb = wb.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(va, vb);
        let bound = (6.0f64 / 108.0).sqrt();
        assert!(va.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new(DType::F32, Device::Cpu, 0);
        s.constant("x", &[1], 0.0).unwrap();
        assert!(s.constant("x", &[1], 0.0).is_err());
    }

    #[test]
    fn batch_norm_train_mode_normalizes_and_tracks_stats() {
        let mut s = ParamStore::new(DType::F64, Device::Cpu, 0);
        let bn = BatchNorm2d::new(&mut s, "bn", 2).unwrap();
        let x = Tensor::arange(0.0f64, 16.0, &Device::Cpu).unwrap().reshape((2, 2, 2, 2)).unwrap();
        let y = bn.forward(&x, true).unwrap();
        let m = y.mean_keepdim((0, 2, 3)).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-12));
        let rm = bn.running_mean.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // channel 0 holds {0,1,2,3,8,9,10,11}: mean 5.5
        assert!((rm[0] - 0.55).abs() < 1e-12);
        assert_eq!(s.num_trainable(), 4);
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut r = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let dev = Device::Cpu;
        let x0 = r(2 * 3 * 3 * 2);
        let g0 = r(3);
        let b0 = r(3);
        let mix = Tensor::from_vec(r(36), (2, 3, 3, 2), &dev).unwrap();
        let f = |x: &[f64], g: &[f64], b: &[f64]| -> (f64, Vec<Vec<f64>>) {
            let vars = [
                Var::from_vec(x.to_vec(), (2, 3, 3, 2), &dev).unwrap(),
                Var::from_vec(g.to_vec(), 3, &dev).unwrap(),
                Var::from_vec(b.to_vec(), 3, &dev).unwrap(),
            ];
            let (y, _, _) = ops::batch_norm_train(vars[0].as_tensor(), vars[1].as_tensor(), vars[2].as_tensor(), 1e-5).unwrap();
            let loss = y.mul(&mix).unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            let gs = vars.iter().map(|v| grads.get(v).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()).collect();
            (loss.to_scalar::<f64>().unwrap(), gs)
        };
        let (_, analytic) = f(&x0, &g0, &b0);
        let eps = 1e-6;
        let inputs = [x0.clone(), g0.clone(), b0.clone()];
        for (which, base) in inputs.iter().enumerate() {
            for i in 0..base.len() {
                let mut p = inputs.clone();
                let mut m = inputs.clone();
                p[which][i] += eps;
                m[which][i] -= eps;
                let numeric = (f(&p[0], &p[1], &p[2]).0 - f(&m[0], &m[1], &m[2]).0) / (2.0 * eps);
                let a = analytic[which][i];
                assert!((numeric - a).abs() <= 1e-6 * (1.0 + numeric.abs()), "input {which} index {i}: {numeric} vs {a}");
            }
        }
    }
}
