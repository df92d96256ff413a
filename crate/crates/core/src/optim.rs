//! AdamW with decoupled weight decay. Same update as `candle_nn::AdamW`, but
//! each parameter is read, updated and written back in a single pass.

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var, WithDType};
pub use candle_nn::ParamsAdamW;

use crate::error::{Result, SegError};

enum Moments {
    F32(Vec<f32>, Vec<f32>),
    F64(Vec<f64>, Vec<f64>),
}

struct Slot {
    var: Var,
    moments: Option<Moments>,
}

pub struct AdamW {
    params: ParamsAdamW,
    step: i32,
    slots: Vec<Slot>,
}

#[derive(Clone, Copy)]
struct Coeffs {
    lr: f64,
    decay: f64,
    beta1: f64,
    beta2: f64,
    scale_m: f64,
    scale_v: f64,
    eps: f64,
}

fn update<T: WithDType>(var: &Var, grad: &Tensor, m: &mut [T], v: &mut [T], c: Coeffs) -> Result<()> {
    let mut theta = var.as_tensor().flatten_all()?.to_vec1::<T>()?;
    let g = grad.flatten_all()?.to_vec1::<T>()?;
    for i in 0..theta.len() {
        let gi = g[i].to_f64();
        let mi = c.beta1 * m[i].to_f64() + (1.0 - c.beta1) * gi;
        let vi = c.beta2 * v[i].to_f64() + (1.0 - c.beta2) * gi * gi;
        let step = (mi * c.scale_m) / ((vi * c.scale_v).sqrt() + c.eps);
        theta[i] = T::from_f64(theta[i].to_f64() * (1.0 - c.decay) - c.lr * step);
        m[i] = T::from_f64(mi);
        v[i] = T::from_f64(vi);
    }
    var.set(&Tensor::from_vec(theta, var.shape(), var.device())?)?;
    Ok(())
}

impl AdamW {
    pub fn new(vars: Vec<Var>, params: ParamsAdamW) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|var| match var.dtype() {
                DType::F32 | DType::F64 => Ok(Slot { var, moments: None }),
                other => Err(SegError::Config(format!("AdamW supports f32/f64 parameters, got {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { params, step: 0, slots })
    }

    pub fn learning_rate(&self) -> f64 {
        self.params.lr
    }

    /// Applies one update from `grads`; parameters without a gradient are skipped.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let p = &self.params;
        let c = Coeffs {
            lr: p.lr,
            decay: p.lr * p.weight_decay,
            beta1: p.beta1,
            beta2: p.beta2,
            scale_m: 1.0 / (1.0 - p.beta1.powi(self.step)),
            scale_v: 1.0 / (1.0 - p.beta2.powi(self.step)),
            eps: p.eps,
        };
        for slot in &mut self.slots {
            let Some(grad) = grads.get(&slot.var) else { continue };
            let n = slot.var.elem_count();
            let moments = slot.moments.get_or_insert_with(|| match slot.var.dtype() {
                DType::F32 => Moments::F32(vec![0.0; n], vec![0.0; n]),
                _ => Moments::F64(vec![0.0; n], vec![0.0; n]),
            });
            match moments {
                Moments::F32(m, v) => update(&slot.var, grad, m, v, c)?,
                Moments::F64(m, v) => update(&slot.var, grad, m, v, c)?,
            }
        }
        Ok(())
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }
}
