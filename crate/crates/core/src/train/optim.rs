//! Adam with per-epoch exponential learning-rate decay.

use crate::error::{Error, Result};
use crate::nn::Parameters;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<M: Parameters<T> + ?Sized>(model: &M, lr: f64) -> Self {
        let mut m = Vec::new();
        model.visit(&mut |p| m.push(Tensor::zeros(p.value.shape())));
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    /// Learning rate for a zero-based epoch: `lr0 * decay^epoch`.
    pub fn scheduled_lr(lr0: f64, decay: f64, epoch: usize) -> f64 {
        lr0 * decay.powi(epoch as i32)
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step<M: Parameters<T> + ?Sized>(&mut self, model: &mut M) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let one = T::one();
        let step = T::lit(self.lr * (1.0 - self.beta2.powi(t)).sqrt() / (1.0 - self.beta1.powi(t)));
        let eps = T::lit(self.eps);
        let mut i = 0;
        let mut mismatch = None;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut(&mut |p| {
            if i >= ms.len() || ms[i].shape() != p.value.shape() {
                mismatch.get_or_insert_with(|| p.name.clone());
                i += 1;
                return;
            }
            let m = ms[i].data_mut();
            let v = vs[i].data_mut();
            let g = p.grad.data();
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w -= step * *m / (v.sqrt() + eps);
            }
            p.zero_grad();
            i += 1;
        });
        if let Some(name) = mismatch {
            return Err(Error::Shape(format!(
                "optimizer state does not match parameter {name}"
            )));
        }
        if i != ms.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, model has {i}",
                ms.len()
            )));
        }
        Ok(())
    }
}
