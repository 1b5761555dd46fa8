use rand::Rng;

use super::param::{Param, Parameters};
use crate::scalar::Scalar;
use crate::tensor::matmul_nt;

/// Fully connected layer, `y = x W^T + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<T: Scalar> Linear<T> {
    /// Uniform `±1/sqrt(fan_in)` init for both weight and bias.
    pub fn new<R: Rng + ?Sized>(name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Linear {
            weight: Param::uniform(format!("{name}.weight"), &[out_dim, in_dim], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), &[out_dim], bound, rng),
            in_dim,
            out_dim,
        }
    }

    pub fn zeros(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: Param::zeros(format!("{name}.weight"), &[out_dim, in_dim]),
            bias: Param::zeros(format!("{name}.bias"), &[out_dim]),
            in_dim,
            out_dim,
        }
    }

    /// `x: [rows, in]` flattened; returns `[rows, out]`.
    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), rows * self.in_dim);
        let mut y = matmul_nt(x, rows, self.in_dim, self.weight.value.data(), self.out_dim);
        let b = self.bias.value.data();
        for row in y.chunks_exact_mut(self.out_dim) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        y
    }

    /// Accumulates parameter gradients; returns `dx` when requested.
    pub fn backward(&mut self, x: &[T], dy: &[T], rows: usize, want_dx: bool) -> Option<Vec<T>> {
        let (i, o) = (self.in_dim, self.out_dim);
        // dW[out, in] += dy^T @ x
        T::gemm(
            o,
            rows,
            i,
            T::one(),
            dy,
            (1, o),
            x,
            (i, 1),
            T::one(),
            self.weight.grad.data_mut(),
            (i, 1),
        );
        let db = self.bias.grad.data_mut();
        for row in dy.chunks_exact(o) {
            for (g, &d) in db.iter_mut().zip(row) {
                *g += d;
            }
        }
        if !want_dx {
            return None;
        }
        let mut dx = vec![T::zero(); rows * i];
        T::gemm(
            rows,
            o,
            i,
            T::one(),
            dy,
            (o, 1),
            self.weight.value.data(),
            (i, 1),
            T::zero(),
            &mut dx,
            (i, 1),
        );
        Some(dx)
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
