use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Squashed primary capsules, `[batch, N, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimaryCapsules<T> {
    pub values: Tensor<T>,
}

/// Global summary of all primary capsules, `[batch, m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVector<T> {
    pub values: Tensor<T>,
}

/// Per-class diagonal Gaussian, both fields `[batch, C, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior<T> {
    pub mu: Tensor<T>,
    pub log_var: Tensor<T>,
}

/// Class capsules `z_c`, `[batch, C, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCapsules<T> {
    pub values: Tensor<T>,
}

/// Class activities `a_c = |z_c|`, `[batch, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Activities<T> {
    pub values: Tensor<T>,
}

/// Routing logits and couplings after one softmax, both `[batch, N, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState<T> {
    pub logits: Tensor<T>,
    pub couplings: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Sample,
    Mean,
}

impl<T: Scalar> Activities<T> {
    pub fn batch(&self) -> usize {
        self.values.rows()
    }

    pub fn classes(&self) -> usize {
        self.values.row_len()
    }

    /// Index of the largest activity per sample; ties go to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.batch())
            .map(|b| argmax(self.values.row(b)))
            .collect()
    }
}

pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
