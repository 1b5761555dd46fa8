use rand::Rng;

use super::types::{Activities, LatentCapsules, Mode};
use crate::error::{Error, Result};
use crate::nn::activation::{relu_backward_inplace, sigmoid_backward_inplace, sigmoid_inplace};
use crate::nn::{relu_inplace, Linear, Param, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `input -> h1 -> h2 -> pixels` MLP with ReLU hidden layers and a sigmoid
/// output.
#[derive(Debug, Clone)]
pub struct Decoder<T> {
    pub l1: Linear<T>,
    pub l2: Linear<T>,
    pub l3: Linear<T>,
}

pub struct DecoderCache<T> {
    input: Vec<T>,
    a1: Vec<T>,
    a2: Vec<T>,
    out: Vec<T>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        hidden: (usize, usize),
        pixels: usize,
        rng: &mut R,
    ) -> Self {
        Decoder {
            l1: Linear::new("decoder.l1", input, hidden.0, rng),
            l2: Linear::new("decoder.l2", hidden.0, hidden.1, rng),
            l3: Linear::new("decoder.l3", hidden.1, pixels, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.l1.in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.l3.out_dim
    }

    pub fn forward(&self, input: &[T], batch: usize) -> (Vec<T>, DecoderCache<T>) {
        let mut a1 = self.l1.forward(input, batch);
        relu_inplace(&mut a1);
        let mut a2 = self.l2.forward(&a1, batch);
        relu_inplace(&mut a2);
        let mut out = self.l3.forward(&a2, batch);
        sigmoid_inplace(&mut out);
        (
            out.clone(),
            DecoderCache {
                input: input.to_vec(),
                a1,
                a2,
                out,
            },
        )
    }

    /// Returns the gradient with respect to the decoder input.
    pub fn backward(&mut self, cache: DecoderCache<T>, dout: &[T], batch: usize) -> Vec<T> {
        let mut d = dout.to_vec();
        sigmoid_backward_inplace(&cache.out, &mut d);
        let mut d2 = self.l3.backward(&cache.a2, &d, batch, true).expect("dx");
        relu_backward_inplace(&cache.a2, &mut d2);
        let mut d1 = self.l2.backward(&cache.a1, &d2, batch, true).expect("dx");
        relu_backward_inplace(&cache.a1, &mut d1);
        self.l1
            .backward(&cache.input, &d1, batch, true)
            .expect("dx")
    }
}

impl<T: Scalar> Parameters<T> for Decoder<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.l1.visit(f);
        self.l2.visit(f);
        self.l3.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.l1.visit_mut(f);
        self.l2.visit_mut(f);
        self.l3.visit_mut(f);
    }
}

/// Runs the decoder on one selected capsule per sample, `[batch, k]`.
pub fn reconstruction_forward<T: Scalar>(
    z_selected: &Tensor<T>,
    decoder: &Decoder<T>,
) -> Result<Tensor<T>> {
    if z_selected.row_len() != decoder.input_dim() {
        return Err(Error::Shape(format!(
            "decoder expects width {}, got {}",
            decoder.input_dim(),
            z_selected.row_len()
        )));
    }
    let batch = z_selected.rows();
    let (out, _) = decoder.forward(z_selected.data(), batch);
    Tensor::from_vec(&[batch, decoder.output_dim()], out)
}

/// Chooses which class capsule feeds the decoder.
///
/// Eval mode always takes the arg-max activity (lowest index on ties). In
/// train mode with `mask_with_truth`, the ground-truth class is used.
pub fn selection_indices<T: Scalar>(
    activities: &Activities<T>,
    labels: Option<&[usize]>,
    mode: Mode,
    mask_with_truth: bool,
) -> Result<Vec<usize>> {
    match (mode, mask_with_truth) {
        (Mode::Train, true) => {
            let labels = labels.ok_or_else(|| {
                Error::Input("train-mode selection with mask_with_truth needs labels".into())
            })?;
            if labels.len() != activities.batch() {
                return Err(Error::Input("label count differs from batch size".into()));
            }
            if labels.iter().any(|&l| l >= activities.classes()) {
                return Err(Error::Input("label index out of range".into()));
            }
            Ok(labels.to_vec())
        }
        _ => Ok(activities.argmax()),
    }
}

/// Gathers `z[b, idx[b]]` into `[batch, k]`.
pub fn gather_capsules<T: Scalar>(z: &[T], idx: &[usize], classes: usize, k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(idx.len() * k);
    for (b, &c) in idx.iter().enumerate() {
        let off = (b * classes + c) * k;
        out.extend_from_slice(&z[off..off + k]);
    }
    out
}

pub fn select_capsule<T: Scalar>(
    z: &LatentCapsules<T>,
    activities: &Activities<T>,
    labels: Option<&[usize]>,
    mode: Mode,
    mask_with_truth: bool,
) -> Result<Tensor<T>> {
    let s = z.values.shape();
    let (batch, classes, k) = (s[0], s[1], s[2]);
    let idx = selection_indices(activities, labels, mode, mask_with_truth)?;
    Tensor::from_vec(
        &[batch, k],
        gather_capsules(z.values.data(), &idx, classes, k),
    )
}
