use rand::Rng;

use super::config::{ArchConfig, StemKind};
use super::types::PrimaryCapsules;
use crate::error::{Error, Result};
use crate::nn::activation::relu_backward_inplace;
use crate::nn::{
    relu_inplace, squash, squash_backward, Conv2d, ConvGeometry, Linear, Param, Parameters,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Primary capsule layer: pixels to `[batch, N, d]` squashed capsules.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum PrimaryStem<T> {
    Conv {
        conv1: Conv2d<T>,
        conv2: Conv2d<T>,
        g1: ConvGeometry,
        g2: ConvGeometry,
    },
    Dense {
        proj: Linear<T>,
    },
}

/// Activations kept for the backward pass.
pub struct StemCache<T> {
    batch: usize,
    act1: Vec<T>,
    pre_squash: Vec<T>,
    input: Vec<T>,
}

fn nchw_to_nhwc<T: Scalar>(x: &[T], batch: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    if c == 1 {
        return x.to_vec();
    }
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for ch in 0..c {
            for p in 0..h * w {
                out[(b * h * w + p) * c + ch] = x[(b * c + ch) * h * w + p];
            }
        }
    }
    out
}

impl<T: Scalar> PrimaryStem<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &ArchConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.stem {
            StemKind::Conv {
                channels,
                kernel,
                capsule_types,
                stride,
            } => {
                let conv1 = Conv2d::new("stem.conv1", cfg.in_channels, channels, kernel, 1, rng);
                let conv2 = Conv2d::new(
                    "stem.conv2",
                    channels,
                    capsule_types * cfg.primary_dim,
                    kernel,
                    stride,
                    rng,
                );
                let g1 = conv1
                    .geometry(cfg.image_side, cfg.image_side)
                    .ok_or_else(|| Error::Shape("image smaller than first kernel".into()))?;
                let g2 = conv2
                    .geometry(g1.out_h, g1.out_w)
                    .ok_or_else(|| Error::Shape("feature map smaller than second kernel".into()))?;
                PrimaryStem::Conv {
                    conv1,
                    conv2,
                    g1,
                    g2,
                }
            }
            StemKind::Dense => PrimaryStem::Dense {
                proj: Linear::new(
                    "stem.proj",
                    cfg.pixels(),
                    cfg.num_primary_capsules * cfg.primary_dim,
                    rng,
                ),
            },
        })
    }

    /// `images: [batch, ch, H, W]`. Returns capsules and the backward cache.
    pub fn forward(
        &self,
        cfg: &ArchConfig,
        images: &Tensor<T>,
    ) -> Result<(PrimaryCapsules<T>, StemCache<T>)> {
        let shape = images.shape();
        let expected = [cfg.in_channels, cfg.image_side, cfg.image_side];
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::Shape(format!(
                "expected images [batch, {}, {}, {}], got {:?}",
                expected[0], expected[1], expected[2], shape
            )));
        }
        let batch = shape[0];
        let (n, d) = (cfg.num_primary_capsules, cfg.primary_dim);
        let mut cache = StemCache {
            batch,
            act1: Vec::new(),
            pre_squash: Vec::new(),
            input: Vec::new(),
        };
        let pre = match self {
            PrimaryStem::Conv {
                conv1,
                conv2,
                g1,
                g2,
            } => {
                let x = nchw_to_nhwc(
                    images.data(),
                    batch,
                    cfg.in_channels,
                    cfg.image_side,
                    cfg.image_side,
                );
                let mut a1 = conv1.forward(&x, batch, *g1);
                relu_inplace(&mut a1);
                let pre = conv2.forward(&a1, batch, *g2);
                // [batch, positions, types * d]: capsule index = position * types + type.
                let produced = g2.out_h * g2.out_w * conv2.out_channels / d;
                if produced != n {
                    return Err(Error::Shape(format!(
                        "stem produced {produced} capsules, config declares {n}"
                    )));
                }
                cache.input = x;
                cache.act1 = a1;
                pre
            }
            PrimaryStem::Dense { proj } => {
                cache.input = images.data().to_vec();
                proj.forward(images.data(), batch)
            }
        };
        let caps = squash(&pre, d);
        cache.pre_squash = pre;
        Ok((
            PrimaryCapsules {
                values: Tensor::from_vec(&[batch, n, d], caps)?,
            },
            cache,
        ))
    }

    pub fn backward(&mut self, cfg: &ArchConfig, cache: StemCache<T>, dcaps: &[T]) {
        let dpre = squash_backward(&cache.pre_squash, dcaps, cfg.primary_dim);
        match self {
            PrimaryStem::Conv {
                conv1,
                conv2,
                g1,
                g2,
            } => {
                let mut da1 = conv2
                    .backward(&cache.act1, &dpre, cache.batch, *g2, true)
                    .expect("dx requested");
                relu_backward_inplace(&cache.act1, &mut da1);
                conv1.backward(&cache.input, &da1, cache.batch, *g1, false);
            }
            PrimaryStem::Dense { proj } => {
                proj.backward(&cache.input, &dpre, cache.batch, false);
            }
        }
    }
}

impl<T: Scalar> Parameters<T> for PrimaryStem<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        match self {
            PrimaryStem::Conv { conv1, conv2, .. } => {
                conv1.visit(f);
                conv2.visit(f);
            }
            PrimaryStem::Dense { proj } => proj.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            PrimaryStem::Conv { conv1, conv2, .. } => {
                conv1.visit_mut(f);
                conv2.visit_mut(f);
            }
            PrimaryStem::Dense { proj } => proj.visit_mut(f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::l2_norm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mnist_stem_shape_and_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ArchConfig::mnist();
        let stem = PrimaryStem::<f32>::new(&cfg, &mut rng).unwrap();
        assert_eq!(stem.num_parameters(), 5_329_664);
        let images = Tensor::zeros(&[1, 1, 28, 28]);
        let (caps, _) = stem.forward(&cfg, &images).unwrap();
        assert_eq!(caps.values.shape(), &[1, 1152, 8]);
        for c in caps.values.data().chunks(8) {
            assert!(l2_norm(c) < 1.0);
        }
    }

    #[test]
    fn rgb_stem_yields_2048_capsules() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = ArchConfig::rgb32();
        // Narrow first conv keeps the test fast; geometry is unchanged.
        cfg.stem = StemKind::Conv {
            channels: 4,
            kernel: 9,
            capsule_types: 32,
            stride: 2,
        };
        let stem = PrimaryStem::<f32>::new(&cfg, &mut rng).unwrap();
        let images = Tensor::filled(&[2, 3, 32, 32], 0.5);
        let (caps, _) = stem.forward(&cfg, &images).unwrap();
        assert_eq!(caps.values.shape(), &[2, 2048, 8]);
    }

    #[test]
    fn wrong_image_shape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ArchConfig::tiny();
        let stem = PrimaryStem::<f64>::new(&cfg, &mut rng).unwrap();
        assert!(stem.forward(&cfg, &Tensor::zeros(&[1, 1, 5, 5])).is_err());
    }

    #[test]
    fn channel_reorder() {
        // two channels of a 1x2 image
        let x = [1.0f32, 2.0, 10.0, 20.0];
        assert_eq!(nchw_to_nhwc(&x, 1, 2, 1, 2), vec![1.0, 10.0, 2.0, 20.0]);
    }
}
