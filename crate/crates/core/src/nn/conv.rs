use rand::Rng;

use super::param::{Param, Parameters};
use crate::scalar::Scalar;

/// Valid (unpadded) 2-D convolution over channels-last activations.
///
/// Activations are `[batch, H, W, C]`; the weight is `[out, kh, kw, in]` so
/// that an im2col row is a run of contiguous channel vectors.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Geometry of one application of a [`Conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

const CHUNK_ENTRIES: usize = 1 << 23;

pub fn conv_output_side(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if input < kernel || stride == 0 {
        return None;
    }
    Some((input - kernel) / stride + 1)
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Conv2d {
            weight: Param::uniform(
                format!("{name}.weight"),
                &[out_channels, kernel, kernel, in_channels],
                bound,
                rng,
            ),
            bias: Param::uniform(format!("{name}.bias"), &[out_channels], bound, rng),
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn geometry(&self, in_h: usize, in_w: usize) -> Option<ConvGeometry> {
        Some(ConvGeometry {
            in_h,
            in_w,
            out_h: conv_output_side(in_h, self.kernel, self.stride)?,
            out_w: conv_output_side(in_w, self.kernel, self.stride)?,
        })
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    /// Samples per im2col chunk, keeping the column buffer near 8M entries.
    fn chunk(&self, g: ConvGeometry) -> usize {
        (CHUNK_ENTRIES / (g.out_h * g.out_w * self.patch_len()).max(1)).max(1)
    }

    /// Patch rows of samples `first..first + n` into `cols`.
    fn im2col(&self, x: &[T], first: usize, n: usize, g: ConvGeometry, cols: &mut Vec<T>) {
        let c = self.in_channels;
        let k = self.kernel;
        let run = k * c;
        let plen = self.patch_len();
        let positions = g.out_h * g.out_w;
        let img_len = g.in_h * g.in_w * c;
        cols.resize(n * positions * plen, T::zero());
        for b in 0..n {
            let img = &x[(first + b) * img_len..(first + b + 1) * img_len];
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let row = (b * positions + oy * g.out_w + ox) * plen;
                    for ky in 0..k {
                        let iy = oy * self.stride + ky;
                        let src = (iy * g.in_w + ox * self.stride) * c;
                        cols[row + ky * run..row + (ky + 1) * run]
                            .copy_from_slice(&img[src..src + run]);
                    }
                }
            }
        }
    }

    /// Scatters patch-row gradients of `n` samples back onto `dx`.
    fn col2im(&self, dcols: &[T], n: usize, g: ConvGeometry, dx: &mut [T]) {
        let c = self.in_channels;
        let k = self.kernel;
        let run = k * c;
        let plen = self.patch_len();
        let positions = g.out_h * g.out_w;
        let img_len = g.in_h * g.in_w * c;
        for b in 0..n {
            let img = &mut dx[b * img_len..(b + 1) * img_len];
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let row = (b * positions + oy * g.out_w + ox) * plen;
                    for ky in 0..k {
                        let iy = oy * self.stride + ky;
                        let dst = (iy * g.in_w + ox * self.stride) * c;
                        let src = &dcols[row + ky * run..row + (ky + 1) * run];
                        for (d, &s) in img[dst..dst + run].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }

    /// Output `[batch, out_h, out_w, out]`.
    pub fn forward(&self, x: &[T], batch: usize, g: ConvGeometry) -> Vec<T> {
        debug_assert_eq!(x.len(), batch * g.in_h * g.in_w * self.in_channels);
        let positions = g.out_h * g.out_w;
        let plen = self.patch_len();
        let oc = self.out_channels;
        let mut y = vec![T::zero(); batch * positions * oc];
        let mut cols = Vec::new();
        let chunk = self.chunk(g);
        for first in (0..batch).step_by(chunk) {
            let n = chunk.min(batch - first);
            self.im2col(x, first, n, g, &mut cols);
            let rows = n * positions;
            T::gemm(
                rows,
                plen,
                oc,
                T::one(),
                &cols,
                (plen, 1),
                self.weight.value.data(),
                (1, plen),
                T::zero(),
                &mut y[first * positions * oc..(first * positions + rows) * oc],
                (oc, 1),
            );
        }
        let bias = self.bias.value.data();
        for row in y.chunks_exact_mut(oc) {
            for (v, &b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        y
    }

    /// Accumulates weight/bias gradients from `dy` given the forward input;
    /// returns `dx` when requested.
    pub fn backward(
        &mut self,
        x: &[T],
        dy: &[T],
        batch: usize,
        g: ConvGeometry,
        want_dx: bool,
    ) -> Option<Vec<T>> {
        let positions = g.out_h * g.out_w;
        let plen = self.patch_len();
        let oc = self.out_channels;
        let img_len = g.in_h * g.in_w * self.in_channels;
        let db = self.bias.grad.data_mut();
        for row in dy.chunks_exact(oc) {
            for (g, &d) in db.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = want_dx.then(|| vec![T::zero(); batch * img_len]);
        let mut cols = Vec::new();
        let mut dcols = Vec::new();
        let chunk = self.chunk(g);
        for first in (0..batch).step_by(chunk) {
            let n = chunk.min(batch - first);
            let rows = n * positions;
            let dy_chunk = &dy[first * positions * oc..(first * positions + rows) * oc];
            self.im2col(x, first, n, g, &mut cols);
            T::gemm(
                oc,
                rows,
                plen,
                T::one(),
                dy_chunk,
                (1, oc),
                &cols,
                (plen, 1),
                T::one(),
                self.weight.grad.data_mut(),
                (plen, 1),
            );
            if let Some(dx) = dx.as_mut() {
                dcols.resize(rows * plen, T::zero());
                T::gemm(
                    rows,
                    oc,
                    plen,
                    T::one(),
                    dy_chunk,
                    (oc, 1),
                    self.weight.value.data(),
                    (plen, 1),
                    T::zero(),
                    &mut dcols,
                    (plen, 1),
                );
                self.col2im(
                    &dcols,
                    n,
                    g,
                    &mut dx[first * img_len..(first + n) * img_len],
                );
            }
        }
        dx
    }
}

impl<T: Scalar> Parameters<T> for Conv2d<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution, independent of im2col.
    fn direct(conv: &Conv2d<f64>, x: &[f64], batch: usize, g: ConvGeometry) -> Vec<f64> {
        let (c, k, oc, s) = (
            conv.in_channels,
            conv.kernel,
            conv.out_channels,
            conv.stride,
        );
        let w = conv.weight.value.data();
        let mut y = vec![0.0; batch * g.out_h * g.out_w * oc];
        for b in 0..batch {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    for o in 0..oc {
                        let mut acc = conv.bias.value.data()[o];
                        for ky in 0..k {
                            for kx in 0..k {
                                for ci in 0..c {
                                    let xi = ((b * g.in_h + oy * s + ky) * g.in_w + ox * s + kx)
                                        * c
                                        + ci;
                                    let wi = ((o * k + ky) * k + kx) * c + ci;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                        y[((b * g.out_h + oy) * g.out_w + ox) * oc + o] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn output_side_arithmetic() {
        assert_eq!(conv_output_side(28, 9, 1), Some(20));
        assert_eq!(conv_output_side(20, 9, 2), Some(6));
        assert_eq!(conv_output_side(24, 9, 2), Some(8));
        assert_eq!(conv_output_side(4, 9, 1), None);
    }

    #[test]
    fn forward_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let conv = Conv2d::<f64>::new("c", 2, 3, 3, 2, &mut rng);
        let g = conv.geometry(7, 6).unwrap();
        let x: Vec<f64> = (0..2 * 7 * 6 * 2)
            .map(|i| ((i * 37 % 11) as f64) / 7.0 - 0.6)
            .collect();
        let y = conv.forward(&x, 2, g);
        for (a, b) in y.iter().zip(direct(&conv, &x, 2, g)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::<f64>::new("c", 2, 2, 2, 1, &mut rng);
        let g = conv.geometry(3, 3).unwrap();
        let x: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin()).collect();
        let coef: Vec<f64> = (0..8).map(|i| (i as f64 * 0.91).cos()).collect();
        let loss = |c: &Conv2d<f64>, x: &[f64]| -> f64 {
            c.forward(x, 1, g)
                .iter()
                .zip(&coef)
                .map(|(a, b)| a * b)
                .sum()
        };
        let dx = conv.backward(&x, &coef, 1, g, true).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-8, "dx[{i}]");
        }
        for i in 0..conv.weight.numel() {
            let (mut cp, mut cm) = (conv.clone(), conv.clone());
            cp.weight.value.data_mut()[i] += h;
            cm.weight.value.data_mut()[i] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!((fd - conv.weight.grad.data()[i]).abs() < 1e-8, "dw[{i}]");
        }
    }
}
