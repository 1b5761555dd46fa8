//! Routing-by-agreement between primary capsules and class capsules.

use rand::Rng;

use super::types::{PrimaryCapsules, RoutingState};
use crate::error::{Error, Result};
use crate::nn::activation::{squash_vec, squash_vec_backward};
use crate::nn::{Param, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Transformation matrices `W: [N, C, d, out]` plus the iteration count.
#[derive(Debug, Clone)]
pub struct RoutingLayer<T> {
    pub weight: Param<T>,
    pub iters: usize,
    n: usize,
    c: usize,
    d: usize,
    out: usize,
}

/// Per-iteration intermediates of one routing call.
#[derive(Debug, Clone)]
pub struct RoutingTrace<T> {
    /// Couplings `[batch, N, C]` per iteration.
    pub couplings: Vec<Vec<T>>,
    /// Final logits `[batch, N, C]` of each iteration (before its softmax).
    pub logits: Vec<Vec<T>>,
    /// Pre-squash class capsules `[batch, C, out]` per iteration.
    pub s: Vec<Vec<T>>,
    /// Squashed class capsules `[batch, C, out]` per iteration.
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> RoutingTrace<T> {
    pub fn states(&self, batch: usize, n: usize, c: usize) -> Vec<RoutingState<T>> {
        self.couplings
            .iter()
            .zip(&self.logits)
            .map(|(cc, bb)| RoutingState {
                logits: Tensor::from_vec(&[batch, n, c], bb.clone()).expect("trace shape"),
                couplings: Tensor::from_vec(&[batch, n, c], cc.clone()).expect("trace shape"),
            })
            .collect()
    }
}

fn softmax_row<T: Scalar>(logits: &[T], out: &mut [T]) {
    let max = logits.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl<T: Scalar> RoutingLayer<T> {
    pub fn new<R: Rng + ?Sized>(
        n: usize,
        c: usize,
        d: usize,
        out: usize,
        iters: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        RoutingLayer {
            weight: Param::normal("routing.weight", &[n, c, d, out], std, rng),
            iters,
            n,
            c,
            d,
            out,
        }
    }

    pub fn from_weight(weight: Tensor<T>, iters: usize) -> Result<Self> {
        let s = weight.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!(
                "routing weight must be rank 4, got {s:?}"
            )));
        }
        Ok(RoutingLayer {
            weight: Param::new("routing.weight", weight),
            iters,
            n: s[0],
            c: s[1],
            d: s[2],
            out: s[3],
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out
    }

    /// Prediction vectors `u_hat[b, i, j] = u[b, i] W[i, j]`, `[batch, N, C, out]`.
    pub fn predictions(&self, u: &[T], batch: usize) -> Vec<T> {
        let (n, c, d, out) = (self.n, self.c, self.d, self.out);
        let mut uhat = vec![T::zero(); batch * n * c * out];
        let w = self.weight.value.data();
        for i in 0..n {
            for j in 0..c {
                let wij = (i * c + j) * d * out;
                T::gemm(
                    batch,
                    d,
                    out,
                    T::one(),
                    &u[i * d..],
                    (n * d, 1),
                    &w[wij..wij + d * out],
                    (out, 1),
                    T::zero(),
                    &mut uhat[(i * c + j) * out..],
                    (n * c * out, 1),
                );
            }
        }
        uhat
    }

    /// Accumulates `dW` and returns `du`.
    pub fn predictions_backward(&mut self, u: &[T], duhat: &[T], batch: usize) -> Vec<T> {
        let (n, c, d, out) = (self.n, self.c, self.d, self.out);
        let mut du = vec![T::zero(); batch * n * d];
        let w = self.weight.value.data();
        let gw = self.weight.grad.data_mut();
        for i in 0..n {
            for j in 0..c {
                let wij = (i * c + j) * d * out;
                let g = &duhat[(i * c + j) * out..];
                T::gemm(
                    d,
                    batch,
                    out,
                    T::one(),
                    &u[i * d..],
                    (1, n * d),
                    g,
                    (n * c * out, 1),
                    T::one(),
                    &mut gw[wij..wij + d * out],
                    (out, 1),
                );
                T::gemm(
                    batch,
                    out,
                    d,
                    T::one(),
                    g,
                    (n * c * out, 1),
                    &w[wij..wij + d * out],
                    (1, out),
                    T::one(),
                    &mut du[i * d..],
                    (n * d, 1),
                );
            }
        }
        du
    }

    /// Runs `iters` rounds of routing on predictions `[batch, N, C, out]`.
    pub fn route(&self, uhat: &[T], batch: usize) -> RoutingTrace<T> {
        route(uhat, batch, self.n, self.c, self.out, self.iters)
    }

    /// Vector-Jacobian product of [`route`] with respect to `uhat`.
    pub fn route_backward(
        &self,
        uhat: &[T],
        trace: &RoutingTrace<T>,
        dv_final: &[T],
        batch: usize,
    ) -> Vec<T> {
        route_backward(uhat, trace, dv_final, batch, self.n, self.c, self.out)
    }
}

pub fn route<T: Scalar>(
    uhat: &[T],
    batch: usize,
    n: usize,
    c: usize,
    out: usize,
    iters: usize,
) -> RoutingTrace<T> {
    let mut trace = RoutingTrace {
        couplings: Vec::with_capacity(iters),
        logits: Vec::with_capacity(iters),
        s: Vec::with_capacity(iters),
        v: Vec::with_capacity(iters),
    };
    let mut logits = vec![T::zero(); batch * n * c];
    for t in 0..iters {
        let mut coup = vec![T::zero(); batch * n * c];
        for (src, dst) in logits.chunks_exact(c).zip(coup.chunks_exact_mut(c)) {
            softmax_row(src, dst);
        }
        let mut s = vec![T::zero(); batch * c * out];
        let mut v = vec![T::zero(); batch * c * out];
        for b in 0..batch {
            let sb = &mut s[b * c * out..(b + 1) * c * out];
            for i in 0..n {
                let base = (b * n + i) * c;
                for j in 0..c {
                    let cij = coup[base + j];
                    let u = &uhat[(base + j) * out..(base + j + 1) * out];
                    for (acc, &x) in sb[j * out..(j + 1) * out].iter_mut().zip(u) {
                        *acc += cij * x;
                    }
                }
            }
            for j in 0..c {
                let r = (b * c + j) * out..(b * c + j + 1) * out;
                squash_vec(&s[r.clone()], &mut v[r]);
            }
        }
        trace.logits.push(logits.clone());
        if t + 1 < iters {
            for b in 0..batch {
                for i in 0..n {
                    let base = (b * n + i) * c;
                    for j in 0..c {
                        let u = &uhat[(base + j) * out..(base + j + 1) * out];
                        let vj = &v[(b * c + j) * out..(b * c + j + 1) * out];
                        logits[base + j] += u.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
            }
        }
        trace.couplings.push(coup);
        trace.s.push(s);
        trace.v.push(v);
    }
    trace
}

pub fn route_backward<T: Scalar>(
    uhat: &[T],
    trace: &RoutingTrace<T>,
    dv_final: &[T],
    batch: usize,
    n: usize,
    c: usize,
    out: usize,
) -> Vec<T> {
    let iters = trace.v.len();
    let mut duhat = vec![T::zero(); uhat.len()];
    // Gradient w.r.t. the logits entering the current iteration, accumulated
    // across later iterations since logits are a running sum of agreements.
    let mut g_logits = vec![T::zero(); batch * n * c];
    let mut dv = dv_final.to_vec();
    for t in (0..iters).rev() {
        let coup = &trace.couplings[t];
        let s = &trace.s[t];
        let mut ds = vec![T::zero(); batch * c * out];
        for ((sv, dvv), dsv) in s
            .chunks_exact(out)
            .zip(dv.chunks_exact(out))
            .zip(ds.chunks_exact_mut(out))
        {
            squash_vec_backward(sv, dvv, dsv);
        }
        let mut dcoup = vec![T::zero(); batch * n * c];
        for b in 0..batch {
            for i in 0..n {
                let base = (b * n + i) * c;
                for j in 0..c {
                    let dsj = &ds[(b * c + j) * out..(b * c + j + 1) * out];
                    let u = &uhat[(base + j) * out..(base + j + 1) * out];
                    let cij = coup[base + j];
                    let du = &mut duhat[(base + j) * out..(base + j + 1) * out];
                    let mut dot = T::zero();
                    for k in 0..out {
                        du[k] += cij * dsj[k];
                        dot += u[k] * dsj[k];
                    }
                    dcoup[base + j] = dot;
                }
            }
        }
        // softmax backward
        for ((cr, dr), gr) in coup
            .chunks_exact(c)
            .zip(dcoup.chunks_exact(c))
            .zip(g_logits.chunks_exact_mut(c))
        {
            let inner: T = cr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
            for ((g, &cj), &dj) in gr.iter_mut().zip(cr).zip(dr) {
                *g += cj * (dj - inner);
            }
        }
        if t == 0 {
            break;
        }
        // logits_t = logits_{t-1} + uhat . v_{t-1}
        let vprev = &trace.v[t - 1];
        let mut dvprev = vec![T::zero(); batch * c * out];
        for b in 0..batch {
            for i in 0..n {
                let base = (b * n + i) * c;
                for j in 0..c {
                    let g = g_logits[base + j];
                    let vj = &vprev[(b * c + j) * out..(b * c + j + 1) * out];
                    let u = &uhat[(base + j) * out..(base + j + 1) * out];
                    let du = &mut duhat[(base + j) * out..(base + j + 1) * out];
                    let dvj = &mut dvprev[(b * c + j) * out..(b * c + j + 1) * out];
                    for k in 0..out {
                        du[k] += g * vj[k];
                        dvj[k] += g * u[k];
                    }
                }
            }
        }
        dv = dvprev;
    }
    duhat
}

/// Routes primary capsules to class capsules: `[batch, C, out]`.
///
/// Also returns the logits/couplings of every iteration.
pub fn dynamic_routing<T: Scalar>(
    caps: &PrimaryCapsules<T>,
    weight: &Tensor<T>,
    iters: usize,
) -> Result<(Tensor<T>, Vec<RoutingState<T>>)> {
    if iters == 0 {
        return Err(Error::Config("routing needs at least one iteration".into()));
    }
    let layer = RoutingLayer::from_weight(weight.clone(), iters)?;
    let cs = caps.values.shape();
    if cs.len() != 3 || cs[1] != layer.n || cs[2] != layer.d {
        return Err(Error::Shape(format!(
            "capsules {:?} incompatible with routing weight {:?}",
            cs,
            weight.shape()
        )));
    }
    let batch = cs[0];
    let uhat = layer.predictions(caps.values.data(), batch);
    let trace = layer.route(&uhat, batch);
    let v = trace.v.last().expect("at least one iteration").clone();
    let states = trace.states(batch, layer.n, layer.c);
    Ok((Tensor::from_vec(&[batch, layer.c, layer.out], v)?, states))
}

impl<T: Scalar> Parameters<T> for RoutingLayer<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
    }
}
