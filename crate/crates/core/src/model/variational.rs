//! One-pass variational aggregation: capsule means to a global context,
//! per-class Gaussian heads, reparameterized sampling and the KL penalty.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::types::{ContextVector, GaussianPosterior, LatentCapsules, PrimaryCapsules, SampleMode};
use crate::error::{Error, Result};
use crate::nn::activation::relu_backward_inplace;
use crate::nn::{relu_inplace, squash, Linear, Param, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Two-layer MLP over per-capsule component means, `N -> hidden -> m`.
#[derive(Debug, Clone)]
pub struct ContextEncoder<T> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
    dim: usize,
}

pub struct ContextCache<T> {
    means: Vec<T>,
    act: Vec<T>,
}

/// `[batch, N, d] -> [batch, N]`, averaging each capsule's components.
pub fn capsule_means<T: Scalar>(caps: &[T], d: usize) -> Vec<T> {
    let inv = T::one() / T::lit(d as f64);
    caps.chunks_exact(d)
        .map(|c| c.iter().copied().sum::<T>() * inv)
        .collect()
}

impl<T: Scalar> ContextEncoder<T> {
    pub fn new<R: Rng + ?Sized>(n: usize, d: usize, hidden: usize, m: usize, rng: &mut R) -> Self {
        ContextEncoder {
            hidden: Linear::new("context.hidden", n, hidden, rng),
            output: Linear::new("context.output", hidden, m, rng),
            dim: d,
        }
    }

    pub fn forward(&self, caps: &[T], batch: usize) -> (Vec<T>, ContextCache<T>) {
        let means = capsule_means(caps, self.dim);
        let mut act = self.hidden.forward(&means, batch);
        relu_inplace(&mut act);
        let h = self.output.forward(&act, batch);
        (h, ContextCache { means, act })
    }

    /// Returns the gradient with respect to the capsules `[batch, N, d]`.
    pub fn backward(&mut self, cache: ContextCache<T>, dh: &[T], batch: usize) -> Vec<T> {
        let mut dact = self
            .output
            .backward(&cache.act, dh, batch, true)
            .expect("dx");
        relu_backward_inplace(&cache.act, &mut dact);
        let dmeans = self
            .hidden
            .backward(&cache.means, &dact, batch, true)
            .expect("dx");
        let inv = T::one() / T::lit(self.dim as f64);
        dmeans
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g * inv, self.dim))
            .collect()
    }
}

impl<T: Scalar> Parameters<T> for ContextEncoder<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.hidden.visit(f);
        self.output.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.hidden.visit_mut(f);
        self.output.visit_mut(f);
    }
}

/// Computes the global context vector `h` for a batch of capsules.
pub fn global_context_encode<T: Scalar>(
    caps: &PrimaryCapsules<T>,
    enc: &ContextEncoder<T>,
) -> Result<ContextVector<T>> {
    let s = caps.values.shape();
    if s.len() != 3 || s[1] != enc.hidden.in_dim || s[2] != enc.dim {
        return Err(Error::Shape(format!(
            "capsules {s:?} do not match context encoder input [*, {}, {}]",
            enc.hidden.in_dim, enc.dim
        )));
    }
    let (h, _) = enc.forward(caps.values.data(), s[0]);
    Ok(ContextVector {
        values: Tensor::from_vec(&[s[0], enc.output.out_dim], h)?,
    })
}

/// One independent MLP per class.
#[derive(Debug, Clone)]
pub struct ClassHead<T> {
    pub hidden: Option<Linear<T>>,
    pub output: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct ClassHeads<T> {
    pub heads: Vec<ClassHead<T>>,
    /// Width of each head's output (`k` or `2k`).
    pub out_width: usize,
}

pub struct HeadsCache<T> {
    acts: Vec<Vec<T>>,
}

impl<T: Scalar> ClassHeads<T> {
    pub fn new<R: Rng + ?Sized>(
        classes: usize,
        m: usize,
        hidden: usize,
        out_width: usize,
        rng: &mut R,
    ) -> Self {
        let heads = (0..classes)
            .map(|c| {
                if hidden == 0 {
                    ClassHead {
                        hidden: None,
                        output: Linear::new(&format!("heads.{c}.output"), m, out_width, rng),
                    }
                } else {
                    ClassHead {
                        hidden: Some(Linear::new(&format!("heads.{c}.hidden"), m, hidden, rng)),
                        output: Linear::new(&format!("heads.{c}.output"), hidden, out_width, rng),
                    }
                }
            })
            .collect();
        ClassHeads { heads, out_width }
    }

    pub fn classes(&self) -> usize {
        self.heads.len()
    }

    /// Sets the bias of the log-variance half of every head's output.
    pub fn set_log_var_bias(&mut self, value: f64) {
        let k = self.out_width / 2;
        for h in &mut self.heads {
            for b in &mut h.output.bias.value.data_mut()[k..] {
                *b = T::lit(value);
            }
        }
    }

    /// `h: [batch, m]` to `[batch, C, out_width]`.
    pub fn forward(&self, h: &[T], batch: usize) -> (Vec<T>, HeadsCache<T>) {
        let c = self.heads.len();
        let w = self.out_width;
        let mut out = vec![T::zero(); batch * c * w];
        let mut acts = Vec::with_capacity(c);
        for (ci, head) in self.heads.iter().enumerate() {
            let y = match &head.hidden {
                Some(hid) => {
                    let mut a = hid.forward(h, batch);
                    relu_inplace(&mut a);
                    let y = head.output.forward(&a, batch);
                    acts.push(a);
                    y
                }
                None => {
                    acts.push(Vec::new());
                    head.output.forward(h, batch)
                }
            };
            for b in 0..batch {
                out[(b * c + ci) * w..(b * c + ci + 1) * w].copy_from_slice(&y[b * w..(b + 1) * w]);
            }
        }
        (out, HeadsCache { acts })
    }

    /// Returns `dh` given `dout: [batch, C, out_width]`.
    pub fn backward(&mut self, h: &[T], cache: HeadsCache<T>, dout: &[T], batch: usize) -> Vec<T> {
        let c = self.heads.len();
        let w = self.out_width;
        let mut dh = vec![T::zero(); h.len()];
        for ((ci, head), act) in self.heads.iter_mut().enumerate().zip(cache.acts) {
            let mut dy = vec![T::zero(); batch * w];
            for b in 0..batch {
                dy[b * w..(b + 1) * w]
                    .copy_from_slice(&dout[(b * c + ci) * w..(b * c + ci + 1) * w]);
            }
            let dx = match &mut head.hidden {
                Some(hid) => {
                    let mut da = head.output.backward(&act, &dy, batch, true).expect("dx");
                    relu_backward_inplace(&act, &mut da);
                    hid.backward(h, &da, batch, true).expect("dx")
                }
                None => head.output.backward(h, &dy, batch, true).expect("dx"),
            };
            for (g, d) in dh.iter_mut().zip(dx) {
                *g += d;
            }
        }
        dh
    }
}

impl<T: Scalar> Parameters<T> for ClassHeads<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for h in &self.heads {
            h.hidden.visit(f);
            h.output.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for h in &mut self.heads {
            h.hidden.visit_mut(f);
            h.output.visit_mut(f);
        }
    }
}

/// Splits `[batch, C, 2k]` head outputs into means and log-variances.
pub fn split_posterior<T: Scalar>(
    raw: &[T],
    batch: usize,
    classes: usize,
    k: usize,
) -> (Vec<T>, Vec<T>) {
    let mut mu = Vec::with_capacity(batch * classes * k);
    let mut lv = Vec::with_capacity(batch * classes * k);
    for row in raw.chunks_exact(2 * k) {
        mu.extend_from_slice(&row[..k]);
        lv.extend_from_slice(&row[k..]);
    }
    (mu, lv)
}

/// Evaluates every class head on `h`; when `squash_means` is set, the
/// posterior means are squashed per class capsule.
pub fn class_vae_encode<T: Scalar>(
    h: &ContextVector<T>,
    heads: &ClassHeads<T>,
    squash_means: bool,
) -> Result<GaussianPosterior<T>> {
    if !heads.out_width.is_multiple_of(2) {
        return Err(Error::Config(
            "posterior heads need an even output width".into(),
        ));
    }
    let batch = h.values.rows();
    let k = heads.out_width / 2;
    let c = heads.classes();
    let (raw, _) = heads.forward(h.values.data(), batch);
    let (mut mu, lv) = split_posterior(&raw, batch, c, k);
    if squash_means {
        mu = squash(&mu, k);
    }
    Ok(GaussianPosterior {
        mu: Tensor::from_vec(&[batch, c, k], mu)?,
        log_var: Tensor::from_vec(&[batch, c, k], lv)?,
    })
}

/// Initial log-variance for `k`-dimensional latent capsules: the expected
/// sample noise norm `sigma * sqrt(k)` starts at the negative margin. With
/// unit variance the noise alone has norm near `sqrt(k)`, far above any
/// margin, and training collapses to input-independent activities.
pub fn initial_log_var(k: usize, margin_neg: f64) -> f64 {
    2.0 * (margin_neg / (k as f64).sqrt()).ln()
}

/// `z = mu + exp(log_var / 2) * eps`. Returns `z` and the noise used
/// (`None` in mean mode).
pub fn sample_latent<T: Scalar, R: Rng + ?Sized>(
    mu: &[T],
    log_var: &[T],
    mode: SampleMode,
    rng: &mut R,
) -> (Vec<T>, Option<Vec<T>>) {
    match mode {
        SampleMode::Mean => (mu.to_vec(), None),
        SampleMode::Sample => {
            let half = T::lit(0.5);
            let eps: Vec<T> = (0..mu.len())
                .map(|_| {
                    let e: f64 = StandardNormal.sample(rng);
                    T::lit(e)
                })
                .collect();
            let z = mu
                .iter()
                .zip(log_var)
                .zip(&eps)
                .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
                .collect();
            (z, Some(eps))
        }
    }
}

pub fn reparameterize<T: Scalar, R: Rng + ?Sized>(
    post: &GaussianPosterior<T>,
    mode: SampleMode,
    rng: &mut R,
) -> LatentCapsules<T> {
    let (z, _) = sample_latent(post.mu.data(), post.log_var.data(), mode, rng);
    LatentCapsules {
        values: Tensor::from_vec(post.mu.shape(), z).expect("same shape as mu"),
    }
}

/// Gradients of `z` with respect to `mu` and `log_var`.
pub fn sample_latent_backward<T: Scalar>(
    log_var: &[T],
    eps: Option<&[T]>,
    dz: &[T],
) -> (Vec<T>, Vec<T>) {
    let dmu = dz.to_vec();
    let dlv = match eps {
        None => vec![T::zero(); dz.len()],
        Some(eps) => {
            let half = T::lit(0.5);
            dz.iter()
                .zip(log_var)
                .zip(eps)
                .map(|((&g, &lv), &e)| g * e * half * (half * lv).exp())
                .collect()
        }
    };
    (dmu, dlv)
}

/// Closed-form `KL(N(mu, diag(exp(log_var))) || N(0, I))` summed over the
/// latent dimension, one value per `(batch, class)`.
pub fn kl_to_standard_normal<T: Scalar>(post: &GaussianPosterior<T>) -> Tensor<T> {
    let s = post.mu.shape();
    let k = s[s.len() - 1];
    let vals = kl_rows(post.mu.data(), post.log_var.data(), k);
    Tensor::from_vec(&s[..s.len() - 1], vals).expect("kl shape")
}

pub(crate) fn kl_rows<T: Scalar>(mu: &[T], log_var: &[T], k: usize) -> Vec<T> {
    let half = T::lit(0.5);
    mu.chunks_exact(k)
        .zip(log_var.chunks_exact(k))
        .map(|(m, lv)| {
            half * m
                .iter()
                .zip(lv)
                .map(|(&mu, &l)| mu * mu + l.exp() - l - T::one())
                .sum::<T>()
        })
        .collect()
}

impl<T: Scalar> GaussianPosterior<T> {
    pub fn validate(&self) -> Result<()> {
        if self.mu.shape() != self.log_var.shape() {
            return Err(Error::Shape("mu and log_var shapes differ".into()));
        }
        if !self
            .log_var
            .data()
            .iter()
            .all(|l| l.is_finite() && l.exp() > T::zero())
        {
            return Err(Error::Input(
                "log_var must be finite with positive variance".into(),
            ));
        }
        Ok(())
    }
}
