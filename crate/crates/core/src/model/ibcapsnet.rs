//! Capsule network with one-pass variational aggregation in place of routing.
//!
//! Pipeline: primary capsules, per-capsule component means, a global context
//! vector, one Gaussian head per class, reparameterized class capsules whose
//! norms are the class activities, and a shared decoder fed by a single
//! selected capsule. The [`ModelVariantFlags`] switch off components for
//! ablation:
//!
//! * baseline: a single linear classifier on the capsule means with sigmoid
//!   activities;
//! * multi-classifier: context encoder and deterministic per-class heads,
//!   activity = head output norm;
//! * squash & KL: heads emit `[mu, log_var]`, means are squashed, capsules
//!   are sampled in training and the KL term is active;
//! * reconstruction: the full model.

use rand::Rng;

use super::config::{ArchConfig, MarginLossConfig, ModelVariantFlags};
use super::decoder::{gather_capsules, selection_indices, Decoder, DecoderCache};
use super::loss::{
    kl_loss_grad, label_indices, margin_loss_grad, recon_loss_grad, validate_one_hot, LossBreakdown,
};
use super::stem::{PrimaryStem, StemCache};
use super::types::{Activities, GaussianPosterior, LatentCapsules, Mode, SampleMode};
use super::variational::{
    capsule_means, initial_log_var, sample_latent, sample_latent_backward, split_posterior,
    ClassHeads, ContextCache, ContextEncoder, HeadsCache,
};
use super::{ForwardOutput, TrainOptions};
use crate::error::Result;
use crate::nn::activation::{sigmoid_backward_inplace, sigmoid_inplace};
use crate::nn::{l2_norm, squash, squash_backward, Linear, Param, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct IbCapsNet<T> {
    pub arch: ArchConfig,
    pub variant: ModelVariantFlags,
    pub stem: PrimaryStem<T>,
    pub context: Option<ContextEncoder<T>>,
    pub heads: Option<ClassHeads<T>>,
    /// Only present in the baseline variant.
    pub linear_classifier: Option<Linear<T>>,
    pub decoder: Option<Decoder<T>>,
}

enum Aggregation<T> {
    Linear {
        means: Vec<T>,
    },
    Heads {
        context: ContextCache<T>,
        h: Vec<T>,
        heads: HeadsCache<T>,
        raw_mu: Vec<T>,
        eps: Option<Vec<T>>,
    },
}

struct Cache<T> {
    stem: StemCache<T>,
    agg: Aggregation<T>,
    decoder: Option<DecoderCache<T>>,
}

impl<T: Scalar> IbCapsNet<T> {
    pub fn new<R: Rng + ?Sized>(
        arch: &ArchConfig,
        variant: ModelVariantFlags,
        rng: &mut R,
    ) -> Result<Self> {
        arch.validate()?;
        variant.validate()?;
        let stem = PrimaryStem::new(arch, rng)?;
        let k = arch.latent_dim;
        let (context, heads, linear_classifier) = if variant.multi_classifier {
            let ctx = ContextEncoder::new(
                arch.num_primary_capsules,
                arch.primary_dim,
                arch.context_hidden,
                arch.context_dim,
                rng,
            );
            let width = if variant.squash_and_kl { 2 * k } else { k };
            let mut heads = ClassHeads::new(
                arch.num_classes,
                arch.context_dim,
                arch.class_head_hidden,
                width,
                rng,
            );
            if variant.squash_and_kl {
                heads.set_log_var_bias(initial_log_var(k, MarginLossConfig::default().m_minus));
            }
            (Some(ctx), Some(heads), None)
        } else {
            let lin = Linear::new(
                "classifier",
                arch.num_primary_capsules,
                arch.num_classes,
                rng,
            );
            (None, None, Some(lin))
        };
        let decoder = variant
            .reconstruction
            .then(|| Decoder::new(k, arch.decoder_hidden, arch.pixels(), rng));
        Ok(IbCapsNet {
            arch: arch.clone(),
            variant,
            stem,
            context,
            heads,
            linear_classifier,
            decoder,
        })
    }

    fn run<R: Rng + ?Sized>(
        &self,
        images: &Tensor<T>,
        labels: Option<&[usize]>,
        mode: Mode,
        mask_with_truth: bool,
        rng: &mut R,
    ) -> Result<(ForwardOutput<T>, Cache<T>)> {
        let a = &self.arch;
        let (c, k) = (a.num_classes, a.latent_dim);
        let (caps, stem_cache) = self.stem.forward(a, images)?;
        let batch = caps.values.rows();

        let (latent, activities, posterior, agg) =
            match (&self.context, &self.heads, &self.linear_classifier) {
                (Some(ctx), Some(heads), _) => {
                    let (h, ctx_cache) = ctx.forward(caps.values.data(), batch);
                    let (raw, heads_cache) = heads.forward(&h, batch);
                    if self.variant.squash_and_kl {
                        let (raw_mu, lv) = split_posterior(&raw, batch, c, k);
                        let mu = squash(&raw_mu, k);
                        let sample_mode = match mode {
                            Mode::Train => SampleMode::Sample,
                            Mode::Eval => SampleMode::Mean,
                        };
                        let (z, eps) = sample_latent(&mu, &lv, sample_mode, rng);
                        let post = GaussianPosterior {
                            mu: Tensor::from_vec(&[batch, c, k], mu)?,
                            log_var: Tensor::from_vec(&[batch, c, k], lv)?,
                        };
                        let acts: Vec<T> = z.chunks_exact(k).map(l2_norm).collect();
                        (
                            z,
                            acts,
                            Some(post),
                            Aggregation::Heads {
                                context: ctx_cache,
                                h,
                                heads: heads_cache,
                                raw_mu,
                                eps,
                            },
                        )
                    } else {
                        let acts: Vec<T> = raw.chunks_exact(k).map(l2_norm).collect();
                        (
                            raw,
                            acts,
                            None,
                            Aggregation::Heads {
                                context: ctx_cache,
                                h,
                                heads: heads_cache,
                                raw_mu: Vec::new(),
                                eps: None,
                            },
                        )
                    }
                }
                (_, _, Some(lin)) => {
                    let means = capsule_means(caps.values.data(), a.primary_dim);
                    let mut acts = lin.forward(&means, batch);
                    sigmoid_inplace(&mut acts);
                    (acts.clone(), acts, None, Aggregation::Linear { means })
                }
                _ => unreachable!("constructor guarantees one aggregation path"),
            };
        let zk = latent.len() / (batch * c);
        let activities = Activities {
            values: Tensor::from_vec(&[batch, c], activities)?,
        };
        let selected = selection_indices(&activities, labels, mode, mask_with_truth)?;
        let (recon, dec_cache) = match &self.decoder {
            Some(dec) => {
                let zsel = gather_capsules(&latent, &selected, c, k);
                let (r, cache) = dec.forward(&zsel, batch);
                (
                    Some(Tensor::from_vec(&[batch, a.pixels()], r)?),
                    Some(cache),
                )
            }
            None => (None, None),
        };
        let out = ForwardOutput {
            activities,
            latent: LatentCapsules {
                values: Tensor::from_vec(&[batch, c, zk], latent)?,
            },
            recon,
            posterior,
            selected,
        };
        Ok((
            out,
            Cache {
                stem: stem_cache,
                agg,
                decoder: dec_cache,
            },
        ))
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        images: &Tensor<T>,
        labels: Option<&[usize]>,
        mode: Mode,
        mask_with_truth: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput<T>> {
        Ok(self.run(images, labels, mode, mask_with_truth, rng)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn losses<R: Rng + ?Sized>(
        &self,
        images: &Tensor<T>,
        labels: &Tensor<T>,
        opts: &TrainOptions,
        rng: &mut R,
    ) -> Result<(
        LossBreakdown,
        ForwardOutput<T>,
        Cache<T>,
        Vec<T>,
        Option<Vec<T>>,
    )> {
        validate_one_hot(labels, self.arch.num_classes)?;
        let idx = label_indices(labels);
        let batch = idx.len();
        let (out, cache) = self.run(images, Some(&idx), Mode::Train, opts.mask_with_truth, rng)?;
        let (cls, da) = margin_loss_grad(
            out.activities.values.data(),
            labels.data(),
            self.arch.num_classes,
            &opts.margin,
        );
        let (rec, drec) = match &out.recon {
            Some(r) => {
                let (l, g) = recon_loss_grad(images.data(), r.data(), batch);
                (l, Some(g))
            }
            None => (0.0, None),
        };
        let kl = match &out.posterior {
            Some(p) => kl_loss_grad(p.mu.data(), p.log_var.data(), self.arch.latent_dim, batch).0,
            None => 0.0,
        };
        // Without a decoder the reconstruction weight has nothing to scale.
        let mut weights = opts.weights;
        if self.decoder.is_none() {
            weights.recon_weight = 0.0;
        }
        if out.posterior.is_none() {
            weights.kl_weight = 0.0;
        }
        let loss = LossBreakdown::combine(cls, rec, kl, &weights);
        Ok((loss, out, cache, da, drec))
    }

    pub fn loss<R: Rng + ?Sized>(
        &self,
        images: &Tensor<T>,
        labels: &Tensor<T>,
        opts: &TrainOptions,
        rng: &mut R,
    ) -> Result<LossBreakdown> {
        Ok(self.losses(images, labels, opts, rng)?.0)
    }

    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        images: &Tensor<T>,
        labels: &Tensor<T>,
        opts: &TrainOptions,
        rng: &mut R,
    ) -> Result<LossBreakdown> {
        let (loss, out, cache, da, drec) = self.losses(images, labels, opts, rng)?;
        let (c, k) = (self.arch.num_classes, self.arch.latent_dim);
        let batch = out.activities.batch();
        let acts = out.activities.values.data();

        let dcaps = match cache.agg {
            Aggregation::Linear { means } => {
                let mut dlogits = da;
                sigmoid_backward_inplace(acts, &mut dlogits);
                let lin = self
                    .linear_classifier
                    .as_mut()
                    .expect("baseline classifier");
                let dmeans = lin.backward(&means, &dlogits, batch, true).expect("dx");
                let d = self.arch.primary_dim;
                let inv = T::one() / T::lit(d as f64);
                dmeans
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g * inv, d))
                    .collect()
            }
            Aggregation::Heads {
                context,
                h,
                heads,
                raw_mu,
                eps,
            } => {
                let z = out.latent.values.data();
                let mut dz = vec![T::zero(); z.len()];
                for (j, (cap, g)) in z.chunks_exact(k).zip(dz.chunks_exact_mut(k)).enumerate() {
                    if acts[j] > T::zero() {
                        let s = da[j] / acts[j];
                        for (gi, &x) in g.iter_mut().zip(cap) {
                            *gi = s * x;
                        }
                    }
                }
                if let (Some(dec), Some(dec_cache), Some(mut drec)) =
                    (self.decoder.as_mut(), cache.decoder, drec)
                {
                    let lam = T::lit(opts.weights.recon_weight);
                    drec.iter_mut().for_each(|g| *g *= lam);
                    let dsel = dec.backward(dec_cache, &drec, batch);
                    for (b, &s) in out.selected.iter().enumerate() {
                        let off = (b * c + s) * k;
                        for (g, &d) in dz[off..off + k].iter_mut().zip(&dsel[b * k..(b + 1) * k]) {
                            *g += d;
                        }
                    }
                }
                let draw = match &out.posterior {
                    Some(post) => {
                        let (mut dmu, mut dlv) =
                            sample_latent_backward(post.log_var.data(), eps.as_deref(), &dz);
                        let beta = T::lit(opts.weights.kl_weight);
                        let (_, kmu, klv) =
                            kl_loss_grad(post.mu.data(), post.log_var.data(), k, batch);
                        for (g, d) in dmu.iter_mut().zip(kmu) {
                            *g += beta * d;
                        }
                        for (g, d) in dlv.iter_mut().zip(klv) {
                            *g += beta * d;
                        }
                        let draw_mu = squash_backward(&raw_mu, &dmu, k);
                        let mut draw = Vec::with_capacity(2 * dz.len());
                        for (m, l) in draw_mu.chunks_exact(k).zip(dlv.chunks_exact(k)) {
                            draw.extend_from_slice(m);
                            draw.extend_from_slice(l);
                        }
                        draw
                    }
                    None => dz,
                };
                let heads_mod = self.heads.as_mut().expect("heads");
                let dh = heads_mod.backward(&h, heads, &draw, batch);
                self.context
                    .as_mut()
                    .expect("context")
                    .backward(context, &dh, batch)
            }
        };
        self.stem.backward(&self.arch, cache.stem, &dcaps);
        Ok(loss)
    }

    pub fn block_parameters(&self) -> Vec<(&'static str, usize)> {
        let mut v = vec![("stem", self.stem.num_parameters())];
        if let Some(c) = &self.context {
            v.push(("context", c.num_parameters()));
        }
        if let Some(h) = &self.heads {
            v.push(("class_heads", h.num_parameters()));
        }
        if let Some(l) = &self.linear_classifier {
            v.push(("classifier", l.num_parameters()));
        }
        if let Some(d) = &self.decoder {
            v.push(("decoder", d.num_parameters()));
        }
        v
    }
}

impl<T: Scalar> Parameters<T> for IbCapsNet<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.stem.visit(f);
        self.context.visit(f);
        self.heads.visit(f);
        self.linear_classifier.visit(f);
        self.decoder.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stem.visit_mut(f);
        self.context.visit_mut(f);
        self.heads.visit_mut(f);
        self.linear_classifier.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}
