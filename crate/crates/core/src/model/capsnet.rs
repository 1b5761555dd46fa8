//! Dynamic-routing CapsNet baseline.

use rand::Rng;

use super::config::ArchConfig;
use super::decoder::{selection_indices, Decoder, DecoderCache};
use super::loss::{
    label_indices, margin_loss_grad, recon_loss_grad, validate_one_hot, LossBreakdown,
};
use super::routing::{RoutingLayer, RoutingTrace};
use super::stem::{PrimaryStem, StemCache};
use super::types::{Activities, LatentCapsules, Mode};
use super::{ForwardOutput, TrainOptions};
use crate::error::Result;
use crate::nn::{l2_norm, Param, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Std of the routing transformation init.
pub const ROUTING_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct CapsNet<T> {
    pub arch: ArchConfig,
    pub stem: PrimaryStem<T>,
    pub routing: RoutingLayer<T>,
    pub decoder: Decoder<T>,
}

struct Cache<T> {
    stem: StemCache<T>,
    caps: Vec<T>,
    uhat: Vec<T>,
    trace: RoutingTrace<T>,
    selected: Vec<usize>,
    decoder: DecoderCache<T>,
}

impl<T: Scalar> CapsNet<T> {
    pub fn new<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let stem = PrimaryStem::new(arch, rng)?;
        let routing = RoutingLayer::new(
            arch.num_primary_capsules,
            arch.num_classes,
            arch.primary_dim,
            arch.latent_dim,
            arch.routing_iters,
            ROUTING_INIT_STD,
            rng,
        );
        // The decoder sees all class capsules with non-selected ones masked to zero.
        let decoder = Decoder::new(
            arch.num_classes * arch.latent_dim,
            arch.decoder_hidden,
            arch.pixels(),
            rng,
        );
        Ok(CapsNet {
            arch: arch.clone(),
            stem,
            routing,
            decoder,
        })
    }

    fn run(
        &self,
        images: &Tensor<T>,
        labels: Option<&[usize]>,
        mode: Mode,
        mask_with_truth: bool,
    ) -> Result<(ForwardOutput<T>, Cache<T>)> {
        let a = &self.arch;
        let (c, k) = (a.num_classes, a.latent_dim);
        let (caps, stem_cache) = self.stem.forward(a, images)?;
        let batch = caps.values.rows();
        let caps = caps.values.into_data();
        let uhat = self.routing.predictions(&caps, batch);
        let trace = self.routing.route(&uhat, batch);
        let v = trace.v.last().expect("routing ran").clone();
        let norms: Vec<T> = v.chunks_exact(k).map(l2_norm).collect();
        let activities = Activities {
            values: Tensor::from_vec(&[batch, c], norms)?,
        };
        let selected = selection_indices(&activities, labels, mode, mask_with_truth)?;
        let mut masked = vec![T::zero(); batch * c * k];
        for (b, &s) in selected.iter().enumerate() {
            let r = (b * c + s) * k..(b * c + s + 1) * k;
            masked[r.clone()].copy_from_slice(&v[r]);
        }
        let (recon, dec_cache) = self.decoder.forward(&masked, batch);
        let out = ForwardOutput {
            activities,
            latent: LatentCapsules {
                values: Tensor::from_vec(&[batch, c, k], v)?,
            },
            recon: Some(Tensor::from_vec(&[batch, a.pixels()], recon)?),
            posterior: None,
            selected: selected.clone(),
        };
        Ok((
            out,
            Cache {
                stem: stem_cache,
                caps,
                uhat,
                trace,
                selected,
                decoder: dec_cache,
            },
        ))
    }

    pub fn forward(
        &self,
        images: &Tensor<T>,
        labels: Option<&[usize]>,
        mode: Mode,
        mask_with_truth: bool,
    ) -> Result<ForwardOutput<T>> {
        Ok(self.run(images, labels, mode, mask_with_truth)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn losses(
        &self,
        images: &Tensor<T>,
        labels: &Tensor<T>,
        opts: &TrainOptions,
    ) -> Result<(LossBreakdown, ForwardOutput<T>, Cache<T>, Vec<T>, Vec<T>)> {
        validate_one_hot(labels, self.arch.num_classes)?;
        let idx = label_indices(labels);
        let (out, cache) = self.run(images, Some(&idx), Mode::Train, opts.mask_with_truth)?;
        let batch = idx.len();
        let (cls, da) = margin_loss_grad(
            out.activities.values.data(),
            labels.data(),
            self.arch.num_classes,
            &opts.margin,
        );
        let recon = out.recon.as_ref().expect("capsnet always reconstructs");
        let (rec, drec) = recon_loss_grad(images.data(), recon.data(), batch);
        let loss = LossBreakdown::combine(cls, rec, 0.0, &opts.weights);
        Ok((loss, out, cache, da, drec))
    }

    /// Train-mode loss without touching gradients.
    pub fn loss(
        &self,
        images: &Tensor<T>,
        labels: &Tensor<T>,
        opts: &TrainOptions,
    ) -> Result<LossBreakdown> {
        Ok(self.losses(images, labels, opts)?.0)
    }

    /// Forward pass, loss, and accumulation of parameter gradients.
    pub fn train_step(
        &mut self,
        images: &Tensor<T>,
        labels: &Tensor<T>,
        opts: &TrainOptions,
    ) -> Result<LossBreakdown> {
        let (loss, out, cache, da, mut drec) = self.losses(images, labels, opts)?;
        let (c, k) = (self.arch.num_classes, self.arch.latent_dim);
        let batch = out.activities.batch();
        let lam = T::lit(opts.weights.recon_weight);
        drec.iter_mut().for_each(|g| *g *= lam);
        let dmasked = self.decoder.backward(cache.decoder, &drec, batch);
        let v = out.latent.values.data();
        let mut dv = vec![T::zero(); v.len()];
        for (j, (cap, g)) in v.chunks_exact(k).zip(dv.chunks_exact_mut(k)).enumerate() {
            let n = out.activities.values.data()[j];
            if n > T::zero() {
                let s = da[j] / n;
                for (gi, &x) in g.iter_mut().zip(cap) {
                    *gi = s * x;
                }
            }
        }
        for (b, &s) in cache.selected.iter().enumerate() {
            let r = (b * c + s) * k..(b * c + s + 1) * k;
            for (g, &d) in dv[r.clone()].iter_mut().zip(&dmasked[r]) {
                *g += d;
            }
        }
        let duhat = self
            .routing
            .route_backward(&cache.uhat, &cache.trace, &dv, batch);
        drop(cache.trace);
        let dcaps = self
            .routing
            .predictions_backward(&cache.caps, &duhat, batch);
        self.stem.backward(&self.arch, cache.stem, &dcaps);
        Ok(loss)
    }

    /// Trainable scalars per block: stem, routing, decoder.
    pub fn block_parameters(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("stem", self.stem.num_parameters()),
            ("routing", self.routing.num_parameters()),
            ("decoder", self.decoder.num_parameters()),
        ]
    }
}

impl<T: Scalar> Parameters<T> for CapsNet<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.stem.visit(f);
        self.routing.visit(f);
        self.decoder.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stem.visit_mut(f);
        self.routing.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}
