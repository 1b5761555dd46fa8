//! Model math for the routing baseline and the variational capsule network.

pub mod capsnet;
pub mod config;
pub mod decoder;
pub mod ibcapsnet;
pub mod loss;
pub mod routing;
pub mod stem;
pub mod types;
pub mod variational;

use rand::Rng;

pub use capsnet::CapsNet;
pub use config::{
    ArchConfig, LossWeights, MarginLossConfig, ModelKind, ModelVariantFlags, StemKind,
};
pub use decoder::{reconstruction_forward, select_capsule, Decoder};
pub use ibcapsnet::IbCapsNet;
pub use loss::{composite_loss, margin_loss, LossBreakdown};
pub use routing::dynamic_routing;
pub use types::{
    Activities, ContextVector, GaussianPosterior, LatentCapsules, Mode, PrimaryCapsules,
    RoutingState, SampleMode,
};
pub use variational::{
    class_vae_encode, global_context_encode, kl_to_standard_normal, reparameterize,
};

use crate::error::Result;
use crate::nn::{Param, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Loss configuration for a training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub weights: LossWeights,
    pub margin: MarginLossConfig,
    pub mask_with_truth: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            weights: LossWeights::default(),
            margin: MarginLossConfig::default(),
            mask_with_truth: true,
        }
    }
}

/// Everything a forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub activities: Activities<T>,
    /// Class capsules `[batch, C, k]` (`[batch, C, 1]` for the linear baseline).
    pub latent: LatentCapsules<T>,
    pub recon: Option<Tensor<T>>,
    pub posterior: Option<GaussianPosterior<T>>,
    /// Class index whose capsule fed the decoder.
    pub selected: Vec<usize>,
}

impl<T: Scalar> ForwardOutput<T> {
    pub fn predictions(&self) -> Vec<usize> {
        self.activities.argmax()
    }
}

/// Either model family behind one interface.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Model<T> {
    CapsNet(CapsNet<T>),
    IbCapsNet(IbCapsNet<T>),
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng + ?Sized>(
        kind: ModelKind,
        arch: &ArchConfig,
        variant: ModelVariantFlags,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match kind {
            ModelKind::CapsNet => Model::CapsNet(CapsNet::new(arch, rng)?),
            ModelKind::IbCapsNet => Model::IbCapsNet(IbCapsNet::new(arch, variant, rng)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::CapsNet(_) => ModelKind::CapsNet,
            Model::IbCapsNet(_) => ModelKind::IbCapsNet,
        }
    }

    pub fn arch(&self) -> &ArchConfig {
        match self {
            Model::CapsNet(m) => &m.arch,
            Model::IbCapsNet(m) => &m.arch,
        }
    }

    /// Variant flags; the routing baseline reports the full set since it
    /// always reconstructs.
    pub fn variant(&self) -> ModelVariantFlags {
        match self {
            Model::CapsNet(_) => ModelVariantFlags::FULL,
            Model::IbCapsNet(m) => m.variant,
        }
    }

    /// Short label for reports, e.g. `capsnet` or `ibcapsnet[+Squash&KL]`.
    pub fn label(&self) -> String {
        match self {
            Model::CapsNet(_) => "capsnet".into(),
            Model::IbCapsNet(m) if m.variant == ModelVariantFlags::FULL => "ibcapsnet".into(),
            Model::IbCapsNet(m) => format!("ibcapsnet[{}]", m.variant.name()),
        }
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        images: &Tensor<T>,
        labels: Option<&[usize]>,
        mode: Mode,
        mask_with_truth: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput<T>> {
        match self {
            Model::CapsNet(m) => m.forward(images, labels, mode, mask_with_truth),
            Model::IbCapsNet(m) => m.forward(images, labels, mode, mask_with_truth, rng),
        }
    }

    /// Deterministic evaluation forward pass.
    pub fn infer(&self, images: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        self.forward(images, None, Mode::Eval, false, &mut unused)
    }

    pub fn loss<R: Rng + ?Sized>(
        &self,
        images: &Tensor<T>,
        labels: &Tensor<T>,
        opts: &TrainOptions,
        rng: &mut R,
    ) -> Result<LossBreakdown> {
        match self {
            Model::CapsNet(m) => m.loss(images, labels, opts),
            Model::IbCapsNet(m) => m.loss(images, labels, opts, rng),
        }
    }

    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        images: &Tensor<T>,
        labels: &Tensor<T>,
        opts: &TrainOptions,
        rng: &mut R,
    ) -> Result<LossBreakdown> {
        match self {
            Model::CapsNet(m) => m.train_step(images, labels, opts),
            Model::IbCapsNet(m) => m.train_step(images, labels, opts, rng),
        }
    }

    pub fn block_parameters(&self) -> Vec<(&'static str, usize)> {
        match self {
            Model::CapsNet(m) => m.block_parameters(),
            Model::IbCapsNet(m) => m.block_parameters(),
        }
    }
}

impl<T: Scalar> Parameters<T> for Model<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        match self {
            Model::CapsNet(m) => m.visit(f),
            Model::IbCapsNet(m) => m.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Model::CapsNet(m) => m.visit_mut(f),
            Model::IbCapsNet(m) => m.visit_mut(f),
        }
    }
}
