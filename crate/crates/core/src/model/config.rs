use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::conv_output_side;

/// How primary capsules are produced from pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StemKind {
    /// Conv(kernel, stride 1) + ReLU, then Conv(kernel, `stride`) with
    /// `capsule_types * d` channels reshaped into capsules.
    Conv {
        channels: usize,
        kernel: usize,
        capsule_types: usize,
        stride: usize,
    },
    /// A single linear projection of the flattened image into `N * d` values.
    /// Used for tiny models in gradient checks.
    Dense,
}

/// Architecture hyperparameters shared by both model families.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub image_side: usize,
    pub num_classes: usize,
    pub num_primary_capsules: usize,
    pub primary_dim: usize,
    pub context_dim: usize,
    pub latent_dim: usize,
    pub context_hidden: usize,
    /// 0 means each class head is a single linear layer.
    pub class_head_hidden: usize,
    pub routing_iters: usize,
    pub decoder_hidden: (usize, usize),
    pub stem: StemKind,
}

impl ArchConfig {
    /// 28x28 grayscale inputs (MNIST, Fashion-MNIST).
    pub fn mnist() -> Self {
        ArchConfig {
            in_channels: 1,
            image_side: 28,
            num_classes: 10,
            num_primary_capsules: 1152,
            primary_dim: 8,
            context_dim: 256,
            latent_dim: 16,
            context_hidden: 512,
            class_head_hidden: 128,
            routing_iters: 3,
            decoder_hidden: (512, 1024),
            stem: StemKind::Conv {
                channels: 256,
                kernel: 9,
                capsule_types: 32,
                stride: 2,
            },
        }
    }

    /// 32x32 RGB inputs (CIFAR-10, SVHN).
    pub fn rgb32() -> Self {
        ArchConfig {
            in_channels: 3,
            image_side: 32,
            num_primary_capsules: 2048,
            ..ArchConfig::mnist()
        }
    }

    /// Picks the reference configuration matching an image geometry.
    pub fn for_geometry(in_channels: usize, image_side: usize, num_classes: usize) -> Result<Self> {
        let mut cfg = match (in_channels, image_side) {
            (1, 28) => ArchConfig::mnist(),
            (3, 32) => ArchConfig::rgb32(),
            _ => {
                let mut c = ArchConfig::mnist();
                c.in_channels = in_channels;
                c.image_side = image_side;
                c.num_primary_capsules = c.derived_primary_capsules().ok_or_else(|| {
                    Error::Config(format!(
                        "image side {image_side} too small for the conv stem"
                    ))
                })?;
                c
            }
        };
        cfg.num_classes = num_classes;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Dense-stem model small enough for exhaustive finite differences.
    pub fn tiny() -> Self {
        ArchConfig {
            in_channels: 1,
            image_side: 4,
            num_classes: 2,
            num_primary_capsules: 4,
            primary_dim: 2,
            context_dim: 3,
            latent_dim: 2,
            context_hidden: 3,
            class_head_hidden: 3,
            routing_iters: 3,
            decoder_hidden: (3, 4),
            stem: StemKind::Dense,
        }
    }

    pub fn pixels(&self) -> usize {
        self.in_channels * self.image_side * self.image_side
    }

    /// Capsule count implied by the stem geometry, if the stem is convolutional.
    pub fn derived_primary_capsules(&self) -> Option<usize> {
        match self.stem {
            StemKind::Conv {
                kernel,
                capsule_types,
                stride,
                ..
            } => {
                let first = conv_output_side(self.image_side, kernel, 1)?;
                let second = conv_output_side(first, kernel, stride)?;
                Some(capsule_types * second * second)
            }
            StemKind::Dense => Some(self.num_primary_capsules),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        check(self.num_classes >= 2, "num_classes must be >= 2")?;
        check(
            self.num_primary_capsules >= 1,
            "num_primary_capsules must be >= 1",
        )?;
        check(self.primary_dim >= 1, "primary_dim must be >= 1")?;
        check(self.context_dim >= 1, "context_dim must be >= 1")?;
        check(self.latent_dim >= 1, "latent_dim must be >= 1")?;
        check(self.routing_iters >= 1, "routing_iters must be >= 1")?;
        check(
            self.in_channels >= 1 && self.image_side >= 1,
            "image geometry must be non-empty",
        )?;
        check(self.context_hidden >= 1, "context_hidden must be >= 1")?;
        check(
            self.decoder_hidden.0 >= 1 && self.decoder_hidden.1 >= 1,
            "decoder widths must be >= 1",
        )?;
        match self.derived_primary_capsules() {
            Some(n) if n == self.num_primary_capsules => Ok(()),
            Some(n) => Err(Error::Shape(format!(
                "stem geometry yields {n} primary capsules but config declares {}",
                self.num_primary_capsules
            ))),
            None => Err(Error::Shape(format!(
                "image side {} too small for the conv stem",
                self.image_side
            ))),
        }
    }

    /// Flat `key = value` lines; parsed back by [`ArchConfig::from_kv`].
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("in_channels", self.in_channels.to_string()),
            ("image_side", self.image_side.to_string()),
            ("num_classes", self.num_classes.to_string()),
            (
                "num_primary_capsules",
                self.num_primary_capsules.to_string(),
            ),
            ("primary_dim", self.primary_dim.to_string()),
            ("context_dim", self.context_dim.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("context_hidden", self.context_hidden.to_string()),
            ("class_head_hidden", self.class_head_hidden.to_string()),
            ("routing_iters", self.routing_iters.to_string()),
            ("decoder_hidden_1", self.decoder_hidden.0.to_string()),
            ("decoder_hidden_2", self.decoder_hidden.1.to_string()),
        ];
        match self.stem {
            StemKind::Conv {
                channels,
                kernel,
                capsule_types,
                stride,
            } => {
                kv.push(("stem", "conv".into()));
                kv.push(("stem_channels", channels.to_string()));
                kv.push(("stem_kernel", kernel.to_string()));
                kv.push(("stem_capsule_types", capsule_types.to_string()));
                kv.push(("stem_stride", stride.to_string()));
            }
            StemKind::Dense => kv.push(("stem", "dense".into())),
        }
        kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn from_kv(kv: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            kv.iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Config(format!("missing key {key}")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Config(format!("key {key} is not a count")))
        };
        let stem = match get("stem")? {
            "conv" => StemKind::Conv {
                channels: num("stem_channels")?,
                kernel: num("stem_kernel")?,
                capsule_types: num("stem_capsule_types")?,
                stride: num("stem_stride")?,
            },
            "dense" => StemKind::Dense,
            other => return Err(Error::Config(format!("unknown stem {other}"))),
        };
        let cfg = ArchConfig {
            in_channels: num("in_channels")?,
            image_side: num("image_side")?,
            num_classes: num("num_classes")?,
            num_primary_capsules: num("num_primary_capsules")?,
            primary_dim: num("primary_dim")?,
            context_dim: num("context_dim")?,
            latent_dim: num("latent_dim")?,
            context_hidden: num("context_hidden")?,
            class_head_hidden: num("class_head_hidden")?,
            routing_iters: num("routing_iters")?,
            decoder_hidden: (num("decoder_hidden_1")?, num("decoder_hidden_2")?),
            stem,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Which components of the variational aggregation are active.
///
/// The flags are cumulative: each one requires the previous.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelVariantFlags {
    pub multi_classifier: bool,
    pub squash_and_kl: bool,
    pub reconstruction: bool,
}

impl ModelVariantFlags {
    pub const BASELINE: Self = ModelVariantFlags {
        multi_classifier: false,
        squash_and_kl: false,
        reconstruction: false,
    };
    pub const MULTI_CLASSIFIER: Self = ModelVariantFlags {
        multi_classifier: true,
        squash_and_kl: false,
        reconstruction: false,
    };
    pub const SQUASH_KL: Self = ModelVariantFlags {
        multi_classifier: true,
        squash_and_kl: true,
        reconstruction: false,
    };
    pub const FULL: Self = ModelVariantFlags {
        multi_classifier: true,
        squash_and_kl: true,
        reconstruction: true,
    };

    /// Ablation rows in table order.
    pub const ABLATION: [(&'static str, Self); 4] = [
        ("Baseline", Self::BASELINE),
        ("Multi-Classifier", Self::MULTI_CLASSIFIER),
        ("+Squash&KL", Self::SQUASH_KL),
        ("+reconstruction", Self::FULL),
    ];

    pub fn validate(&self) -> Result<()> {
        if self.squash_and_kl && !self.multi_classifier {
            return Err(Error::Config(
                "squash_and_kl requires multi_classifier".into(),
            ));
        }
        if self.reconstruction && !self.squash_and_kl {
            return Err(Error::Config(
                "reconstruction requires squash_and_kl".into(),
            ));
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        Self::ABLATION
            .iter()
            .find(|(_, f)| f == self)
            .map(|(n, _)| *n)
            .unwrap_or("invalid")
    }

    /// Identifier used in config files and checkpoints.
    pub fn slug(&self) -> &'static str {
        match (
            self.multi_classifier,
            self.squash_and_kl,
            self.reconstruction,
        ) {
            (false, false, false) => "baseline",
            (true, false, false) => "multi_classifier",
            (true, true, false) => "squash_kl",
            (true, true, true) => "full",
            _ => "invalid",
        }
    }
}

impl Default for ModelVariantFlags {
    fn default() -> Self {
        Self::FULL
    }
}

impl FromStr for ModelVariantFlags {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Self::BASELINE),
            "multi-classifier" | "multi_classifier" | "multi" => Ok(Self::MULTI_CLASSIFIER),
            "+squash&kl" | "squash_kl" | "squash-kl" | "squash_and_kl" => Ok(Self::SQUASH_KL),
            "+reconstruction" | "full" | "reconstruction" => Ok(Self::FULL),
            other => Err(Error::Config(format!("unknown variant {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    CapsNet,
    IbCapsNet,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::CapsNet => "capsnet",
            ModelKind::IbCapsNet => "ibcapsnet",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "capsnet" => Ok(ModelKind::CapsNet),
            "ibcapsnet" => Ok(ModelKind::IbCapsNet),
            other => Err(Error::Config(format!("unknown model {other}"))),
        }
    }
}

/// Margin loss hinge parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginLossConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda_neg: f64,
}

impl Default for MarginLossConfig {
    fn default() -> Self {
        MarginLossConfig {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda_neg: 0.5,
        }
    }
}

impl MarginLossConfig {
    pub fn validate(&self) -> Result<()> {
        if 0.0 < self.m_minus && self.m_minus < self.m_plus && self.m_plus < 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "margins must satisfy 0 < m_minus < m_plus < 1, got {} / {}",
                self.m_minus, self.m_plus
            )))
        }
    }
}

/// Weights of the reconstruction and KL terms in the composite loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub recon_weight: f64,
    pub kl_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            recon_weight: 0.0005,
            kl_weight: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.recon_weight >= 0.0 && self.kl_weight >= 0.0 {
            Ok(())
        } else {
            Err(Error::Config("loss weights must be non-negative".into()))
        }
    }
}
