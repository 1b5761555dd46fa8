//! Training configuration and its flat `key = value` file format.

use std::fmt::Write as _;
use std::path::Path;

use crate::corruption::CorruptionKind;
use crate::data::DatasetName;
use crate::error::{Error, Result};
use crate::model::{LossWeights, MarginLossConfig, ModelKind, ModelVariantFlags, TrainOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset: DatasetName,
    pub model: ModelKind,
    pub variant: ModelVariantFlags,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// KL weight.
    pub beta: f64,
    /// Reconstruction weight.
    pub lambda_recon: f64,
    pub seed: u64,
    /// Per-sample random-severity augmentation; clean training when unset.
    pub train_noise: Option<CorruptionKind>,
    pub mask_with_truth: bool,
    pub routing_iters: usize,
    /// Use only the first `n` training samples.
    pub train_subset: Option<usize>,
    /// Evaluate on only the first `n` test samples.
    pub test_subset: Option<usize>,
    pub margin: MarginLossConfig,
}

impl TrainConfig {
    pub fn new(dataset: DatasetName, model: ModelKind) -> Self {
        TrainConfig {
            dataset,
            model,
            variant: ModelVariantFlags::FULL,
            epochs: 10,
            batch_size: 128,
            lr: 1e-3,
            lr_decay: 0.96,
            beta: dataset.default_kl_weight(),
            lambda_recon: 0.0005,
            seed: 0,
            train_noise: None,
            mask_with_truth: true,
            routing_iters: 3,
            train_subset: None,
            test_subset: None,
            margin: MarginLossConfig::default(),
        }
    }

    pub fn options(&self) -> TrainOptions {
        TrainOptions {
            weights: LossWeights {
                recon_weight: self.lambda_recon,
                kl_weight: self.beta,
            },
            margin: self.margin,
            mask_with_truth: self.mask_with_truth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.routing_iters == 0 {
            return Err(Error::Config("routing_iters must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        self.variant.validate()?;
        self.margin.validate()?;
        self.options().weights.validate()
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let opt = |v: Option<usize>| v.map_or("none".to_string(), |n| n.to_string());
        [
            ("dataset", self.dataset.to_string()),
            ("model", self.model.to_string()),
            ("variant", self.variant.slug().to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", format!("{:e}", self.lr)),
            ("lr_decay", self.lr_decay.to_string()),
            ("beta", format!("{:e}", self.beta)),
            ("lambda_recon", format!("{:e}", self.lambda_recon)),
            ("seed", self.seed.to_string()),
            (
                "train_noise",
                self.train_noise
                    .map_or("none".to_string(), |k| k.to_string()),
            ),
            ("mask_with_truth", self.mask_with_truth.to_string()),
            ("routing_iters", self.routing_iters.to_string()),
            ("train_subset", opt(self.train_subset)),
            ("test_subset", opt(self.test_subset)),
            ("margin_pos", self.margin.m_plus.to_string()),
            ("margin_neg", self.margin.m_minus.to_string()),
            ("margin_down_weight", self.margin.lambda_neg.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Builds a config from pairs. `dataset` and `model` are required unless a
    /// base is supplied; `beta` defaults per dataset unless given.
    pub fn from_kv(kv: &[(String, String)], base: Option<&TrainConfig>) -> Result<Self> {
        let find = |key: &str| {
            kv.iter()
                .rev()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
        };
        let dataset = match (find("dataset"), base) {
            (Some(d), _) => d.parse()?,
            (None, Some(b)) => b.dataset,
            (None, None) => return Err(Error::Config("missing key dataset".into())),
        };
        let model = match (find("model"), base) {
            (Some(m), _) => m.parse()?,
            (None, Some(b)) => b.model,
            (None, None) => return Err(Error::Config("missing key model".into())),
        };
        let mut cfg = match base {
            Some(b) => TrainConfig {
                dataset,
                model,
                beta: if b.dataset == dataset {
                    b.beta
                } else {
                    dataset.default_kl_weight()
                },
                ..b.clone()
            },
            None => TrainConfig::new(dataset, model),
        };
        for (k, v) in kv {
            let bad = || Error::Config(format!("bad value {v:?} for {k}"));
            let num = || v.parse::<f64>().map_err(|_| bad());
            let count = || v.parse::<usize>().map_err(|_| bad());
            let opt_count = || -> Result<Option<usize>> {
                if v == "none" {
                    Ok(None)
                } else {
                    count().map(Some)
                }
            };
            match k.as_str() {
                "dataset" | "model" => {}
                "variant" => cfg.variant = v.parse()?,
                "epochs" => cfg.epochs = count()?,
                "batch_size" => cfg.batch_size = count()?,
                "lr" => cfg.lr = num()?,
                "lr_decay" => cfg.lr_decay = num()?,
                "beta" => cfg.beta = num()?,
                "lambda_recon" => cfg.lambda_recon = num()?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
                "train_noise" => {
                    cfg.train_noise = match v.as_str() {
                        "none" => None,
                        other => Some(other.parse()?),
                    }
                }
                "mask_with_truth" => cfg.mask_with_truth = v.parse().map_err(|_| bad())?,
                "routing_iters" => cfg.routing_iters = count()?,
                "train_subset" => cfg.train_subset = opt_count()?,
                "test_subset" => cfg.test_subset = opt_count()?,
                "margin_pos" => cfg.margin.m_plus = num()?,
                "margin_neg" => cfg.margin.m_minus = num()?,
                "margin_down_weight" => cfg.margin.lambda_neg = num()?,
                other => return Err(Error::Config(format!("unknown key {other}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        kv_to_text(&self.to_kv())
    }

    pub fn parse(text: &str, base: Option<&TrainConfig>) -> Result<Self> {
        Self::from_kv(&parse_kv(text, "train config")?, base)
    }

    pub fn load(path: &Path, base: Option<&TrainConfig>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&parse_kv(&text, &path.display().to_string())?, base)
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str, source_name: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::parse(source_name, format!("line {}: expected key = value", n + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::parse(
                source_name,
                format!("line {}: empty key", n + 1),
            ));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn kv_to_text(kv: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in kv {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}
