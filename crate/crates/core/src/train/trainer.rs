//! Training loop, evaluation, robustness sweeps and ablations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::TrainState;
use super::config::TrainConfig;
use super::optim::Adam;
use crate::corruption::{
    random_spec, sample_seed, severity_grid, CorruptionKind, CorruptionSpec, ImageDims,
};
use crate::data::batch::permutation;
use crate::data::{BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, LossBreakdown, Model, ModelKind, ModelVariantFlags};
use crate::report;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// Stream separators so shuffling, latent sampling and augmentation never
// share a seed.
const EPS_STREAM: u64 = 0x6570_735f_7374_7265;
const NOISE_STREAM: u64 = 0x6e6f_6973_655f_7374;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// One-based epoch number.
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_recon: f64,
    pub loss_kl: f64,
    pub test_acc: f64,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub model: String,
    pub dataset: String,
    /// Corruption kind, or `none` for clean data.
    pub kind: String,
    pub severity: f64,
    pub accuracy: f64,
    pub n_correct: usize,
    pub n_total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub peak_acc: f64,
    pub peak_epoch: usize,
    pub final_acc: f64,
}

/// Architecture for a config on a dataset's image geometry.
pub fn arch_for(cfg: &TrainConfig, data: &Dataset) -> Result<ArchConfig> {
    let [ch, h, w] = data.dims();
    if h != w {
        return Err(Error::Input(format!(
            "{}: non-square images {h}x{w}",
            data.name
        )));
    }
    let mut arch = ArchConfig::for_geometry(ch, h, data.num_classes)?;
    arch.routing_iters = cfg.routing_iters;
    Ok(arch)
}

pub struct Trainer<T> {
    pub state: TrainState<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, arch: &ArchConfig) -> Result<Self> {
        config.validate()?;
        let variant = match config.model {
            ModelKind::CapsNet => ModelVariantFlags::FULL,
            ModelKind::IbCapsNet => config.variant,
        };
        let model = Model::new(
            config.model,
            arch,
            variant,
            &mut ChaCha8Rng::seed_from_u64(config.seed),
        )?;
        let adam = Adam::new(&model, config.lr);
        Ok(Trainer {
            state: TrainState {
                config,
                model,
                adam,
                epoch: 0,
                step: 0,
                best_acc: None,
                best_epoch: None,
            },
        })
    }

    pub fn resume(state: TrainState<T>) -> Self {
        Trainer { state }
    }

    pub fn model(&self) -> &Model<T> {
        &self.state.model
    }

    fn augment(&self, batch: &mut Tensor<T>, indices: &[usize], dims: ImageDims) -> Result<()> {
        let Some(kind) = self.state.config.train_noise else {
            return Ok(());
        };
        let epoch = self.state.epoch as u64;
        for (r, &i) in indices.iter().enumerate() {
            let seed = sample_seed(
                self.state.config.seed ^ NOISE_STREAM,
                (epoch << 32) | i as u64,
            );
            let spec = random_spec(kind, &mut ChaCha8Rng::seed_from_u64(seed));
            let out = spec.apply(batch.row(r), dims)?;
            batch.row_mut(r).copy_from_slice(&out);
        }
        Ok(())
    }

    /// One pass over `train`; returns sample-weighted mean losses.
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<LossBreakdown> {
        let cfg = self.state.config.clone();
        let opts = cfg.options();
        let [channels, height, width] = train.dims();
        let dims = ImageDims {
            channels,
            height,
            width,
        };
        self.state.adam.lr = Adam::<T>::scheduled_lr(cfg.lr, cfg.lr_decay, self.state.epoch);
        let order = permutation(train.len(), sample_seed(cfg.seed, self.state.epoch as u64));
        let mut acc = LossBreakdown::default();
        let mut seen = 0usize;
        for (b, indices) in order.chunks(cfg.batch_size).enumerate() {
            let mut images = train.images_tensor::<T>(indices);
            self.augment(&mut images, indices, dims)?;
            let labels = train.one_hot::<T>(indices);
            let mut rng =
                ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed ^ EPS_STREAM, self.state.step));
            let loss = self
                .state
                .model
                .train_step(&images, &labels, &opts, &mut rng)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged {
                    epoch: self.state.epoch + 1,
                    batch: b,
                    what: format!(
                        "loss is {} (cls {}, recon {}, kl {})",
                        loss.total, loss.cls, loss.recon, loss.kl
                    ),
                });
            }
            self.state.adam.step(&mut self.state.model)?;
            self.state.step += 1;
            let n = indices.len() as f64;
            acc.total += loss.total * n;
            acc.cls += loss.cls * n;
            acc.recon += loss.recon * n;
            acc.kl += loss.kl * n;
            seen += indices.len();
            log::debug!(
                "epoch {} batch {b}: loss {:.5}",
                self.state.epoch + 1,
                loss.total
            );
        }
        self.state.epoch += 1;
        let n = seen.max(1) as f64;
        Ok(LossBreakdown {
            total: acc.total / n,
            cls: acc.cls / n,
            recon: acc.recon / n,
            kl: acc.kl / n,
        })
    }

    /// Trains until `config.epochs` epochs are complete, evaluating on `test`
    /// after each one. With `out_dir`, appends `metrics.csv` and writes
    /// `last.ckpt`, `best.ckpt` and `config.txt`.
    pub fn run(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        out_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<TrainOutcome> {
        let cfg = self.state.config.clone();
        let train = match cfg.train_subset {
            Some(n) => train.head(n),
            None => train.clone(),
        };
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let cfg_path = dir.join("config.txt");
            std::fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
        }
        let mut history = Vec::new();
        while self.state.epoch < cfg.epochs {
            let start = Instant::now();
            let loss = self.train_epoch(&train)?;
            let train_seconds = start.elapsed().as_secs_f64();
            let eval = evaluate(
                &self.state.model,
                test,
                None,
                cfg.batch_size,
                cfg.test_subset,
            )?;
            let m = EpochMetrics {
                epoch: self.state.epoch,
                loss_total: loss.total,
                loss_cls: loss.cls,
                loss_recon: loss.recon,
                loss_kl: loss.kl,
                test_acc: eval.accuracy,
                train_seconds,
            };
            let improved = self.state.best_acc.is_none_or(|b| eval.accuracy > b);
            if improved {
                self.state.best_acc = Some(eval.accuracy);
                self.state.best_epoch = Some(m.epoch);
            }
            if let Some(dir) = out_dir {
                report::append_metrics_csv(&dir.join("metrics.csv"), &m)?;
                self.state.save(&dir.join("last.ckpt"))?;
                if improved {
                    self.state.save(&dir.join("best.ckpt"))?;
                }
            }
            on_epoch(&m);
            history.push(m);
        }
        let final_acc = match history.last() {
            Some(m) => m.test_acc,
            None => {
                evaluate(
                    &self.state.model,
                    test,
                    None,
                    cfg.batch_size,
                    cfg.test_subset,
                )?
                .accuracy
            }
        };
        Ok(TrainOutcome {
            history,
            peak_acc: self.state.best_acc.unwrap_or(final_acc),
            peak_epoch: self.state.best_epoch.unwrap_or(self.state.epoch),
            final_acc,
        })
    }
}

/// Accuracy of `model` on the first `limit` samples of `data`, optionally
/// corrupted. Evaluation uses posterior means, so it is deterministic.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    spec: Option<&CorruptionSpec>,
    batch_size: usize,
    limit: Option<usize>,
) -> Result<EvalRecord> {
    let arch = model.arch();
    let [ch, h, w] = data.dims();
    if ch != arch.in_channels
        || h != arch.image_side
        || w != arch.image_side
        || data.num_classes != arch.num_classes
    {
        return Err(Error::Config(format!(
            "{} ({ch}x{h}x{w}, {} classes) does not fit a model for {}x{}x{}, {} classes",
            data.name,
            data.num_classes,
            arch.in_channels,
            arch.image_side,
            arch.image_side,
            arch.num_classes
        )));
    }
    let view;
    let data = match limit {
        Some(n) if n < data.len() => {
            view = data.head(n);
            &view
        }
        _ => data,
    };
    let mut it = BatchIterator::sequential(data, batch_size.max(1));
    let mut correct = 0;
    let mut first = 0;
    while let Some(indices) = it.next_indices() {
        let mut images = data.images_tensor::<T>(&indices);
        if let Some(s) = spec {
            images = s.apply_batch(&images, first)?;
        }
        first += indices.len();
        let preds = model.infer(&images)?.predictions();
        correct += preds
            .iter()
            .zip(&indices)
            .filter(|(&p, &i)| p == data.labels[i] as usize)
            .count();
    }
    let n = data.len();
    Ok(EvalRecord {
        model: model.label(),
        dataset: dataset_base_name(&data.name),
        kind: spec.map_or("none".into(), |s| s.kind.to_string()),
        severity: spec.map_or(0.0, |s| s.severity),
        accuracy: correct as f64 / n as f64,
        n_correct: correct,
        n_total: n,
    })
}

/// `mnist-test` → `mnist`.
fn dataset_base_name(name: &str) -> String {
    name.strip_suffix("-test")
        .or_else(|| name.strip_suffix("-train"))
        .unwrap_or(name)
        .to_string()
}

/// Evaluates each model on every severity of every kind. Severity 0 is the
/// identity, so the clean pass is computed once per model and reused.
pub fn robustness_sweep<T: Scalar>(
    models: &[(&str, &Model<T>)],
    data: &Dataset,
    kinds: &[CorruptionKind],
    seed: u64,
    batch_size: usize,
    limit: Option<usize>,
    mut progress: impl FnMut(&EvalRecord),
) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for &(label, model) in models {
        let clean = evaluate(model, data, None, batch_size, limit)?;
        for &kind in kinds {
            for severity in severity_grid(kind) {
                let mut rec = if severity == 0.0 {
                    clean.clone()
                } else {
                    evaluate(
                        model,
                        data,
                        Some(&CorruptionSpec::new(kind, severity, seed)?),
                        batch_size,
                        limit,
                    )?
                };
                rec.model = label.to_string();
                rec.kind = kind.to_string();
                rec.severity = severity;
                progress(&rec);
                out.push(rec);
            }
        }
    }
    Ok(out)
}

/// Mean of `candidate - reference` accuracy over the severities of one
/// (dataset, kind) accepted by `keep`.
pub fn mean_gain(
    records: &[EvalRecord],
    dataset: &str,
    kind: &str,
    candidate: &str,
    reference: &str,
    keep: impl Fn(f64) -> bool,
) -> Option<f64> {
    let find = |model: &str, sev: f64| {
        records.iter().find(|r| {
            r.model == model && r.dataset == dataset && r.kind == kind && r.severity == sev
        })
    };
    let gains: Vec<f64> = records
        .iter()
        .filter(|r| {
            r.model == candidate && r.dataset == dataset && r.kind == kind && keep(r.severity)
        })
        .filter_map(|r| find(reference, r.severity).map(|b| r.accuracy - b.accuracy))
        .collect();
    (!gains.is_empty()).then(|| gains.iter().sum::<f64>() / gains.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainSummary {
    pub dataset: String,
    pub kind: String,
    pub candidate: String,
    pub reference: String,
    /// Mean accuracy difference over nonzero severities, as a fraction.
    pub mean_gain: f64,
}

/// Per (dataset, kind) average gain over the nonzero severities of the grid.
pub fn gain_summary(records: &[EvalRecord], candidate: &str, reference: &str) -> Vec<GainSummary> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in records {
        let k = (r.dataset.clone(), r.kind.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .filter_map(|(dataset, kind)| {
            mean_gain(records, &dataset, &kind, candidate, reference, |s| s > 0.0).map(|g| {
                GainSummary {
                    dataset,
                    kind,
                    candidate: candidate.into(),
                    reference: reference.into(),
                    mean_gain: g,
                }
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub clean_acc: f64,
    pub noisy_acc: f64,
}

/// Trains the four cumulative variants and scores them clean and under
/// clamped additive noise of the given severity.
pub fn ablation_run<T: Scalar>(
    base: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    severity: f64,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&str, &EpochMetrics),
) -> Result<Vec<AblationRow>> {
    let spec = CorruptionSpec::new(CorruptionKind::ClampedAdditive, severity, base.seed)?;
    let mut rows = Vec::new();
    for (name, flags) in ModelVariantFlags::ABLATION {
        let cfg = TrainConfig {
            model: ModelKind::IbCapsNet,
            variant: flags,
            ..base.clone()
        };
        let arch = arch_for(&cfg, train)?;
        let dir: Option<PathBuf> = out_dir.map(|d| d.join(flags.slug()));
        let mut trainer = Trainer::<T>::new(cfg.clone(), &arch)?;
        trainer.run(train, test, dir.as_deref(), |m| progress(name, m))?;
        let model = trainer.model();
        let clean = evaluate(model, test, None, cfg.batch_size, cfg.test_subset)?;
        let noisy = evaluate(model, test, Some(&spec), cfg.batch_size, cfg.test_subset)?;
        rows.push(AblationRow {
            variant: name.into(),
            clean_acc: clean.accuracy,
            noisy_acc: noisy.accuracy,
        });
    }
    Ok(rows)
}

/// Mean over samples of the per-pixel RMS distance between the eval-mode
/// reconstruction of a clean image and of its corrupted copy.
pub fn reconstruction_drift<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    indices: &[usize],
    spec: &CorruptionSpec,
) -> Result<f64> {
    let clean = data.images_tensor::<T>(indices);
    let noisy = spec.apply_batch(&clean, 0)?;
    let a = model.infer(&clean)?.recon;
    let b = model.infer(&noisy)?.recon;
    let (Some(a), Some(b)) = (a, b) else {
        return Err(Error::Input(format!("{} has no decoder", model.label())));
    };
    let per = a.row_len();
    let total: f64 = a
        .data()
        .chunks_exact(per)
        .zip(b.data().chunks_exact(per))
        .map(|(x, y)| {
            let ss: f64 = x
                .iter()
                .zip(y)
                .map(|(&p, &q)| (p.as_f64() - q.as_f64()).powi(2))
                .sum();
            (ss / per as f64).sqrt()
        })
        .sum();
    Ok(total / indices.len().max(1) as f64)
}
