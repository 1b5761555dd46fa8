//! Wall-clock training and inference benchmarks.
//!
//! Batches are materialized before the clock starts, so timed regions
//! contain only model compute.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, TrainOptions};
use crate::nn::Parameters;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::Adam;

pub const BENCH_HEADER: [&str; 10] = [
    "model",
    "phase",
    "batch",
    "median_s",
    "stdev_s",
    "samples_per_s",
    "host",
    "min_s",
    "repeats",
    "raw_s",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    TrainEpoch,
    Inference,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::TrainEpoch => "train_epoch",
            Phase::Inference => "inference",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub model: String,
    pub phase: Phase,
    pub batch_size: usize,
    /// Samples processed per repeat.
    pub samples: usize,
    /// Raw wall-clock seconds of each repeat.
    pub timings: Vec<f64>,
    pub median_s: f64,
    pub min_s: f64,
    pub stdev_s: f64,
}

impl BenchResult {
    fn from_timings(
        model: String,
        phase: Phase,
        batch_size: usize,
        samples: usize,
        timings: Vec<f64>,
    ) -> Self {
        let mut sorted = timings.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median_s = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        let mean = timings.iter().sum::<f64>() / n as f64;
        let var = timings.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
        BenchResult {
            model,
            phase,
            batch_size,
            samples,
            min_s: sorted[0],
            median_s,
            stdev_s: var.sqrt(),
            timings,
        }
    }

    pub fn repeats(&self) -> usize {
        self.timings.len()
    }

    pub fn samples_per_s(&self) -> f64 {
        self.samples as f64 / self.median_s
    }

    pub fn batches_per_s(&self) -> f64 {
        self.samples_per_s() / self.batch_size as f64
    }
}

/// Core count, build profile and target.
pub fn host_fingerprint() -> String {
    let cores = std::thread::available_parallelism().map_or(0, |n| n.get());
    let profile = if cfg!(debug_assertions) {
        "debug"
    } else {
        "release"
    };
    format!(
        "cores={cores};profile={profile};target={}-{}",
        std::env::consts::ARCH,
        std::env::consts::OS
    )
}

fn batches<T: Scalar>(
    data: &Dataset,
    batch_size: usize,
    samples: usize,
) -> Vec<(Tensor<T>, Tensor<T>)> {
    let n = samples.min(data.len());
    let idx: Vec<usize> = (0..n).collect();
    idx.chunks(batch_size)
        .map(|c| (data.images_tensor(c), data.one_hot(c)))
        .collect()
}

fn check_repeats(repeats: usize) -> Result<()> {
    if repeats < 3 {
        return Err(Error::Config(format!(
            "benchmarks need at least 3 repeats, got {repeats}"
        )));
    }
    Ok(())
}

/// Times optimizer epochs over the first `samples` training samples. One
/// untimed warmup batch precedes the repeats. The model is trained in place.
pub fn bench_train_epoch<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    batch_size: usize,
    samples: usize,
    repeats: usize,
    opts: &TrainOptions,
) -> Result<BenchResult> {
    check_repeats(repeats)?;
    let batches = batches::<T>(data, batch_size, samples);
    let mut adam = Adam::new(&*model, 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    if let Some((x, y)) = batches.first() {
        model.train_step(x, y, opts, &mut rng)?;
        adam.step(model)?;
    }
    let mut timings = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        for (x, y) in &batches {
            model.train_step(x, y, opts, &mut rng)?;
            adam.step(model)?;
        }
        timings.push(start.elapsed().as_secs_f64());
    }
    let n = batches.iter().map(|(x, _)| x.rows()).sum();
    Ok(BenchResult::from_timings(
        model.label(),
        Phase::TrainEpoch,
        batch_size,
        n,
        timings,
    ))
}

/// Times eval-mode forward passes over the first `samples` samples after
/// `warmup` untimed batches.
pub fn bench_inference<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    batch_size: usize,
    samples: usize,
    repeats: usize,
    warmup: usize,
) -> Result<BenchResult> {
    check_repeats(repeats)?;
    let batches = batches::<T>(data, batch_size, samples);
    for (x, _) in batches.iter().cycle().take(warmup.min(batches.len())) {
        model.infer(x)?;
    }
    let mut timings = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        for (x, _) in &batches {
            std::hint::black_box(model.infer(x)?);
        }
        timings.push(start.elapsed().as_secs_f64());
    }
    let n = batches.iter().map(|(x, _)| x.rows()).sum();
    Ok(BenchResult::from_timings(
        model.label(),
        Phase::Inference,
        batch_size,
        n,
        timings,
    ))
}

/// Trainable parameters per named block, then the total.
pub fn bench_params<T: Scalar>(model: &Model<T>) -> (Vec<(&'static str, usize)>, usize) {
    (model.block_parameters(), model.num_parameters())
}

pub fn bench_csv_row(r: &BenchResult, host: &str) -> Vec<String> {
    vec![
        r.model.clone(),
        r.phase.as_str().into(),
        r.batch_size.to_string(),
        format!("{:.6}", r.median_s),
        format!("{:.6}", r.stdev_s),
        format!("{:.3}", r.samples_per_s()),
        host.into(),
        format!("{:.6}", r.min_s),
        r.repeats().to_string(),
        r.timings
            .iter()
            .map(|t| format!("{t:.6}"))
            .collect::<Vec<_>>()
            .join(";"),
    ]
}

/// Appends results to a CSV, writing the header if the file is new.
pub fn append_bench_csv(path: &Path, results: &[BenchResult]) -> Result<()> {
    let fresh = std::fs::metadata(path)
        .map(|m| m.len() == 0)
        .unwrap_or(true);
    let mut w = csv::Writer::from_writer(Vec::new());
    if fresh {
        w.write_record(BENCH_HEADER)?;
    }
    let host = host_fingerprint();
    for r in results {
        w.write_record(bench_csv_row(r, &host))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Input(format!("csv flush: {e}")))?;
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
