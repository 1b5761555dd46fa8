use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ibcaps_core::bench::{
    append_bench_csv, bench_inference, bench_params, bench_train_epoch, BenchResult,
};
use ibcaps_core::corruption::{CorruptionKind, CorruptionSpec, ImageDims};
use ibcaps_core::data::cifar::parse_cifar10_binary;
use ibcaps_core::data::container::{read_container, write_container};
use ibcaps_core::data::{self, default_data_dir, parse_idx, Dataset, DatasetName, Split};
use ibcaps_core::model::{ArchConfig, ModelKind, ModelVariantFlags};
use ibcaps_core::report::{self, GridSpec, Raster};
use ibcaps_core::train::{
    ablation_run, arch_for, evaluate, gain_summary, reconstruction_drift, robustness_sweep,
    TrainConfig, TrainState, Trainer,
};
use ibcaps_core::Model;

#[derive(Parser)]
#[command(
    name = "ibcaps",
    version,
    about = "Capsule networks with an information bottleneck"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints and per-epoch metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on clean or corrupted test data.
    Eval(EvalArgs),
    /// Accuracy against severity for every corruption kind.
    Sweep(SweepArgs),
    /// Train the four cumulative variants and score them under noise.
    Ablate(AblateArgs),
    /// Time training epochs and inference throughput.
    Bench(BenchArgs),
    /// Write corrupted copies of dataset samples as an image.
    Corrupt(CorruptArgs),
    /// Render the reconstruction comparison grid.
    Reconstruct(ReconstructArgs),
    /// Validate a dataset file and optionally convert it to an IBDS container.
    ConvertCheck(ConvertArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root; defaults to $IBCAPS_DATA_DIR, then ./data.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl DataArgs {
    fn root(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(default_data_dir)
    }

    fn load(&self, name: DatasetName, split: Split) -> Result<Dataset> {
        let start = Instant::now();
        let ds = data::load(name, &self.root(), split)?;
        info!(
            "loaded {} ({} samples) in {:.2}s",
            ds.name,
            ds.len(),
            start.elapsed().as_secs_f64()
        );
        Ok(ds)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    dataset: Option<DatasetName>,
    #[arg(long)]
    model: Option<ModelKind>,
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// baseline, multi_classifier, squash_kl or full.
    #[arg(long)]
    variant: Option<ModelVariantFlags>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    /// KL weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Reconstruction weight.
    #[arg(long)]
    lambda_recon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    routing_iters: Option<usize>,
    /// Train on the first N samples (10000 when given without a value).
    #[arg(long, num_args = 0..=1, default_missing_value = "10000")]
    subset: Option<usize>,
    /// Evaluate on the first N test samples.
    #[arg(long)]
    test_subset: Option<usize>,
    /// Random-severity corruption augmentation during training.
    #[arg(long)]
    train_noise: Option<CorruptionKind>,
    /// Feed the predicted capsule to the decoder during training.
    #[arg(long)]
    no_mask_with_truth: bool,
    /// Resume from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory for checkpoints and metrics.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the dataset the checkpoint was trained on.
    #[arg(long)]
    dataset: Option<DatasetName>,
    /// `kind:severity:seed`, repeatable; clean accuracy is always reported.
    #[arg(long)]
    corruption: Vec<CorruptionSpec>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Repeatable; the first CapsNet and first IBCapsNet checkpoint form the
    /// gain summary.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    dataset: Option<DatasetName>,
    /// `all` or a comma-separated list of kinds.
    #[arg(long, default_value = "all")]
    kinds: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Output directory for sweep.csv and gains.csv.
    #[arg(long, default_value = "sweep")]
    out: PathBuf,
    /// Also render sweep.png.
    #[arg(long)]
    plot: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "fashion_mnist")]
    dataset: DatasetName,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Clamped additive noise severity for the noisy score.
    #[arg(long, default_value_t = 0.3)]
    severity: f64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "10000")]
    subset: Option<usize>,
    #[arg(long)]
    test_subset: Option<usize>,
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "mnist")]
    dataset: DatasetName,
    /// Random images of the dataset's geometry instead of files on disk.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Samples per timed training epoch.
    #[arg(long, default_value_t = 1280)]
    train_samples: usize,
    /// Samples per timed inference pass.
    #[arg(long, default_value_t = 1280)]
    infer_samples: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Untimed inference batches before timing.
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    /// Routing iterations of the CapsNet baseline.
    #[arg(long, default_value_t = 3)]
    routing_iters: usize,
    /// Also time CapsNet with a single routing iteration.
    #[arg(long)]
    with_r1: bool,
    /// Skip the training-epoch timing.
    #[arg(long)]
    inference_only: bool,
    #[arg(long, default_value = "benchmarks.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct CorruptArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "mnist")]
    dataset: DatasetName,
    /// `kind:severity:seed`, repeatable; one output row per spec.
    #[arg(long, required = true)]
    spec: Vec<CorruptionSpec>,
    /// Test-set sample indices.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    samples: Vec<usize>,
    /// PNG, PGM or PPM path; the first row holds the clean images.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReconstructArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Repeatable, rendered left to right.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    dataset: Option<DatasetName>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    samples: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    clamped: f64,
    #[arg(long, default_value_t = 1.5)]
    blur: f64,
    #[arg(long, default_value_t = 0.3)]
    salt_pepper: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid image; the legend goes to `<out>.legend.txt`.
    #[arg(long, default_value = "reconstruction.png")]
    out: PathBuf,
    /// Also measure reconstruction drift under clamped noise on the first
    /// N test samples and write it to `<out>.drift.csv`.
    #[arg(long)]
    drift_samples: Option<usize>,
}

#[derive(Args)]
struct ConvertArgs {
    /// IDX image file, CIFAR-10 batch, or IBDS container.
    #[arg(long, required = true)]
    input: Vec<PathBuf>,
    /// IDX label file when the input is an IDX image file.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value = "dataset")]
    name: String,
    /// Write the validated data as an IBDS container and verify it reads back.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .downcast_ref::<ibcaps_core::Error>()
                .map_or("error", |e| e.kind());
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{kind}]: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Ablate(a) => ablate(a),
        Command::Bench(a) => bench(a),
        Command::Corrupt(a) => corrupt(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::ConvertCheck(a) => convert_check(a),
    }
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let base = TrainConfig::new(
                a.dataset.unwrap_or(DatasetName::Mnist),
                a.model.unwrap_or(ModelKind::IbCapsNet),
            );
            TrainConfig::parse(&text, Some(&base))?
        }
        None => TrainConfig::new(
            a.dataset.unwrap_or(DatasetName::Mnist),
            a.model.unwrap_or(ModelKind::IbCapsNet),
        ),
    };
    if let Some(d) = a.dataset {
        if d != cfg.dataset && a.beta.is_none() {
            cfg.beta = d.default_kl_weight();
        }
        cfg.dataset = d;
    }
    if let Some(m) = a.model {
        cfg.model = m;
    }
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    macro_rules! set {
        ($($field:ident),*) => {$(if let Some(v) = a.$field { cfg.$field = v; })*};
    }
    set!(
        epochs,
        batch_size,
        lr,
        lr_decay,
        beta,
        lambda_recon,
        seed,
        routing_iters
    );
    if a.subset.is_some() {
        cfg.train_subset = a.subset;
    }
    if a.test_subset.is_some() {
        cfg.test_subset = a.test_subset;
    }
    if a.train_noise.is_some() {
        cfg.train_noise = a.train_noise;
    }
    if a.no_mask_with_truth {
        cfg.mask_with_truth = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut state = TrainState::<f32>::load(path)?;
            if let Some(e) = a.epochs {
                state.config.epochs = e;
            }
            info!(
                "resuming {} at epoch {} of {}",
                state.model.label(),
                state.epoch,
                state.config.epochs
            );
            Trainer::resume(state)
        }
        None => {
            let cfg = train_config(&a)?;
            let (ch, side) = cfg.dataset.geometry();
            let mut arch = ArchConfig::for_geometry(ch, side, 10)?;
            arch.routing_iters = cfg.routing_iters;
            Trainer::<f32>::new(cfg, &arch)?
        }
    };
    let cfg = trainer.state.config.clone();
    let train = a.data.load(cfg.dataset, Split::Train)?;
    let test = a.data.load(cfg.dataset, Split::Test)?;
    if a.resume.is_none() {
        let arch = arch_for(&cfg, &train)?;
        if &arch != trainer.model().arch() {
            trainer = Trainer::new(cfg.clone(), &arch)?;
        }
    }
    let out = a.out.clone().unwrap_or_else(|| {
        PathBuf::from(format!("runs/{}-{}", cfg.dataset, trainer.model().label()))
    });
    info!(
        "training {} on {} for {} epochs (batch {}, {} train samples)",
        trainer.model().label(),
        cfg.dataset,
        cfg.epochs,
        cfg.batch_size,
        cfg.train_subset.map_or(train.len(), |n| n.min(train.len()))
    );
    let outcome = trainer.run(&train, &test, Some(&out), |m| {
        info!(
            "epoch {} loss {:.5} (cls {:.5} recon {:.5} kl {:.5}) test_acc {:.4} [{:.1}s]",
            m.epoch, m.loss_total, m.loss_cls, m.loss_recon, m.loss_kl, m.test_acc, m.train_seconds
        );
    })?;
    println!(
        "model={} dataset={} epochs={} peak_acc={:.4} peak_epoch={} final_acc={:.4} out={}",
        trainer.model().label(),
        cfg.dataset,
        trainer.state.epoch,
        outcome.peak_acc,
        outcome.peak_epoch,
        outcome.final_acc,
        out.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(Model, DatasetName)> {
    let state = TrainState::<f32>::load(path)?;
    Ok((state.model, state.config.dataset))
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, trained_on) = load_model(&a.checkpoint)?;
    let test = a.data.load(a.dataset.unwrap_or(trained_on), Split::Test)?;
    let mut records = vec![evaluate(&model, &test, None, a.batch_size, a.limit)?];
    for spec in &a.corruption {
        records.push(evaluate(&model, &test, Some(spec), a.batch_size, a.limit)?);
    }
    let csv = report::eval_csv(&records)?;
    match &a.out {
        Some(path) => report::write_csv(path, &csv)?,
        None => print!("{csv}"),
    }
    for r in &records {
        info!(
            "{} {} {}:{:.2} accuracy {:.4} ({}/{})",
            r.model, r.dataset, r.kind, r.severity, r.accuracy, r.n_correct, r.n_total
        );
    }
    Ok(())
}

fn unique_labels(models: &[Model]) -> Vec<String> {
    let mut labels: Vec<String> = Vec::new();
    for m in models {
        let base = m.label();
        let mut label = base.clone();
        let mut n = 2;
        while labels.contains(&label) {
            label = format!("{base}#{n}");
            n += 1;
        }
        labels.push(label);
    }
    labels
}

fn sweep(a: SweepArgs) -> Result<()> {
    let kinds = CorruptionKind::parse_list(&a.kinds)?;
    let mut models = Vec::new();
    let mut trained_on = None;
    for path in &a.checkpoint {
        let (m, d) = load_model(path)?;
        trained_on.get_or_insert(d);
        models.push(m);
    }
    let dataset = a.dataset.or(trained_on).expect("at least one checkpoint");
    let test = a.data.load(dataset, Split::Test)?;
    let labels = unique_labels(&models);
    let pairs: Vec<(&str, &Model)> = labels.iter().map(String::as_str).zip(&models).collect();
    let records = robustness_sweep(&pairs, &test, &kinds, a.seed, a.batch_size, a.limit, |r| {
        info!(
            "{} {} {:.2}: {:.4}",
            r.model, r.kind, r.severity, r.accuracy
        )
    })?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    report::write_csv(&a.out.join("sweep.csv"), &report::sweep_csv(&records)?)?;
    let find = |kind: ModelKind| {
        models
            .iter()
            .zip(&labels)
            .find(|(m, _)| m.kind() == kind)
            .map(|(_, l)| l.clone())
    };
    if let (Some(candidate), Some(reference)) =
        (find(ModelKind::IbCapsNet), find(ModelKind::CapsNet))
    {
        let gains = gain_summary(&records, &candidate, &reference);
        report::write_csv(&a.out.join("gains.csv"), &report::gain_csv(&gains)?)?;
        for g in &gains {
            println!(
                "gain dataset={} kind={} candidate={} reference={} mean_gain_pct={:.2}",
                g.dataset,
                g.kind,
                g.candidate,
                g.reference,
                100.0 * g.mean_gain
            );
        }
    }
    if a.plot {
        let (img, legend) = report::sweep_plot(&records)?;
        img.save(&a.out.join("sweep.png"))?;
        let path = a.out.join("sweep.legend.txt");
        std::fs::write(&path, legend).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("records={} out={}", records.len(), a.out.display());
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let base = TrainConfig::new(a.dataset, ModelKind::IbCapsNet);
    let mut cfg = match &a.config {
        Some(path) => TrainConfig::load(path, Some(&base))?,
        None => base,
    };
    cfg.dataset = a.dataset;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.subset.is_some() {
        cfg.train_subset = a.subset;
    }
    if a.test_subset.is_some() {
        cfg.test_subset = a.test_subset;
    }
    cfg.validate()?;
    let train = a.data.load(cfg.dataset, Split::Train)?;
    let test = a.data.load(cfg.dataset, Split::Test)?;
    let rows = ablation_run::<f32>(&cfg, &train, &test, a.severity, Some(&a.out), |v, m| {
        info!(
            "{v} epoch {} loss {:.5} test_acc {:.4} [{:.1}s]",
            m.epoch, m.loss_total, m.test_acc, m.train_seconds
        )
    })?;
    report::write_csv(
        &a.out.join("ablation.csv"),
        &report::ablation_csv(&rows, a.severity)?,
    )?;
    for r in &rows {
        println!(
            "variant={} clean_acc={:.4} noisy_acc={:.4}",
            r.variant, r.clean_acc, r.noisy_acc
        );
    }
    Ok(())
}

fn synthetic(name: DatasetName, n: usize, seed: u64) -> Result<Dataset> {
    let (ch, side) = name.geometry();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..n * ch * side * side).map(|_| rng.gen()).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..10)).collect();
    Ok(Dataset::new(
        &format!("{name}-synthetic"),
        images,
        labels,
        [ch, side, side],
        10,
    )?)
}

fn bench(a: BenchArgs) -> Result<()> {
    let need = a.train_samples.max(a.infer_samples);
    let data = if a.synthetic {
        synthetic(a.dataset, need, 0)?
    } else {
        a.data.load(a.dataset, Split::Train)?.head(need)
    };
    let [ch, h, _] = data.dims();
    let base = ArchConfig::for_geometry(ch, h, data.num_classes)?;
    let mut runs = vec![(ModelKind::CapsNet, a.routing_iters)];
    if a.with_r1 && a.routing_iters != 1 {
        runs.push((ModelKind::CapsNet, 1));
    }
    runs.push((ModelKind::IbCapsNet, a.routing_iters));
    let opts = TrainConfig::new(a.dataset, ModelKind::IbCapsNet).options();
    let mut results: Vec<BenchResult> = Vec::new();
    for (kind, r) in runs {
        let arch = ArchConfig {
            routing_iters: r,
            ..base.clone()
        };
        let mut model = Model::new(
            kind,
            &arch,
            ModelVariantFlags::FULL,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        let label = match kind {
            ModelKind::CapsNet => format!("capsnet[r={r}]"),
            ModelKind::IbCapsNet => model.label(),
        };
        let (blocks, total) = bench_params(&model);
        let parts: Vec<String> = blocks.iter().map(|(n, c)| format!("{n}={c}")).collect();
        println!("params model={label} total={total} {}", parts.join(" "));
        let mut inf = bench_inference(
            &model,
            &data,
            a.batch_size,
            a.infer_samples,
            a.repeats,
            a.warmup,
        )?;
        inf.model = label.clone();
        print_bench(&inf);
        results.push(inf);
        if !a.inference_only {
            let mut tr = bench_train_epoch(
                &mut model,
                &data,
                a.batch_size,
                a.train_samples,
                a.repeats,
                &opts,
            )?;
            tr.model = label;
            print_bench(&tr);
            results.push(tr);
        }
    }
    let ratio = |phase: &str| {
        let get = |prefix: &str| {
            results.iter().find(|r| {
                r.phase.as_str() == phase
                    && r.model.starts_with(prefix)
                    && (prefix != "capsnet" || r.model == format!("capsnet[r={}]", a.routing_iters))
            })
        };
        match (get("ibcapsnet"), get("capsnet")) {
            (Some(ib), Some(cn)) => Some(ib.samples_per_s() / cn.samples_per_s()),
            _ => None,
        }
    };
    for phase in ["train_epoch", "inference"] {
        if let Some(x) = ratio(phase) {
            println!(
                "ratio phase={phase} ibcapsnet_over_capsnet_r{}={x:.3}",
                a.routing_iters
            );
        }
    }
    append_bench_csv(&a.out, &results)?;
    Ok(())
}

fn print_bench(r: &BenchResult) {
    println!(
        "bench model={} phase={} batch={} samples={} median_s={:.4} min_s={:.4} stdev_s={:.4} samples_per_s={:.2} batches_per_s={:.3} repeats={}",
        r.model,
        r.phase.as_str(),
        r.batch_size,
        r.samples,
        r.median_s,
        r.min_s,
        r.stdev_s,
        r.samples_per_s(),
        r.batches_per_s(),
        r.repeats()
    );
}

fn corrupt(a: CorruptArgs) -> Result<()> {
    let test = a.data.load(a.dataset, Split::Test)?;
    if let Some(&bad) = a.samples.iter().find(|&&i| i >= test.len()) {
        bail!(ibcaps_core::Error::Input(format!(
            "sample index {bad} out of range for {} samples",
            test.len()
        )));
    }
    let [ch, h, w] = test.dims();
    let dims = ImageDims {
        channels: ch,
        height: h,
        width: w,
    };
    let pad = 2;
    let mut img = Raster::new(
        a.samples.len() * (w + pad) + pad,
        (a.spec.len() + 1) * (h + pad) + pad,
        if ch == 3 { 3 } else { 1 },
        0,
    );
    let clean = test.images_tensor::<f32>(&a.samples);
    for (s, &idx) in a.samples.iter().enumerate() {
        let x = pad + s * (w + pad);
        img.blit_planar(x, pad, clean.row(s), ch, h, w);
        for (r, spec) in a.spec.iter().enumerate() {
            let out = spec.for_sample(idx as u64).apply(clean.row(s), dims)?;
            img.blit_planar(x, pad + (r + 1) * (h + pad), &out, ch, h, w);
        }
    }
    img.save(&a.out)?;
    println!(
        "wrote {} rows={} samples={:?}",
        a.out.display(),
        a.spec.len() + 1,
        a.samples
    );
    Ok(())
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let mut models = Vec::new();
    let mut trained_on = None;
    for path in &a.checkpoint {
        let (m, d) = load_model(path)?;
        trained_on.get_or_insert(d);
        models.push(m);
    }
    let dataset = a.dataset.or(trained_on).expect("at least one checkpoint");
    let test = a.data.load(dataset, Split::Test)?;
    let labels = unique_labels(&models);
    let pairs: Vec<(&str, &Model)> = labels.iter().map(String::as_str).zip(&models).collect();
    let spec = GridSpec {
        samples: a.samples.clone(),
        clamped_severity: a.clamped,
        blur_sigma: a.blur,
        salt_pepper_rate: a.salt_pepper,
        seed: a.seed,
        ..GridSpec::default()
    };
    let grid = report::reconstruction_grid(&pairs, &test, &spec)?;
    grid.image.save(&a.out)?;
    let legend_path = sidecar(&a.out, ".legend.txt");
    std::fs::write(&legend_path, &grid.legend)
        .with_context(|| format!("writing {}", legend_path.display()))?;
    println!("wrote {} and {}", a.out.display(), legend_path.display());
    if let Some(n) = a.drift_samples {
        let n = n.min(test.len());
        let indices: Vec<usize> = (0..n).collect();
        let noise = CorruptionSpec::new(CorruptionKind::ClampedAdditive, a.clamped, a.seed)?;
        let mut csv = String::from("model,kind,severity,samples,drift_rms\n");
        for (label, model) in &pairs {
            let d = reconstruction_drift(model, &test, &indices, &noise)?;
            println!(
                "drift model={label} kind={} severity={:.2} samples={n} drift_rms={d:.6}",
                noise.kind, noise.severity
            );
            csv.push_str(&format!(
                "{label},{},{:.2},{n},{d:.6}\n",
                noise.kind, noise.severity
            ));
        }
        report::write_csv(&sidecar(&a.out, ".drift.csv"), &csv)?;
    }
    Ok(())
}

fn convert_check(a: ConvertArgs) -> Result<()> {
    let first = a.input.first().ok_or_else(|| anyhow!("no input"))?;
    let head = std::fs::read(first)
        .with_context(|| format!("reading {}", first.display()))?
        .into_iter()
        .take(4)
        .collect::<Vec<u8>>();
    let ds = if head.as_slice() == ibcaps_core::data::container::MAGIC {
        read_container(first, &a.name)?
    } else if head.len() == 4 && head[0] == 0 && head[1] == 0 {
        let labels = a.labels.as_ref().ok_or_else(|| {
            ibcaps_core::Error::Input("IDX images need --labels with the label file".into())
        })?;
        let classes = 10;
        Dataset::from_idx(&a.name, parse_idx(first)?, parse_idx(labels)?, classes)?
    } else {
        parse_cifar10_binary(&a.input, &a.name)?
    };
    let mut counts = vec![0usize; ds.num_classes];
    for &l in &ds.labels {
        counts[l as usize] += 1;
    }
    println!(
        "ok name={} samples={} dims={:?} classes={} label_counts={:?}",
        ds.name,
        ds.len(),
        ds.dims(),
        ds.num_classes,
        counts
    );
    if let Some(out) = &a.out {
        write_container(out, &ds)?;
        let back = read_container(out, &a.name)?;
        if back != ds {
            bail!(ibcaps_core::Error::Input(format!(
                "{} did not read back identically",
                out.display()
            )));
        }
        println!("wrote {} (verified)", out.display());
    }
    Ok(())
}
