//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Criteria backed by training runs read the outputs of
//! `scripts/reproduce.sh` from `$IBCAPS_ARTIFACTS` (default `artifacts/` at
//! the workspace root). Set `IBCAPS_ACCEPTANCE_STRICT=1` to exit non-zero
//! when any criterion fails.

#![allow(clippy::type_complexity)]

use std::path::{Path, PathBuf};
use std::time::Instant;

use ibcaps_core::bench::{bench_inference, bench_train_epoch, BenchResult};
use ibcaps_core::corruption::{CorruptionKind, CorruptionSpec, ImageDims};
use ibcaps_core::data::idx::parse_idx_bytes;
use ibcaps_core::data::{load, Dataset, DatasetName, Split, DATA_DIR_ENV};
use ibcaps_core::model::{
    dynamic_routing, kl_to_standard_normal, ArchConfig, GaussianPosterior, LossWeights, ModelKind,
    ModelVariantFlags, PrimaryCapsules, TrainOptions,
};
use ibcaps_core::nn::{squash, Parameters};
use ibcaps_core::report::{parse_sweep_csv, sweep_csv};
use ibcaps_core::train::{Checkpoint, EvalRecord, TrainConfig, TrainState, Trainer};
use ibcaps_core::{Model, ModelF64, TensorF64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const CAPSNET_PARAMS: usize = 8_215_568;
const IBCAPSNET_TARGET: f64 = 7_832_929.0;
const PARAM_TOLERANCE: f64 = 0.05;
const FULL_ACC: f64 = 0.985;
const SUBSET_ACC: f64 = 0.96;
const MAX_EPOCHS: usize = 10;
const CLAMPED_GAIN: f64 = 0.10;
const MULTIPLICATIVE_GAIN: f64 = 0.05;
const TRAIN_RATIO: f64 = 1.5;
const INFERENCE_RATIO: f64 = 2.0;
const DRIFT_SAMPLES: usize = 100;

type Check = Result<String, String>;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn artifacts() -> PathBuf {
    std::env::var_os("IBCAPS_ARTIFACTS")
        .map(PathBuf::from)
        .unwrap_or_else(|| root().join("artifacts"))
}

fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| root().join("data"))
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path)
        .map_err(|e| format!("missing {} ({e}); run scripts/reproduce.sh", path.display()))
}

/// Rows of a CSV file as header-keyed string maps.
fn csv_rows(path: &Path) -> Result<Vec<Vec<(String, String)>>, String> {
    let text = read(path)?;
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rd
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .map(String::from)
        .collect();
    rd.records()
        .map(|r| {
            let r = r.map_err(|e| format!("{}: {e}", path.display()))?;
            Ok(header
                .iter()
                .cloned()
                .zip(r.iter().map(String::from))
                .collect())
        })
        .collect()
}

fn field<'a>(row: &'a [(String, String)], key: &str) -> Result<&'a str, String> {
    row.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| format!("column {key} missing"))
}

fn num(row: &[(String, String)], key: &str) -> Result<f64, String> {
    let v = field(row, key)?;
    v.parse().map_err(|_| format!("bad number {v:?} in {key}"))
}

fn build(kind: ModelKind) -> Model {
    Model::new(
        kind,
        &ArchConfig::mnist(),
        ModelVariantFlags::FULL,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap()
}

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout
}

fn dense(i: usize, o: usize) -> usize {
    i * o + o
}

fn capsnet_parameters() -> Check {
    let m = build(ModelKind::CapsNet);
    let total = m.num_parameters();
    let layers = conv(1, 256, 9)
        + conv(256, 256, 9)
        + 1152 * 10 * 8 * 16
        + dense(160, 512)
        + dense(512, 1024)
        + dense(1024, 784);
    let blocks: usize = m.block_parameters().iter().map(|(_, n)| n).sum();
    if total == CAPSNET_PARAMS && layers == CAPSNET_PARAMS && blocks == CAPSNET_PARAMS {
        Ok(format!("capsnet total={total} layer_sum={layers}"))
    } else {
        Err(format!(
            "capsnet total={total} layer_sum={layers} block_sum={blocks}, need {CAPSNET_PARAMS}"
        ))
    }
}

fn ibcapsnet_parameters() -> Check {
    let total = build(ModelKind::IbCapsNet).num_parameters();
    let delta = (total as f64 - IBCAPSNET_TARGET) / IBCAPSNET_TARGET;
    let msg = format!(
        "ibcapsnet total={total} target={IBCAPSNET_TARGET} delta={:+.3}%",
        100.0 * delta
    );
    if delta.abs() <= PARAM_TOLERANCE {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// The largest completed MNIST tier: full training if present, else subset.
fn tier() -> Result<(PathBuf, &'static str, f64), String> {
    let a = artifacts();
    for (dir, name, threshold) in [
        ("mnist-full", "full", FULL_ACC),
        ("mnist-subset", "subset", SUBSET_ACC),
    ] {
        let d = a.join(dir);
        if ["capsnet", "ibcapsnet"]
            .iter()
            .all(|m| d.join(m).join("done").exists())
        {
            return Ok((d, name, threshold));
        }
    }
    Err(format!(
        "no completed MNIST runs under {}; run scripts/reproduce.sh",
        a.display()
    ))
}

fn clean_accuracy() -> Check {
    let (dir, name, threshold) = tier()?;
    let mut parts = vec![format!("tier={name} threshold={threshold}")];
    let mut ok = true;
    for model in ["capsnet", "ibcapsnet"] {
        let run = dir.join(model);
        let cfg = TrainConfig::load(&run.join("config.txt"), None).map_err(|e| e.to_string())?;
        let rows = csv_rows(&run.join("metrics.csv"))?;
        let mut peak = (0.0, 0);
        for r in &rows {
            let acc = num(r, "test_acc")?;
            if acc > peak.0 {
                peak = (acc, num(r, "epoch")? as usize);
            }
        }
        let subset_ok = name == "full" || cfg.train_subset == Some(10_000);
        ok &= peak.0 >= threshold && rows.len() <= MAX_EPOCHS && cfg.batch_size == 128 && subset_ok;
        parts.push(format!(
            "{model} peak={:.4}@{} epochs={} batch={}",
            peak.0,
            peak.1,
            rows.len(),
            cfg.batch_size
        ));
    }
    let msg = parts.join(" ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn mean_gain(records: &[EvalRecord], kind: &str, keep: impl Fn(f64) -> bool) -> Option<f64> {
    let acc = |model: &str, sev: f64| {
        records
            .iter()
            .find(|r| r.model == model && r.kind == kind && (r.severity - sev).abs() < 1e-9)
            .map(|r| r.accuracy)
    };
    let gains: Vec<f64> = records
        .iter()
        .filter(|r| r.model == "ibcapsnet" && r.kind == kind && keep(r.severity))
        .filter_map(|r| Some(r.accuracy - acc("capsnet", r.severity)?))
        .collect();
    (!gains.is_empty()).then(|| gains.iter().sum::<f64>() / gains.len() as f64)
}

fn robustness() -> Check {
    let (dir, name, _) = tier()?;
    let text = read(&dir.join("sweep/sweep.csv"))?;
    let records = parse_sweep_csv(&text).map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut parts = vec![format!("tier={name}")];
    let checks: [(&str, f64, fn(f64) -> bool); 4] = [
        ("clamped_additive", CLAMPED_GAIN, |s| {
            (0.3 - 1e-9..=0.9 + 1e-9).contains(&s)
        }),
        ("multiplicative", MULTIPLICATIVE_GAIN, |s| s > 0.0),
        ("gaussian_blur", 0.0, |s| s > 0.0),
        ("salt_pepper", 0.0, |s| s > 0.0),
    ];
    for (kind, min, keep) in checks {
        match mean_gain(&records, kind, keep) {
            Some(g) => {
                ok &= if min > 0.0 { g >= min } else { g > 0.0 };
                parts.push(format!("{kind}={:+.2}pts", 100.0 * g));
            }
            None => {
                ok = false;
                parts.push(format!("{kind}=missing"));
            }
        }
    }
    let msg = parts.join(" ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn ratios_from(results: &[(String, String, f64)], source: &str) -> Check {
    let rate = |model: &str, phase: &str| {
        results
            .iter()
            .rev()
            .find(|(m, p, _)| m == model && p == phase)
            .map(|r| r.2)
    };
    let mut ok = true;
    let mut parts = vec![format!("source={source}")];
    for (phase, min) in [("train_epoch", TRAIN_RATIO), ("inference", INFERENCE_RATIO)] {
        match (rate("ibcapsnet", phase), rate("capsnet[r=3]", phase)) {
            (Some(ib), Some(cn)) => {
                let r = ib / cn;
                ok &= r >= min;
                parts.push(format!("{phase}={r:.3}x(need {min}x)"));
            }
            _ => {
                ok = false;
                parts.push(format!("{phase}=missing"));
            }
        }
    }
    let msg = parts.join(" ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn live_bench() -> Check {
    let data = load(DatasetName::Mnist, &data_root(), Split::Test)
        .map(|d| d.head(128))
        .or_else(|_| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let images = (0..128 * 784).map(|_| rng.gen()).collect();
            let labels = (0..128).map(|i| (i % 10) as u8).collect();
            Dataset::new("synthetic", images, labels, [1, 28, 28], 10)
        })
        .map_err(|e| e.to_string())?;
    let opts = TrainConfig::new(DatasetName::Mnist, ModelKind::IbCapsNet).options();
    let mut rows = Vec::new();
    for kind in [ModelKind::CapsNet, ModelKind::IbCapsNet] {
        let mut m = build(kind);
        let label = match kind {
            ModelKind::CapsNet => "capsnet[r=3]".to_string(),
            ModelKind::IbCapsNet => m.label(),
        };
        let inf = bench_inference(&m, &data, 32, 128, 3, 1).map_err(|e| e.to_string())?;
        let tr = bench_train_epoch(&mut m, &data, 32, 64, 3, &opts).map_err(|e| e.to_string())?;
        for r in [inf, tr] {
            let r: BenchResult = r;
            rows.push((
                label.clone(),
                r.phase.as_str().to_string(),
                r.samples_per_s(),
            ));
        }
    }
    ratios_from(&rows, "live-small")
}

fn efficiency() -> Check {
    let path = artifacts().join("benchmarks.csv");
    if !path.exists() {
        return live_bench();
    }
    let rows = csv_rows(&path)?
        .iter()
        .map(|r| {
            Ok((
                field(r, "model")?.to_string(),
                field(r, "phase")?.to_string(),
                num(r, "samples_per_s")?,
            ))
        })
        .collect::<Result<Vec<_>, String>>()?;
    ratios_from(&rows, "benchmarks.csv")
}

fn ablation_trend() -> Check {
    let rows = csv_rows(&artifacts().join("ablation/ablation.csv"))?;
    let acc = |variant: &str| -> Result<f64, String> {
        let r = rows
            .iter()
            .find(|r| field(r, "variant") == Ok(variant))
            .ok_or_else(|| format!("variant {variant} missing"))?;
        num(r, "noisy_acc")
    };
    let base = acc("Baseline")?;
    let multi = acc("Multi-Classifier")?;
    let sq = acc("+Squash&KL")?;
    let rec = acc("+reconstruction")?;
    let steps = [multi - base, sq - multi, rec - sq];
    let largest = steps[2] > steps[0] && steps[2] > steps[1];
    let msg = format!(
        "noisy_acc baseline={base:.4} multi={multi:.4} squash_kl={sq:.4} recon={rec:.4} \
         increments={:+.4}/{:+.4}/{:+.4}",
        steps[0], steps[1], steps[2]
    );
    if base < sq && sq < rec && largest {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn ensure(cond: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

fn squash_checks() -> Result<(), String> {
    let mut prev = -1.0;
    for i in 0..200 {
        let r = i as f64 * 0.05;
        let v = squash(&[r * 0.6, r * 0.8], 2);
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        ensure(n < 1.0 && n > prev, || format!("squash norm {n} at {r}"))?;
        prev = n;
    }
    Ok(())
}

/// Direct transcription of routing-by-agreement over `[N, C, d, out]` weights.
fn routing_oracle(
    u: &[f64],
    w: &[f64],
    n: usize,
    c: usize,
    d: usize,
    out: usize,
    iters: usize,
) -> Vec<f64> {
    let mut uhat = vec![0.0; n * c * out];
    for i in 0..n {
        for j in 0..c {
            for k in 0..d {
                for o in 0..out {
                    uhat[(i * c + j) * out + o] +=
                        u[i * d + k] * w[((i * c + j) * d + k) * out + o];
                }
            }
        }
    }
    let mut b = vec![0.0f64; n * c];
    let mut v = vec![0.0; c * out];
    for t in 0..iters {
        let mut s = vec![0.0; c * out];
        for i in 0..n {
            let z: f64 = (0..c).map(|j| b[i * c + j].exp()).sum();
            for j in 0..c {
                let cij = b[i * c + j].exp() / z;
                for o in 0..out {
                    s[j * out + o] += cij * uhat[(i * c + j) * out + o];
                }
            }
        }
        for j in 0..c {
            let sj = &s[j * out..(j + 1) * out];
            let n2: f64 = sj.iter().map(|x| x * x).sum();
            for o in 0..out {
                v[j * out + o] = n2 / (1.0 + n2) / n2.sqrt() * sj[o];
            }
        }
        if t + 1 < iters {
            for i in 0..n {
                for j in 0..c {
                    b[i * c + j] += (0..out)
                        .map(|o| uhat[(i * c + j) * out + o] * v[j * out + o])
                        .sum::<f64>();
                }
            }
        }
    }
    v
}

fn routing_checks() -> Result<(), String> {
    let (batch, n, c, d, out) = (3, 6, 4, 3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let raw: Vec<f64> = (0..batch * n * d)
        .map(|_| rng.gen_range(-2.0..2.0))
        .collect();
    let u = squash(&raw, d);
    let w: Vec<f64> = (0..n * c * d * out)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let caps = PrimaryCapsules {
        values: TensorF64::from_vec(&[batch, n, d], u.clone()).unwrap(),
    };
    let weight = TensorF64::from_vec(&[n, c, d, out], w.clone()).unwrap();
    for iters in 1..=3 {
        let (v, states) = dynamic_routing(&caps, &weight, iters).map_err(|e| e.to_string())?;
        for st in &states {
            for row in st.couplings.data().chunks_exact(c) {
                let sum: f64 = row.iter().sum();
                ensure(
                    row.iter().all(|&x| x >= 0.0) && (sum - 1.0).abs() < 1e-9,
                    || format!("coupling row {row:?}"),
                )?;
            }
        }
        for bi in 0..batch {
            let want = routing_oracle(&u[bi * n * d..(bi + 1) * n * d], &w, n, c, d, out, iters);
            let got = &v.data()[bi * c * out..(bi + 1) * c * out];
            let err = want
                .iter()
                .zip(got)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            ensure(err < 1e-6, || {
                format!("routing r={iters} differs from oracle by {err:e}")
            })?;
        }
    }
    Ok(())
}

fn kl_checks() -> Result<(), String> {
    let cases: [(&[f64], &[f64]); 2] = [
        (&[0.5, -1.0, 2.0, 0.0], &[0.0, -1.0, 0.5, 1.0]),
        (&[1.5, 1.5], &[-2.0, -2.0]),
    ];
    for (case, (mu, lv)) in cases.iter().enumerate() {
        let k = mu.len();
        let post = GaussianPosterior {
            mu: TensorF64::from_vec(&[1, 1, k], mu.to_vec()).unwrap(),
            log_var: TensorF64::from_vec(&[1, 1, k], lv.to_vec()).unwrap(),
        };
        let exact = kl_to_standard_normal(&post).data()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(50 + case as u64);
        let samples = 1_000_000;
        let mut total = 0.0;
        for _ in 0..samples {
            for (&m, &l) in mu.iter().zip(*lv) {
                let e: f64 = rng.sample(StandardNormal);
                let z = m + (0.5 * l).exp() * e;
                total += -0.5 * (l + e * e) + 0.5 * z * z;
            }
        }
        let mc = total / samples as f64;
        let rel = (mc - exact).abs() / exact;
        ensure(rel < 0.01, || format!("kl exact {exact} monte carlo {mc}"))?;
    }
    Ok(())
}

fn gradient_checks() -> Result<(), String> {
    let arch = ArchConfig::tiny();
    let opts = TrainOptions {
        weights: LossWeights {
            recon_weight: 0.5,
            kl_weight: 0.2,
        },
        ..TrainOptions::default()
    };
    for (s, kind) in [ModelKind::CapsNet, ModelKind::IbCapsNet]
        .into_iter()
        .enumerate()
    {
        let seed = 20 + s as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels: Vec<f64> = (0..3 * arch.pixels()).map(|_| rng.gen()).collect();
        let x = TensorF64::from_vec(&[3, 1, arch.image_side, arch.image_side], pixels).unwrap();
        let y = TensorF64::from_vec(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let mut model = ModelF64::new(kind, &arch, ModelVariantFlags::FULL, &mut rng).unwrap();
        model.zero_grad();
        model
            .train_step(&x, &y, &opts, &mut ChaCha8Rng::seed_from_u64(seed))
            .map_err(|e| e.to_string())?;
        let mut grads = Vec::new();
        model.visit(&mut |p| grads.extend_from_slice(p.grad.data()));
        let loss = |m: &ModelF64| {
            m.loss(&x, &y, &opts, &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap()
                .total
        };
        for (i, &g) in grads.iter().enumerate() {
            let nudge = |m: &mut ModelF64, delta: f64| {
                let mut offset = 0;
                m.visit_mut(&mut |p| {
                    let len = p.value.len();
                    if (offset..offset + len).contains(&i) {
                        p.value.data_mut()[i - offset] += delta;
                    }
                    offset += len;
                });
            };
            let h = 1e-4;
            nudge(&mut model, h);
            let up = loss(&model);
            nudge(&mut model, -2.0 * h);
            let down = loss(&model);
            nudge(&mut model, h);
            let numeric = (up - down) / (2.0 * h);
            let scale = g.abs().max(numeric.abs());
            let err = (g - numeric).abs();
            ensure(err <= 1e-3 * scale || err < 1e-8, || {
                format!("{kind} param {i}: analytic {g:e} numeric {numeric:e}")
            })?;
        }
    }
    Ok(())
}

fn moments(v: &[f64]) -> (f64, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    (mean, var)
}

fn corruption_checks() -> Result<(), String> {
    let dims = ImageDims {
        channels: 1,
        height: 200,
        width: 200,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let random: Vec<f64> = (0..dims.len()).map(|_| rng.gen()).collect();
    let gray = vec![0.5; dims.len()];
    let spec = |kind, sev| CorruptionSpec::new(kind, sev, 9).unwrap();
    for kind in CorruptionKind::ALL {
        let out = spec(kind, 0.0)
            .apply(&random, dims)
            .map_err(|e| e.to_string())?;
        ensure(out == random, || {
            format!("{kind} at severity 0 is not the identity")
        })?;
        let s = spec(kind, 0.6 * kind.max_severity());
        let a = s.apply(&random, dims).map_err(|e| e.to_string())?;
        ensure(a == s.apply(&random, dims).unwrap(), || {
            format!("{kind} not deterministic")
        })?;
        ensure(a.iter().all(|x| (0.0..=1.0).contains(x)), || {
            format!("{kind} out of range")
        })?;
    }
    // Uniform noise of half-width 0.3 around mid-gray never clips.
    let (m, v) = moments(
        &spec(CorruptionKind::ClampedAdditive, 0.3)
            .apply(&gray, dims)
            .unwrap(),
    );
    ensure(
        (m - 0.5).abs() < 0.005 && (v / 0.03 - 1.0).abs() < 0.03,
        || format!("clamped additive moments {m} {v}"),
    )?;
    let (m, v) = moments(
        &spec(CorruptionKind::Multiplicative, 0.6)
            .apply(&gray, dims)
            .unwrap(),
    );
    ensure(
        (m - 0.5).abs() < 0.005 && (v / 0.03 - 1.0).abs() < 0.03,
        || format!("multiplicative moments {m} {v}"),
    )?;
    let sp = spec(CorruptionKind::SaltPepper, 0.2)
        .apply(&gray, dims)
        .unwrap();
    let salt = sp.iter().filter(|&&x| x == 1.0).count() as f64 / sp.len() as f64;
    let pepper = sp.iter().filter(|&&x| x == 0.0).count() as f64 / sp.len() as f64;
    ensure(
        (salt - 0.1).abs() < 0.005 && (pepper - 0.1).abs() < 0.005,
        || format!("salt {salt} pepper {pepper}"),
    )?;
    let blurred = spec(CorruptionKind::GaussianBlur, 1.5)
        .apply(&random, dims)
        .unwrap();
    let flat = spec(CorruptionKind::GaussianBlur, 1.5)
        .apply(&gray, dims)
        .unwrap();
    ensure(flat.iter().all(|x| (x - 0.5).abs() < 1e-12), || {
        "blur moved a flat image".into()
    })?;
    let ((m0, v0), (m1, v1)) = (moments(&random), moments(&blurred));
    ensure((m0 - m1).abs() < 0.002 && v1 < 0.1 * v0, || {
        format!("blur moments {m0} {v0} -> {m1} {v1}")
    })?;
    Ok(())
}

fn parser_checks() -> Result<(), String> {
    let golden = [
        0u8, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12,
    ];
    let arr = parse_idx_bytes(&golden, "golden").map_err(|e| e.to_string())?;
    ensure(
        arr.dims == [2, 2, 3] && arr.data == (1..=12).collect::<Vec<u8>>(),
        || format!("golden idx parsed as {:?}", arr.dims),
    )?;
    let kind = |bytes: &[u8]| {
        parse_idx_bytes(bytes, "bad")
            .map(|_| ())
            .unwrap_err()
            .kind()
    };
    ensure(kind(&golden[..27]) == "truncated", || {
        "truncation not reported".into()
    })?;
    let mut magic = golden;
    magic[2] = 9;
    ensure(kind(&magic) != "truncated", || {
        "bad type code accepted".into()
    })?;
    ensure(
        "gaussian_blur:4.0:1".parse::<CorruptionSpec>().is_err()
            && "fog:0.1:1".parse::<CorruptionSpec>().is_err()
            && "salt_pepper:0.2:x".parse::<CorruptionSpec>().is_err(),
        || "invalid corruption specs accepted".into(),
    )?;
    ensure(TrainConfig::parse("epochs = -3\n", None).is_err(), || {
        "negative epochs accepted".into()
    })?;
    Ok(())
}

fn round_trip_checks() -> Result<(), String> {
    let mut cfg = TrainConfig::new(DatasetName::Mnist, ModelKind::IbCapsNet);
    cfg.epochs = 1;
    let t = Trainer::<f64>::new(cfg, &ArchConfig::tiny()).map_err(|e| e.to_string())?;
    let bytes = t.state.to_checkpoint().to_bytes();
    let back = Checkpoint::<f64>::from_bytes(&bytes, "mem").map_err(|e| e.to_string())?;
    let state = TrainState::from_checkpoint(&back).map_err(|e| e.to_string())?;
    ensure(state.to_checkpoint().to_bytes() == bytes, || {
        "checkpoint bytes changed on round trip".into()
    })?;
    let records: Vec<EvalRecord> = (0..4)
        .map(|i| EvalRecord {
            model: ["capsnet", "ibcapsnet"][i % 2].into(),
            dataset: "mnist".into(),
            kind: "clamped_additive".into(),
            severity: 0.1 * i as f64,
            accuracy: 0.9 - 0.0125 * i as f64,
            n_correct: 0,
            n_total: 0,
        })
        .collect();
    let text = sweep_csv(&records).map_err(|e| e.to_string())?;
    let again = sweep_csv(&parse_sweep_csv(&text).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    ensure(again == text, || "sweep csv changed on round trip".into())
}

fn properties() -> Check {
    let start = Instant::now();
    let suites: [(&str, fn() -> Result<(), String>); 7] = [
        ("squash", squash_checks),
        ("routing", routing_checks),
        ("kl", kl_checks),
        ("gradients", gradient_checks),
        ("corruption", corruption_checks),
        ("parsers", parser_checks),
        ("round_trips", round_trip_checks),
    ];
    for (name, f) in suites {
        f().map_err(|e| format!("{name}: {e}"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    let names: Vec<&str> = suites.iter().map(|(n, _)| *n).collect();
    let msg = format!("{} in {secs:.1}s", names.join(","));
    if secs < 60.0 {
        Ok(msg)
    } else {
        Err(format!("{msg}, over 60s"))
    }
}

fn reconstruction_stability() -> Check {
    let (dir, name, _) = tier()?;
    let rows = csv_rows(&dir.join("reconstruction.png.drift.csv"))?;
    let drift = |model: &str| -> Result<f64, String> {
        let r = rows
            .iter()
            .find(|r| field(r, "model") == Ok(model))
            .ok_or_else(|| format!("no drift row for {model}"))?;
        let ok = field(r, "kind")? == "clamped_additive"
            && (num(r, "severity")? - 0.5).abs() < 1e-9
            && num(r, "samples")? as usize >= DRIFT_SAMPLES;
        ensure(ok, || {
            format!("drift row for {model} is not clamped 0.5 on 100 samples")
        })?;
        num(r, "drift_rms")
    };
    let (cn, ib) = (drift("capsnet")?, drift("ibcapsnet")?);
    let msg = format!("tier={name} drift capsnet={cn:.4} ibcapsnet={ib:.4}");
    if ib < cn {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("capsnet parameter count exact", capsnet_parameters),
        ("ibcapsnet parameter count within 5%", ibcapsnet_parameters),
        ("clean MNIST accuracy", clean_accuracy),
        ("robustness gains over capsnet", robustness),
        ("efficiency ratios", efficiency),
        ("ablation trend", ablation_trend),
        ("property suite", properties),
        ("reconstruction stability", reconstruction_stability),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(msg) => println!("PASS {} {name}: {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL {} {name}: {msg}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed (artifacts {})",
        criteria.len() - failed,
        artifacts().display()
    );
    if failed > 0 && std::env::var_os("IBCAPS_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
