use std::path::Path;
use std::process::{Command, Output};

use ibcaps_core::data::idx::{write_idx_bytes, IdxArray};

const SUBCOMMANDS: [&str; 8] = [
    "train",
    "eval",
    "sweep",
    "ablate",
    "bench",
    "corrupt",
    "reconstruct",
    "convert-check",
];

fn ibcaps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ibcaps"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("IBCAPS_DATA_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", stderr(o));
    stdout(o)
}

/// Blocky synthetic digits: class `c` lights a bar at row `2 + 2c`.
fn write_mnist(root: &Path, train: usize, test: usize) {
    let dir = root.join("mnist");
    std::fs::create_dir_all(&dir).unwrap();
    for (prefix, n) in [("train", train), ("t10k", test)] {
        let mut images = vec![0u8; n * 784];
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        for (i, &l) in labels.iter().enumerate() {
            let row = 2 + 2 * l as usize;
            for y in row..row + 3 {
                for x in 4..24 {
                    images[i * 784 + y * 28 + x] = 200 + (i % 50) as u8;
                }
            }
        }
        let img = IdxArray {
            dims: vec![n, 28, 28],
            data: images,
        };
        let lab = IdxArray {
            dims: vec![n],
            data: labels,
        };
        std::fs::write(
            dir.join(format!("{prefix}-images-idx3-ubyte")),
            write_idx_bytes(&img),
        )
        .unwrap();
        std::fs::write(
            dir.join(format!("{prefix}-labels-idx1-ubyte")),
            write_idx_bytes(&lab),
        )
        .unwrap();
    }
}

#[test]
fn every_subcommand_has_help() {
    for sub in SUBCOMMANDS {
        let o = ibcaps(&[sub, "--help"]);
        assert!(o.status.success(), "{sub}");
        assert!(stdout(&o).contains("Usage"), "{sub}");
    }
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let o = ibcaps(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn unknown_flag_and_bad_spec_are_usage_errors() {
    assert_eq!(ibcaps(&["train", "--nope", "1"]).status.code(), Some(2));
    let o = ibcaps(&["corrupt", "--spec", "fog:0.1:1", "--out", "x.png"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_single_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap();
    let o = ibcaps(&["train", "--data-dir", root, "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error[")).collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with("error[io]:"), "{err}");
    assert!(lines[0].contains("train-images-idx3-ubyte"));
}

#[test]
fn data_dir_defaults_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    write_mnist(dir.path(), 10, 10);
    let out = dir.path().join("c.png");
    let o = Command::new(env!("CARGO_BIN_EXE_ibcaps"))
        .args([
            "corrupt",
            "--spec",
            "salt_pepper:0.30:42",
            "--out",
            out.to_str().unwrap(),
        ])
        .env("IBCAPS_DATA_DIR", dir.path())
        .output()
        .unwrap();
    ok(&o);
    assert_eq!(&std::fs::read(&out).unwrap()[..4], b"\x89PNG");
}

#[test]
fn corrupt_writes_pgm_with_one_row_per_spec() {
    let dir = tempfile::tempdir().unwrap();
    write_mnist(dir.path(), 10, 10);
    let out = dir.path().join("c.pgm");
    ok(&ibcaps(&[
        "corrupt",
        "--data-dir",
        dir.path().to_str().unwrap(),
        "--spec",
        "clamped_additive:0.50:1",
        "--spec",
        "gaussian_blur:1.50:1",
        "--samples",
        "0,3",
        "--out",
        out.to_str().unwrap(),
    ]));
    let bytes = std::fs::read(&out).unwrap();
    let header = String::from_utf8_lossy(&bytes[..16]).into_owned();
    // 2 samples wide, clean row plus 2 corrupted rows.
    assert!(header.starts_with("P5\n62 92\n255\n"), "{header:?}");
    let o = ibcaps(&[
        "corrupt",
        "--data-dir",
        dir.path().to_str().unwrap(),
        "--spec",
        "clamped_additive:0.50:1",
        "--samples",
        "99",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(stderr(&o).contains("error[input]"));
}

#[test]
fn convert_check_round_trips_and_reports_truncation() {
    let dir = tempfile::tempdir().unwrap();
    write_mnist(dir.path(), 12, 4);
    let m = dir.path().join("mnist");
    let images = m.join("train-images-idx3-ubyte");
    let labels = m.join("train-labels-idx1-ubyte");
    let ibds = dir.path().join("train.ibds");
    let out = ok(&ibcaps(&[
        "convert-check",
        "--input",
        images.to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
        "--out",
        ibds.to_str().unwrap(),
    ]));
    assert!(out.contains("samples=12"), "{out}");
    assert!(out.contains("dims=[1, 28, 28]"));
    assert!(out.contains("verified"));
    let again = ok(&ibcaps(&[
        "convert-check",
        "--input",
        ibds.to_str().unwrap(),
    ]));
    assert!(again.contains("samples=12"));

    let bytes = std::fs::read(&ibds).unwrap();
    std::fs::write(&ibds, &bytes[..bytes.len() - 1]).unwrap();
    let o = ibcaps(&["convert-check", "--input", ibds.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error[truncated]:"), "{err}");
    assert!(err.contains(&bytes.len().to_string()));
}

#[test]
fn bench_synthetic_reports_three_timings() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let out = ok(&ibcaps(&[
        "bench",
        "--synthetic",
        "--batch-size",
        "4",
        "--train-samples",
        "4",
        "--infer-samples",
        "8",
        "--repeats",
        "3",
        "--warmup",
        "1",
        "--out",
        csv.to_str().unwrap(),
    ]));
    assert!(
        out.contains("params model=capsnet[r=3] total=8215568"),
        "{out}"
    );
    assert!(out.contains("ratio phase=inference"));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "model,phase,batch,median_s,stdev_s,samples_per_s,host,min_s,repeats,raw_s"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    for r in rows {
        let raw = r.rsplit(',').next().unwrap();
        assert_eq!(raw.split(';').count(), 3, "{r}");
    }
}

/// Train both models briefly, then run every checkpoint consumer on them.
#[test]
fn train_eval_sweep_reconstruct_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap();
    write_mnist(dir.path(), 20, 8);
    let cfg = dir.path().join("cfg.txt");
    std::fs::write(
        &cfg,
        "# short run\nepochs = 1\nbatch_size = 10\nseed = 3\ntest_subset = 8\n",
    )
    .unwrap();
    let mut ckpts = Vec::new();
    for model in ["capsnet", "ibcapsnet"] {
        let out = dir.path().join(model);
        let text = ok(&ibcaps(&[
            "train",
            "--data-dir",
            root,
            "--dataset",
            "mnist",
            "--model",
            model,
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]));
        assert!(text.contains(&format!("model={model} ")), "{text}");
        assert!(text.contains("epochs=1"));
        let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
        assert_eq!(
            metrics.lines().next().unwrap(),
            "epoch,loss_total,loss_cls,loss_recon,loss_kl,test_acc"
        );
        assert_eq!(metrics.lines().count(), 2);
        let saved = std::fs::read_to_string(out.join("config.txt")).unwrap();
        assert!(saved.contains("batch_size = 10"), "{saved}");
        assert!(out.join("best.ckpt").exists());
        ckpts.push(out.join("last.ckpt"));
    }
    let a = ckpts[0].to_str().unwrap();
    let b = ckpts[1].to_str().unwrap();

    let resumed = ok(&ibcaps(&[
        "train",
        "--data-dir",
        root,
        "--resume",
        a,
        "--epochs",
        "2",
        "--out",
        dir.path().join("capsnet").to_str().unwrap(),
    ]));
    assert!(resumed.contains("epochs=2"), "{resumed}");

    let eval = ok(&ibcaps(&[
        "eval",
        "--data-dir",
        root,
        "--checkpoint",
        b,
        "--corruption",
        "multiplicative:0.40:5",
    ]));
    let rows: Vec<&str> = eval.lines().collect();
    assert_eq!(rows.len(), 3, "{eval}");
    assert!(rows[1].starts_with("ibcapsnet,mnist,none,"));
    assert!(rows[2].starts_with("ibcapsnet,mnist,multiplicative,0.40"));
    let again = ok(&ibcaps(&[
        "eval",
        "--data-dir",
        root,
        "--checkpoint",
        b,
        "--corruption",
        "multiplicative:0.40:5",
    ]));
    assert_eq!(again, eval);

    let sweep_dir = dir.path().join("sweep");
    let sweep = ok(&ibcaps(&[
        "sweep",
        "--data-dir",
        root,
        "--checkpoint",
        a,
        "--checkpoint",
        b,
        "--kinds",
        "clamped_additive,gaussian_blur",
        "--limit",
        "4",
        "--plot",
        "--out",
        sweep_dir.to_str().unwrap(),
    ]));
    assert!(
        sweep.contains("gain dataset=mnist kind=clamped_additive"),
        "{sweep}"
    );
    let records = std::fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    assert_eq!(
        records.lines().next().unwrap(),
        "dataset,kind,severity,model,accuracy"
    );
    // (10 clamped + 7 blur severities) x 2 models.
    assert_eq!(records.lines().count(), 1 + 2 * 17);
    assert!(sweep_dir.join("gains.csv").exists());
    assert_eq!(
        &std::fs::read(sweep_dir.join("sweep.png")).unwrap()[..4],
        b"\x89PNG"
    );

    let grid = dir.path().join("grid.png");
    let text = ok(&ibcaps(&[
        "reconstruct",
        "--data-dir",
        root,
        "--checkpoint",
        a,
        "--checkpoint",
        b,
        "--samples",
        "0,1,2",
        "--drift-samples",
        "4",
        "--out",
        grid.to_str().unwrap(),
    ]));
    assert!(text.contains("drift model=capsnet"), "{text}");
    assert!(text.contains("drift model=ibcapsnet"));
    assert_eq!(&std::fs::read(&grid).unwrap()[..4], b"\x89PNG");
    let legend = std::fs::read_to_string(dir.path().join("grid.png.legend.txt")).unwrap();
    assert!(legend.contains("block 0") && legend.contains("= capsnet"));
    assert!(legend.contains("Clmp 0.50"));
    let o = ibcaps(&[
        "reconstruct",
        "--data-dir",
        root,
        "--checkpoint",
        a,
        "--samples",
        "8",
        "--out",
        grid.to_str().unwrap(),
    ]);
    assert!(stderr(&o).contains("error[input]"), "{}", stderr(&o));
}
