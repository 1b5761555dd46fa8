//! CSV tables, raster images and the reconstruction comparison grid.
//!
//! Numbers are written with fixed precision so re-emitting identical records
//! is byte-identical.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use crate::corruption::{CorruptionKind, CorruptionSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::train::{AblationRow, EpochMetrics, EvalRecord, GainSummary};

pub const METRICS_HEADER: [&str; 6] = [
    "epoch",
    "loss_total",
    "loss_cls",
    "loss_recon",
    "loss_kl",
    "test_acc",
];
pub const SWEEP_HEADER: [&str; 5] = ["dataset", "kind", "severity", "model", "accuracy"];
pub const EVAL_HEADER: [&str; 7] = [
    "model",
    "dataset",
    "kind",
    "severity",
    "accuracy",
    "n_correct",
    "n_total",
];
pub const GAIN_HEADER: [&str; 5] = ["dataset", "kind", "candidate", "reference", "mean_gain_pct"];
pub const ABLATION_HEADER: [&str; 4] = ["variant", "severity", "clean_acc", "noisy_acc"];

/// Where corruption noise is applied; repeated in report headers.
pub const NOISE_SPACE_NOTE: &str =
    "corruptions applied in [0,1] pixel space before any normalization";

fn to_string(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w)?;
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Input(format!("csv flush: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn metrics_row(m: &EpochMetrics) -> [String; 6] {
    [
        m.epoch.to_string(),
        format!("{:.6}", m.loss_total),
        format!("{:.6}", m.loss_cls),
        format!("{:.6}", m.loss_recon),
        format!("{:.6}", m.loss_kl),
        format!("{:.4}", m.test_acc),
    ]
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> Result<String> {
    to_string(|w| {
        w.write_record(METRICS_HEADER)?;
        for m in rows {
            w.write_record(metrics_row(m))?;
        }
        Ok(())
    })
}

/// Appends one row, writing the header first if the file is new or empty.
pub fn append_metrics_csv(path: &Path, m: &EpochMetrics) -> Result<()> {
    let fresh = std::fs::metadata(path)
        .map(|md| md.len() == 0)
        .unwrap_or(true);
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let text = if fresh {
        metrics_csv(std::slice::from_ref(m))?
    } else {
        to_string(|w| Ok(w.write_record(metrics_row(m))?))?
    };
    file.write_all(text.as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn sweep_csv(records: &[EvalRecord]) -> Result<String> {
    to_string(|w| {
        w.write_record(SWEEP_HEADER)?;
        for r in records {
            w.write_record([
                r.dataset.clone(),
                r.kind.clone(),
                format!("{:.2}", r.severity),
                r.model.clone(),
                format!("{:.4}", r.accuracy),
            ])?;
        }
        Ok(())
    })
}

pub fn eval_csv(records: &[EvalRecord]) -> Result<String> {
    to_string(|w| {
        w.write_record(EVAL_HEADER)?;
        for r in records {
            w.write_record([
                r.model.clone(),
                r.dataset.clone(),
                r.kind.clone(),
                format!("{:.2}", r.severity),
                format!("{:.4}", r.accuracy),
                r.n_correct.to_string(),
                r.n_total.to_string(),
            ])?;
        }
        Ok(())
    })
}

pub fn gain_csv(gains: &[GainSummary]) -> Result<String> {
    to_string(|w| {
        w.write_record(GAIN_HEADER)?;
        for g in gains {
            w.write_record([
                g.dataset.clone(),
                g.kind.clone(),
                g.candidate.clone(),
                g.reference.clone(),
                format!("{:.2}", 100.0 * g.mean_gain),
            ])?;
        }
        Ok(())
    })
}

pub fn ablation_csv(rows: &[AblationRow], severity: f64) -> Result<String> {
    to_string(|w| {
        w.write_record(ABLATION_HEADER)?;
        for r in rows {
            w.write_record([
                r.variant.clone(),
                format!("{severity:.2}"),
                format!("{:.4}", r.clean_acc),
                format!("{:.4}", r.noisy_acc),
            ])?;
        }
        Ok(())
    })
}

/// Parses a sweep CSV back into records (model counts are not stored).
pub fn parse_sweep_csv(text: &str) -> Result<Vec<EvalRecord>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rd.headers()?.iter().map(String::from).collect();
    if header != SWEEP_HEADER {
        return Err(Error::parse(
            "sweep csv",
            format!("unexpected header {header:?}"),
        ));
    }
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let num = |i: usize| -> Result<f64> {
            row[i]
                .parse()
                .map_err(|_| Error::parse("sweep csv", format!("bad number {:?}", &row[i])))
        };
        out.push(EvalRecord {
            dataset: row[0].to_string(),
            kind: row[1].to_string(),
            severity: num(2)?,
            model: row[3].to_string(),
            accuracy: num(4)?,
            n_correct: 0,
            n_total: 0,
        });
    }
    Ok(out)
}

pub fn write_csv(path: &Path, text: &str) -> Result<()> {
    write_file(path, text)
}

/// 8-bit grayscale or RGB image, channel-interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 or 3.
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, fill: u8) -> Self {
        assert!(channels == 1 || channels == 3);
        Raster {
            width,
            height,
            channels,
            data: vec![fill; width * height * channels],
        }
    }

    pub fn put(&mut self, x: usize, y: usize, px: &[u8]) {
        if x < self.width && y < self.height {
            let o = (y * self.width + x) * self.channels;
            for c in 0..self.channels {
                self.data[o + c] = px[c.min(px.len() - 1)];
            }
        }
    }

    /// Pastes a channel-planar `[ch, h, w]` image with values in `[0, 1]`.
    pub fn blit_planar<T: Scalar>(
        &mut self,
        x0: usize,
        y0: usize,
        img: &[T],
        ch: usize,
        h: usize,
        w: usize,
    ) {
        for y in 0..h {
            for x in 0..w {
                let px: Vec<u8> = (0..ch)
                    .map(|c| {
                        (img[(c * h + y) * w + x].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
                    })
                    .collect();
                self.put(x0 + x, y0 + y, &px);
            }
        }
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(if self.channels == 1 {
                png::ColorType::Grayscale
            } else {
                png::ColorType::Rgb
            });
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header()?;
            w.write_image_data(&self.data)?;
        }
        Ok(out)
    }

    /// Binary PGM (`P5`) or PPM (`P6`).
    pub fn pnm_bytes(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// Writes PNG, or PGM/PPM when the extension is `pgm`, `ppm` or `pnm`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        let bytes = match ext.as_str() {
            "pgm" | "ppm" | "pnm" => self.pnm_bytes(),
            _ => self.png_bytes()?,
        };
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    GroundTruth,
    Recognition,
    Clamped,
    Gaussian,
    SaltPepper,
}

impl RowKind {
    pub const ALL: [RowKind; 5] = [
        RowKind::GroundTruth,
        RowKind::Recognition,
        RowKind::Clamped,
        RowKind::Gaussian,
        RowKind::SaltPepper,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            RowKind::GroundTruth => "GT",
            RowKind::Recognition => "Reco",
            RowKind::Clamped => "Clmp",
            RowKind::Gaussian => "Gaus",
            RowKind::SaltPepper => "S&P",
        }
    }

    fn corruption(&self) -> Option<CorruptionKind> {
        match self {
            RowKind::Clamped => Some(CorruptionKind::ClampedAdditive),
            RowKind::Gaussian => Some(CorruptionKind::GaussianBlur),
            RowKind::SaltPepper => Some(CorruptionKind::SaltPepper),
            _ => None,
        }
    }
}

/// Layout of the comparison grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub rows: Vec<RowKind>,
    pub samples: Vec<usize>,
    pub clamped_severity: f64,
    pub blur_sigma: f64,
    pub salt_pepper_rate: f64,
    pub seed: u64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            rows: RowKind::ALL.to_vec(),
            samples: (0..5).collect(),
            clamped_severity: 0.5,
            blur_sigma: 1.5,
            salt_pepper_rate: 0.3,
            seed: 0,
        }
    }
}

impl GridSpec {
    fn spec(&self, row: RowKind) -> Result<Option<CorruptionSpec>> {
        let Some(kind) = row.corruption() else {
            return Ok(None);
        };
        let severity = match kind {
            CorruptionKind::ClampedAdditive => self.clamped_severity,
            CorruptionKind::GaussianBlur => self.blur_sigma,
            _ => self.salt_pepper_rate,
        };
        CorruptionSpec::new(kind, severity, self.seed).map(Some)
    }
}

const PAD: usize = 2;
const GAP: usize = 8;

#[derive(Debug, Clone)]
pub struct Grid {
    pub image: Raster,
    pub legend: String,
    /// Cell origins `(x, y)` indexed `[model][row][sample]`.
    pub cells: Vec<Vec<Vec<(usize, usize)>>>,
}

/// Renders GT, clean reconstruction and reconstructions of corrupted inputs,
/// one block of columns per model (first model on the left).
pub fn reconstruction_grid<T: Scalar>(
    models: &[(&str, &Model<T>)],
    data: &Dataset,
    spec: &GridSpec,
) -> Result<Grid> {
    if let Some(&bad) = spec.samples.iter().find(|&&i| i >= data.len()) {
        return Err(Error::Input(format!(
            "sample index {bad} out of range for {} samples",
            data.len()
        )));
    }
    if spec.samples.is_empty() || spec.rows.is_empty() || models.is_empty() {
        return Err(Error::Input(
            "grid needs at least one sample, row and model".into(),
        ));
    }
    let [ch, h, w] = data.dims();
    let ns = spec.samples.len();
    let block_w = ns * (w + PAD) + PAD;
    let width = models.len() * block_w + (models.len() - 1) * GAP;
    let height = spec.rows.len() * (h + PAD) + PAD;
    let mut img = Raster::new(width, height, if ch == 3 { 3 } else { 1 }, 0);
    let clean = data.images_tensor::<T>(&spec.samples);
    let mut legend = String::new();
    let _ = writeln!(legend, "# reconstruction grid");
    let _ = writeln!(legend, "# {NOISE_SPACE_NOTE}");
    let _ = writeln!(
        legend,
        "# row severities are presentation choices: Clmp {:.2}, Gaus sigma {:.2}, S&P {:.2}, seed {}",
        spec.clamped_severity, spec.blur_sigma, spec.salt_pepper_rate, spec.seed
    );
    let _ = writeln!(legend, "samples = {:?}", spec.samples);
    let _ = writeln!(legend, "labels = {:?}", data.label_indices(&spec.samples));
    let mut cells = Vec::new();
    for (mi, (name, model)) in models.iter().enumerate() {
        let x_block = mi * (block_w + GAP);
        let _ = writeln!(
            legend,
            "block {mi} (x {x_block}..{}) = {name}",
            x_block + block_w
        );
        let mut model_cells = Vec::new();
        for (ri, row) in spec.rows.iter().enumerate() {
            let input = match spec.spec(*row)? {
                Some(s) => s.apply_batch(&clean, 0)?,
                None => clean.clone(),
            };
            let shown = if *row == RowKind::GroundTruth {
                input
            } else {
                let out = model.infer(&input)?;
                let _ = writeln!(
                    legend,
                    "row {ri} {} {name} predictions = {:?}",
                    row.label(),
                    out.predictions()
                );
                out.recon.ok_or_else(|| {
                    Error::Input(format!("{name} has no decoder to reconstruct with"))
                })?
            };
            let y = PAD + ri * (h + PAD);
            let mut row_cells = Vec::new();
            for s in 0..ns {
                let x = x_block + PAD + s * (w + PAD);
                img.blit_planar(x, y, shown.row(s), ch, h, w);
                row_cells.push((x, y));
            }
            model_cells.push(row_cells);
        }
        cells.push(model_cells);
    }
    for (ri, row) in spec.rows.iter().enumerate() {
        let _ = writeln!(legend, "row {ri} = {}", row.label());
    }
    Ok(Grid {
        image: img,
        legend,
        cells,
    })
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

fn line(img: &mut Raster, (x0, y0): (i64, i64), (x1, y1): (i64, i64), px: &[u8]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 {
            img.put(x as usize, y as usize, px);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// One panel per (dataset, kind): accuracy in `[0, 1]` against severity,
/// one colored polyline per model. Returns the raster and a text legend.
pub fn sweep_plot(records: &[EvalRecord]) -> Result<(Raster, String)> {
    if records.is_empty() {
        return Err(Error::Input("no records to plot".into()));
    }
    let mut panels: Vec<(String, String)> = Vec::new();
    let mut models: Vec<String> = Vec::new();
    for r in records {
        let p = (r.dataset.clone(), r.kind.clone());
        if !panels.contains(&p) {
            panels.push(p);
        }
        if !models.contains(&r.model) {
            models.push(r.model.clone());
        }
    }
    let (pw, ph, m) = (240usize, 180usize, 20usize);
    let cols = panels.len().min(4);
    let rows = panels.len().div_ceil(cols);
    let mut img = Raster::new(cols * pw, rows * ph, 3, 255);
    let mut legend = String::from("# accuracy vs severity; y axis spans [0, 1]\n");
    for (pi, (dataset, kind)) in panels.iter().enumerate() {
        let (ox, oy) = ((pi % cols) * pw, (pi / cols) * ph);
        let (x0, y0, x1, y1) = (
            (ox + m) as i64,
            (oy + ph - m) as i64,
            (ox + pw - m) as i64,
            (oy + m) as i64,
        );
        line(&mut img, (x0, y0), (x1, y0), &[0, 0, 0]);
        line(&mut img, (x0, y0), (x0, y1), &[0, 0, 0]);
        let pts: Vec<&EvalRecord> = records
            .iter()
            .filter(|r| &r.dataset == dataset && &r.kind == kind)
            .collect();
        let smax = pts
            .iter()
            .map(|r| r.severity)
            .fold(0.0f64, f64::max)
            .max(1e-9);
        let _ = writeln!(
            legend,
            "panel {pi} = {dataset} {kind} (severity 0..{smax:.2})"
        );
        for (mi, model) in models.iter().enumerate() {
            let mut series: Vec<(f64, f64)> = pts
                .iter()
                .filter(|r| &r.model == model)
                .map(|r| (r.severity, r.accuracy))
                .collect();
            series.sort_by(|a, b| a.0.total_cmp(&b.0));
            let to_px = |(s, a): (f64, f64)| {
                (
                    x0 + ((s / smax) * (x1 - x0) as f64).round() as i64,
                    y0 - (a.clamp(0.0, 1.0) * (y0 - y1) as f64).round() as i64,
                )
            };
            let color = PALETTE[mi % PALETTE.len()];
            for pair in series.windows(2) {
                line(&mut img, to_px(pair[0]), to_px(pair[1]), &color);
            }
            if pi == 0 {
                let _ = writeln!(legend, "color {color:?} = {model}");
            }
        }
    }
    Ok((img, legend))
}
