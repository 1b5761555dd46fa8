//! Seeded input corruptions applied in `[0, 1]` pixel space.
//!
//! Every corruption is a pure function of `(image, spec)`. Batches derive a
//! per-sample seed from `(spec.seed, sample_index)` so the corruption of a
//! sample does not depend on which batch it lands in.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NOISE_MAX: f64 = 0.9;
pub const BLUR_SIGMA_MAX: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorruptionKind {
    ClampedAdditive,
    Multiplicative,
    GaussianBlur,
    SaltPepper,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::ClampedAdditive,
        CorruptionKind::Multiplicative,
        CorruptionKind::GaussianBlur,
        CorruptionKind::SaltPepper,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CorruptionKind::ClampedAdditive => "clamped_additive",
            CorruptionKind::Multiplicative => "multiplicative",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::SaltPepper => "salt_pepper",
        }
    }

    pub fn max_severity(&self) -> f64 {
        match self {
            CorruptionKind::GaussianBlur => BLUR_SIGMA_MAX,
            _ => NOISE_MAX,
        }
    }

    /// Parses a comma-separated list, or `all`.
    pub fn parse_list(s: &str) -> Result<Vec<CorruptionKind>> {
        if s.trim() == "all" {
            return Ok(Self::ALL.to_vec());
        }
        s.split(',').map(|p| p.trim().parse()).collect()
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clamped_additive" | "clamped" => Ok(CorruptionKind::ClampedAdditive),
            "multiplicative" => Ok(CorruptionKind::Multiplicative),
            "gaussian_blur" | "blur" => Ok(CorruptionKind::GaussianBlur),
            "salt_pepper" => Ok(CorruptionKind::SaltPepper),
            other => Err(Error::parse(
                "corruption kind",
                format!("unknown kind {other:?}"),
            )),
        }
    }
}

/// Distribution of the intensity noise `eps` for the additive and
/// multiplicative kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseShape {
    /// `eps ~ U(-1, 1)`, so the severity bounds the perturbation.
    #[default]
    Uniform,
    /// `eps ~ N(0, 1)`.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: f64,
    pub seed: u64,
    pub noise: NoiseShape,
}

/// Channel/height/width of one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageDims {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// SplitMix64 finalizer over `(seed, index)`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        ^ index
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: f64, seed: u64) -> Result<Self> {
        let spec = CorruptionSpec {
            kind,
            severity,
            seed,
            noise: NoiseShape::Uniform,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let max = self.kind.max_severity();
        if !(self.severity >= 0.0 && self.severity <= max + 1e-12) {
            return Err(Error::Severity {
                kind: self.kind.to_string(),
                severity: self.severity,
                min: 0.0,
                max,
            });
        }
        Ok(())
    }

    /// Spec used for the `index`-th sample of a dataset.
    pub fn for_sample(&self, index: u64) -> Self {
        CorruptionSpec {
            seed: sample_seed(self.seed, index),
            ..*self
        }
    }

    pub fn apply<T: Scalar>(&self, image: &[T], dims: ImageDims) -> Result<Vec<T>> {
        match self.kind {
            CorruptionKind::ClampedAdditive => clamped_additive(image, self),
            CorruptionKind::Multiplicative => multiplicative(image, self),
            CorruptionKind::GaussianBlur => gaussian_blur(image, dims, self),
            CorruptionKind::SaltPepper => salt_pepper(image, dims, self),
        }
    }

    /// Corrupts a `[batch, ch, H, W]` tensor whose first sample has dataset
    /// index `first_index`.
    pub fn apply_batch<T: Scalar>(
        &self,
        images: &Tensor<T>,
        first_index: usize,
    ) -> Result<Tensor<T>> {
        self.validate()?;
        let s = images.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!(
                "expected [batch, ch, H, W], got {s:?}"
            )));
        }
        let dims = ImageDims {
            channels: s[1],
            height: s[2],
            width: s[3],
        };
        let mut out = Vec::with_capacity(images.len());
        for b in 0..s[0] {
            let spec = self.for_sample((first_index + b) as u64);
            out.extend(spec.apply(images.row(b), dims)?);
        }
        Tensor::from_vec(s, out)
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    fn draw_eps<R: Rng>(&self, rng: &mut R) -> f64 {
        match self.noise {
            NoiseShape::Uniform => rng.gen_range(-1.0..1.0),
            NoiseShape::Gaussian => StandardNormal.sample(rng),
        }
    }
}

impl fmt::Display for CorruptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:.2}:{}", self.kind, self.severity, self.seed)?;
        if self.noise == NoiseShape::Gaussian {
            f.write_str(":gaussian")?;
        }
        Ok(())
    }
}

impl FromStr for CorruptionSpec {
    type Err = Error;

    /// `kind:severity:seed[:uniform|gaussian]`, e.g. `salt_pepper:0.30:42`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if !(3..=4).contains(&parts.len()) {
            return Err(Error::parse(
                "corruption spec",
                format!("expected kind:severity:seed, got {s:?}"),
            ));
        }
        let kind = parts[0].parse()?;
        let severity = parts[1]
            .parse()
            .map_err(|_| Error::parse("corruption spec", format!("bad severity {:?}", parts[1])))?;
        let seed = parts[2]
            .parse()
            .map_err(|_| Error::parse("corruption spec", format!("bad seed {:?}", parts[2])))?;
        let noise = match parts.get(3) {
            None | Some(&"uniform") => NoiseShape::Uniform,
            Some(&"gaussian") => NoiseShape::Gaussian,
            Some(other) => {
                return Err(Error::parse(
                    "corruption spec",
                    format!("bad noise shape {other:?}"),
                ))
            }
        };
        let spec = CorruptionSpec {
            kind,
            severity,
            seed,
            noise,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn check_kind(spec: &CorruptionSpec, kind: CorruptionKind) -> Result<()> {
    if spec.kind != kind {
        return Err(Error::Input(format!(
            "spec is {} but {} was requested",
            spec.kind, kind
        )));
    }
    spec.validate()
}

fn clamp01<T: Scalar>(v: f64) -> T {
    T::lit(v.clamp(0.0, 1.0))
}

/// `clamp(x + severity * eps, 0, 1)`.
pub fn clamped_additive<T: Scalar>(image: &[T], spec: &CorruptionSpec) -> Result<Vec<T>> {
    check_kind(spec, CorruptionKind::ClampedAdditive)?;
    if spec.severity == 0.0 {
        return Ok(image.to_vec());
    }
    let mut rng = spec.rng();
    Ok(image
        .iter()
        .map(|&x| clamp01(x.as_f64() + spec.severity * spec.draw_eps(&mut rng)))
        .collect())
}

/// `clamp(x * (1 + severity * eps), 0, 1)`.
pub fn multiplicative<T: Scalar>(image: &[T], spec: &CorruptionSpec) -> Result<Vec<T>> {
    check_kind(spec, CorruptionKind::Multiplicative)?;
    if spec.severity == 0.0 {
        return Ok(image.to_vec());
    }
    let mut rng = spec.rng();
    Ok(image
        .iter()
        .map(|&x| clamp01(x.as_f64() * (1.0 + spec.severity * spec.draw_eps(&mut rng))))
        .collect())
}

/// Normalized 1-D Gaussian taps, radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut w: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= sum);
    w
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge.
pub fn reflect_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as i64;
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Separable Gaussian blur with reflect padding; severity is sigma.
pub fn gaussian_blur<T: Scalar>(
    image: &[T],
    dims: ImageDims,
    spec: &CorruptionSpec,
) -> Result<Vec<T>> {
    check_kind(spec, CorruptionKind::GaussianBlur)?;
    if image.len() != dims.len() {
        return Err(Error::Shape(format!(
            "image has {} values, dims need {}",
            image.len(),
            dims.len()
        )));
    }
    if spec.severity == 0.0 {
        return Ok(image.to_vec());
    }
    let kernel = gaussian_kernel(spec.severity);
    let r = (kernel.len() / 2) as i64;
    let (h, w) = (dims.height, dims.width);
    let mut out = Vec::with_capacity(image.len());
    for plane in image.chunks_exact(h * w) {
        let src: Vec<f64> = plane.iter().map(|x| x.as_f64()).collect();
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(t, &k)| k * src[y * w + reflect_index(x as i64 + t as i64 - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(t, &k)| k * tmp[reflect_index(y as i64 + t as i64 - r, h) * w + x])
                    .sum();
                out.push(T::lit(v));
            }
        }
    }
    Ok(out)
}

/// Replaces each pixel location (all channels together) with probability
/// `severity` by 0 or 1, chosen with equal probability.
pub fn salt_pepper<T: Scalar>(
    image: &[T],
    dims: ImageDims,
    spec: &CorruptionSpec,
) -> Result<Vec<T>> {
    check_kind(spec, CorruptionKind::SaltPepper)?;
    if image.len() != dims.len() {
        return Err(Error::Shape(format!(
            "image has {} values, dims need {}",
            image.len(),
            dims.len()
        )));
    }
    let mut out = image.to_vec();
    if spec.severity == 0.0 {
        return Ok(out);
    }
    let mut rng = spec.rng();
    let plane = dims.height * dims.width;
    for p in 0..plane {
        let hit = rng.gen::<f64>() < spec.severity;
        let salt = rng.gen::<bool>();
        if hit {
            let v = if salt { T::one() } else { T::zero() };
            for c in 0..dims.channels {
                out[c * plane + p] = v;
            }
        }
    }
    Ok(out)
}

/// Evaluation grid: `0.0..=0.9` step 0.1 for noise, `0.0..=3.0` step 0.5
/// for blur.
pub fn severity_grid(kind: CorruptionKind) -> Vec<f64> {
    match kind {
        CorruptionKind::GaussianBlur => (0..=6).map(|i| i as f64 * 0.5).collect(),
        _ => (0..=9).map(|i| i as f64 / 10.0).collect(),
    }
}

/// Draws a random-severity spec for training-time augmentation.
pub fn random_spec<R: Rng + ?Sized>(kind: CorruptionKind, rng: &mut R) -> CorruptionSpec {
    CorruptionSpec {
        kind,
        severity: rng.gen_range(0.0..=kind.max_severity()),
        seed: rng.gen(),
        noise: NoiseShape::Uniform,
    }
}
