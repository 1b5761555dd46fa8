//! `IBCP` checkpoint container.
//!
//! Layout, little-endian: `"IBCP"`, version `u32`, metadata length `u32`
//! followed by UTF-8 `key = value` lines, tensor count `u32`, then per tensor:
//! name length `u32`, name, dtype tag `u8`, rank `u8`, dims as `u32`, payload.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{kv_to_text, parse_kv, TrainConfig};
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::model::{ArchConfig, Model, ModelKind, ModelVariantFlags};
use crate::nn::Parameters;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IBCP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                source_name: self.source.into(),
                expected: self.pos.saturating_add(n),
                actual: self.bytes.len(),
                offset: self.pos,
            }),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| err(format!("missing metadata key {key}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = kv_to_text(&self.meta);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE.tag());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        out
    }

    /// Parses a checkpoint, converting stored tensors to `T` if needed.
    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            source,
        };
        if r.take(4)? != MAGIC {
            return Err(err(format!("{source}: bad magic, expected IBCP")));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(err(format!("{source}: unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| err(format!("{source}: metadata is not UTF-8")))?;
        let meta = parse_kv(meta_text, source)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| err("tensor name is not UTF-8"))?;
            let tag = r.u8()?;
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| err(format!("{name}: unknown dtype tag {tag}")))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let len: usize = shape.iter().product();
            let payload = r.take(len * dtype.size())?;
            let data: Vec<T> = match dtype {
                DType::F32 => payload
                    .chunks_exact(4)
                    .map(|c| T::lit(f32::read_le(c) as f64))
                    .collect(),
                DType::F64 => payload
                    .chunks_exact(8)
                    .map(|c| T::lit(f64::read_le(c)))
                    .collect(),
            };
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(err(format!(
                "{source}: {} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write-then-rename so a crash never leaves a torn checkpoint.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    fn tensor_map<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a Tensor<T>)> + 'a {
        self.tensors
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|rest| (rest, t)))
    }
}

/// Everything needed to rebuild a model, and optionally resume training.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub adam: Adam<T>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub best_acc: Option<f64>,
    pub best_epoch: Option<usize>,
}

fn parse_meta<V: std::str::FromStr>(ckpt_value: &str, key: &str) -> Result<V> {
    ckpt_value
        .parse()
        .map_err(|_| err(format!("bad metadata value {ckpt_value:?} for {key}")))
}

impl<T: Scalar> TrainState<T> {
    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut meta: Vec<(String, String)> = vec![
            ("model.kind".into(), self.model.kind().to_string()),
            ("model.variant".into(), self.model.variant().slug().into()),
            ("epoch".into(), self.epoch.to_string()),
            ("step".into(), self.step.to_string()),
            (
                "best_acc".into(),
                self.best_acc.map_or("none".into(), |a| format!("{a:e}")),
            ),
            (
                "best_epoch".into(),
                self.best_epoch.map_or("none".into(), |e| e.to_string()),
            ),
            ("adam.t".into(), self.adam.t.to_string()),
            ("adam.lr".into(), format!("{:e}", self.adam.lr)),
        ];
        meta.extend(
            self.model
                .arch()
                .to_kv()
                .into_iter()
                .map(|(k, v)| (format!("arch.{k}"), v)),
        );
        meta.extend(
            self.config
                .to_kv()
                .into_iter()
                .map(|(k, v)| (format!("train.{k}"), v)),
        );
        let mut tensors = Vec::new();
        let mut names = Vec::new();
        self.model.visit(&mut |p| {
            names.push(p.name.clone());
            tensors.push((format!("param/{}", p.name), p.value.clone()));
        });
        for (n, m) in names.iter().zip(&self.adam.m) {
            tensors.push((format!("adam.m/{n}"), m.clone()));
        }
        for (n, v) in names.iter().zip(&self.adam.v) {
            tensors.push((format!("adam.v/{n}"), v.clone()));
        }
        Checkpoint { meta, tensors }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let strip = |prefix: &str| -> Vec<(String, String)> {
            ckpt.meta
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone())))
                .collect()
        };
        let arch = ArchConfig::from_kv(&strip("arch."))?;
        let config = TrainConfig::from_kv(&strip("train."), None)?;
        let kind: ModelKind = ckpt.require("model.kind")?.parse()?;
        let variant: ModelVariantFlags = ckpt.require("model.variant")?.parse()?;
        // Initial values are overwritten below; the seed only fixes allocation.
        let mut model = Model::new(kind, &arch, variant, &mut ChaCha8Rng::seed_from_u64(0))?;
        let params: Vec<(&str, &Tensor<T>)> = ckpt.tensor_map("param/").collect();
        let mut i = 0;
        let mut problem = None;
        model.visit_mut(&mut |p| {
            match params.get(i) {
                Some((name, t)) if *name == p.name && t.shape() == p.value.shape() => {
                    p.value = (*t).clone()
                }
                Some((name, t)) => {
                    problem.get_or_insert(format!(
                        "tensor {name} {:?} does not match {} {:?}",
                        t.shape(),
                        p.name,
                        p.value.shape()
                    ));
                }
                None => {
                    problem.get_or_insert(format!("missing tensor for {}", p.name));
                }
            }
            i += 1;
        });
        if let Some(p) = problem {
            return Err(err(p));
        }
        if i != params.len() {
            return Err(err(format!(
                "checkpoint has {} parameter tensors, model has {i}",
                params.len()
            )));
        }
        let mut adam = Adam::new(&model, parse_meta(ckpt.require("adam.lr")?, "adam.lr")?);
        adam.t = parse_meta(ckpt.require("adam.t")?, "adam.t")?;
        let m: Vec<Tensor<T>> = ckpt.tensor_map("adam.m/").map(|(_, t)| t.clone()).collect();
        let v: Vec<Tensor<T>> = ckpt.tensor_map("adam.v/").map(|(_, t)| t.clone()).collect();
        if !m.is_empty() || !v.is_empty() {
            let fits = |s: &[Tensor<T>]| {
                s.len() == adam.m.len()
                    && s.iter().zip(&adam.m).all(|(a, b)| a.shape() == b.shape())
            };
            if !fits(&m) || !fits(&v) {
                return Err(err("optimizer state does not match the model"));
            }
            adam.m = m;
            adam.v = v;
        }
        let opt_f64 = |key: &str| -> Result<Option<f64>> {
            match ckpt.require(key)? {
                "none" => Ok(None),
                s => parse_meta(s, key).map(Some),
            }
        };
        let best_epoch = match ckpt.require("best_epoch")? {
            "none" => None,
            s => Some(parse_meta(s, "best_epoch")?),
        };
        Ok(TrainState {
            config,
            model,
            adam,
            epoch: parse_meta(ckpt.require("epoch")?, "epoch")?,
            step: parse_meta(ckpt.require("step")?, "step")?,
            best_acc: opt_f64("best_acc")?,
            best_epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetName;

    fn state() -> TrainState<f32> {
        let arch = ArchConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::new(
            ModelKind::IbCapsNet,
            &arch,
            ModelVariantFlags::FULL,
            &mut rng,
        )
        .unwrap();
        let mut adam = Adam::new(&model, 1e-3);
        adam.t = 17;
        for (i, m) in adam.m.iter_mut().enumerate() {
            m.fill(i as f32 * 0.25);
        }
        TrainState {
            config: TrainConfig::new(DatasetName::Mnist, ModelKind::IbCapsNet),
            model,
            adam,
            epoch: 3,
            step: 1404,
            best_acc: Some(0.9876),
            best_epoch: Some(2),
        }
    }

    #[test]
    fn byte_exact_round_trip() {
        let s = state();
        let bytes = s.to_checkpoint().to_bytes();
        assert_eq!(&bytes[..4], b"IBCP");
        let ck = Checkpoint::<f32>::from_bytes(&bytes, "mem").unwrap();
        let back = TrainState::from_checkpoint(&ck).unwrap();
        assert_eq!(back.to_checkpoint().to_bytes(), bytes);
        assert_eq!(back.epoch, 3);
        assert_eq!(back.step, 1404);
        assert_eq!(back.best_acc, Some(0.9876));
        assert_eq!(back.adam, s.adam);
    }

    #[test]
    fn truncation_and_corruption_are_errors() {
        let bytes = state().to_checkpoint().to_bytes();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::<f32>::from_bytes(&bytes[..cut], "mem").is_err());
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad, "mem").is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::<f32>::from_bytes(&extra, "mem").is_err());
    }

    #[test]
    fn loads_across_precisions() {
        let bytes = state().to_checkpoint().to_bytes();
        let wide = Checkpoint::<f64>::from_bytes(&bytes, "mem").unwrap();
        let s64 = TrainState::from_checkpoint(&wide).unwrap();
        let mut a = Vec::new();
        s64.model
            .visit(&mut |p| a.extend(p.value.data().iter().map(|&x| x as f32)));
        let mut b = Vec::new();
        state()
            .model
            .visit(&mut |p| b.extend_from_slice(p.value.data()));
        assert_eq!(a, b);
    }
}
