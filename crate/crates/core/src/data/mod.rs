//! Dataset readers, normalization and batching.

pub mod batch;
pub mod cifar;
pub mod container;
pub mod idx;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub use batch::{Batch, BatchIterator};
pub use cifar::parse_cifar10_binary;
pub use container::{read_container, write_container};
pub use idx::{parse_idx, IdxArray};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DATA_DIR_ENV: &str = "IBCAPS_DATA_DIR";

/// Images stored as bytes `[n, ch, H, W]` plus labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub num_classes: usize,
    dims: [usize; 3],
}

impl Dataset {
    pub fn new(
        name: &str,
        images: Vec<u8>,
        labels: Vec<u8>,
        dims: [usize; 3],
        num_classes: usize,
    ) -> Result<Self> {
        let per = dims.iter().product::<usize>();
        if labels.is_empty() {
            return Err(Error::Input(format!("{name}: empty dataset")));
        }
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::Shape(format!(
                "{name}: {} image bytes for {} labels of {:?}",
                images.len(),
                labels.len(),
                dims
            )));
        }
        if let Some((i, &l)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= num_classes)
        {
            return Err(Error::Input(format!(
                "{name}: label {l} at {i} >= {num_classes} classes"
            )));
        }
        Ok(Dataset {
            name: name.into(),
            images,
            labels,
            num_classes,
            dims,
        })
    }

    /// Builds from IDX image `[n, H, W]` and label `[n]` arrays.
    pub fn from_idx(
        name: &str,
        images: IdxArray,
        labels: IdxArray,
        num_classes: usize,
    ) -> Result<Self> {
        let dims = match *images.dims.as_slice() {
            [n, h, w] if labels.dims == [n] => [1, h, w],
            [n, c, h, w] if labels.dims == [n] => [c, h, w],
            _ => {
                return Err(Error::Shape(format!(
                    "{name}: image dims {:?} do not match label dims {:?}",
                    images.dims, labels.dims
                )))
            }
        };
        Dataset::new(name, images.data, labels.data, dims, num_classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[channels, height, width]`.
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn image_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let w = self.image_len();
        &self.images[i * w..(i + 1) * w]
    }

    /// The first `n` samples (the whole set if `n >= len`).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            name: self.name.clone(),
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
            dims: self.dims,
        }
    }

    /// Normalized `[len, ch, H, W]` tensor of the given samples.
    pub fn images_tensor<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&b| unit::<T>(b)));
        }
        let [c, h, w] = self.dims;
        Tensor::from_vec(&[indices.len(), c, h, w], data).expect("sizes agree")
    }

    /// One-hot `[len, classes]` labels of the given samples.
    pub fn one_hot<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let c = self.num_classes;
        let mut t = Tensor::zeros(&[indices.len(), c]);
        for (r, &i) in indices.iter().enumerate() {
            t.data_mut()[r * c + self.labels[i] as usize] = T::one();
        }
        t
    }

    pub fn label_indices(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i] as usize).collect()
    }
}

fn unit<T: Scalar>(b: u8) -> T {
    T::lit(b as f64) / T::lit(255.0)
}

/// Byte pixels to `[0, 1]` by division by 255.
pub fn to_unit_interval<T: Scalar>(images: &[u8]) -> Vec<T> {
    images.iter().map(|&b| unit(b)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetName {
    Mnist,
    FashionMnist,
    Svhn,
    Cifar10,
}

impl DatasetName {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fashion_mnist",
            DatasetName::Svhn => "svhn",
            DatasetName::Cifar10 => "cifar10",
        }
    }

    /// KL weight used for this dataset.
    pub fn default_kl_weight(&self) -> f64 {
        match self {
            DatasetName::Mnist | DatasetName::FashionMnist => 1e-3,
            DatasetName::Svhn | DatasetName::Cifar10 => 1e-2,
        }
    }

    /// `[channels, side]` of the images.
    pub fn geometry(&self) -> (usize, usize) {
        match self {
            DatasetName::Mnist | DatasetName::FashionMnist => (1, 28),
            DatasetName::Svhn | DatasetName::Cifar10 => (3, 32),
        }
    }

    /// Subdirectory of the data root holding this dataset.
    pub fn subdir(&self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fashion-mnist",
            DatasetName::Svhn => "svhn",
            DatasetName::Cifar10 => "cifar-10-batches-bin",
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mnist" => Ok(DatasetName::Mnist),
            "fashion_mnist" | "fmnist" => Ok(DatasetName::FashionMnist),
            "svhn" => Ok(DatasetName::Svhn),
            "cifar10" | "cifar_10" => Ok(DatasetName::Cifar10),
            other => Err(Error::parse(
                "dataset name",
                format!("unknown dataset {other:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Data root from `IBCAPS_DATA_DIR`, falling back to `./data`.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Loads a split from `root/<subdir>`:
///
/// * MNIST and Fashion-MNIST: `{train,t10k}-{images-idx3,labels-idx1}-ubyte`
/// * CIFAR-10: `data_batch_{1..5}.bin` and `test_batch.bin`
/// * SVHN: `{train,test}.ibds`
pub fn load(name: DatasetName, root: &Path, split: Split) -> Result<Dataset> {
    let dir = root.join(name.subdir());
    let label = format!("{}-{}", name, split.as_str());
    match name {
        DatasetName::Mnist | DatasetName::FashionMnist => {
            let prefix = match split {
                Split::Train => "train",
                Split::Test => "t10k",
            };
            let images = parse_idx(&dir.join(format!("{prefix}-images-idx3-ubyte")))?;
            let labels = parse_idx(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
            Dataset::from_idx(&label, images, labels, 10)
        }
        DatasetName::Cifar10 => {
            let files: Vec<PathBuf> = match split {
                Split::Train => (1..=5)
                    .map(|i| dir.join(format!("data_batch_{i}.bin")))
                    .collect(),
                Split::Test => vec![dir.join("test_batch.bin")],
            };
            parse_cifar10_binary(&files, &label)
        }
        DatasetName::Svhn => read_container(&dir.join(format!("{}.ibds", split.as_str())), &label),
    }
}
