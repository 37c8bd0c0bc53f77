//! Datasets, file decoders, the synthetic task generator, augmentation and
//! seeded batch iteration.

mod augment;
mod batch;
mod cifar;
mod idx;
mod synthetic;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment, augment_with, AugmentDraw, AUGMENT_PAD};
pub use batch::{batch_indices, iterate_batches, BatchIter};
pub use cifar::{
    encode_cifar_records, load_cifar_binary, parse_cifar_records, CifarVariant, RawCifar, CIFAR_IMAGE_BYTES,
};
pub use idx::{encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels, IdxImages};
pub use synthetic::{make_synthetic, synthetic_templates, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Per-channel mean and standard deviation used for normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[M × C × H × W]`, normalized when `stats` is set.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub stats: Option<ChannelStats>,
    /// CIFAR-100 coarse labels, kept so records can be written back.
    pub coarse_labels: Option<Vec<u8>>,
}

/// Images plus one-hot labels for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBatch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// `[N × num_classes]`
    pub onehot: Tensor<f32>,
    /// Dataset rows this batch was drawn from.
    pub indices: Vec<usize>,
    pub augmented: bool,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Dimension {
                op: "dataset",
                lhs: images.shape().to_vec(),
                rhs: vec![0; 4],
            });
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Dimension {
                op: "dataset",
                lhs: images.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if labels.is_empty() {
            return Err(Error::config("dataset must hold at least one sample"));
        }
        if num_classes < 2 {
            return Err(Error::config("dataset needs at least two classes"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::config(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split,
            stats: None,
            coarse_labels: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Per-channel mean and (population) standard deviation of the images.
    pub fn channel_stats(&self) -> ChannelStats {
        let [c, h, w] = self.image_shape();
        let hw = h * w;
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for (p, plane) in self.images.data().chunks(hw).enumerate() {
            for &v in plane {
                sum[p % c] += v as f64;
                sq[p % c] += (v as f64) * (v as f64);
            }
        }
        let count = (self.len() * hw) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / count - m * m).max(0.0)).sqrt().max(1e-8) as f32)
            .collect();
        ChannelStats {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    /// Applies `(x − mean) / std` per channel and records the stats.
    pub fn normalize_with(&mut self, stats: &ChannelStats) -> Result<()> {
        let [c, h, w] = self.image_shape();
        if self.stats.is_some() {
            return Err(Error::usage("dataset is already normalized"));
        }
        if stats.mean.len() != c || stats.std.len() != c {
            return Err(Error::Dimension {
                op: "normalize",
                lhs: vec![c],
                rhs: vec![stats.mean.len()],
            });
        }
        let hw = h * w;
        for (p, plane) in self.images.data_mut().chunks_mut(hw).enumerate() {
            let (m, s) = (stats.mean[p % c], stats.std[p % c]);
            for v in plane {
                *v = (*v - m) / s;
            }
        }
        self.stats = Some(stats.clone());
        Ok(())
    }

    /// Gathers rows `indices` into a batch with one-hot labels.
    pub fn batch(&self, indices: &[usize]) -> DatasetBatch {
        let images = self.images.gather_rows(indices);
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        DatasetBatch {
            onehot: one_hot(&labels, self.num_classes),
            images,
            labels,
            indices: indices.to_vec(),
            augmented: false,
        }
    }

    /// The first `n` samples as a dataset of its own.
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let mut d = self.clone();
        d.images = self.images.gather_rows(&idx);
        d.labels.truncate(idx.len());
        if let Some(c) = d.coarse_labels.as_mut() {
            c.truncate(idx.len());
        }
        d
    }
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Tensor<f32> {
    let mut data = vec![0f32; labels.len() * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * num_classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), num_classes], data).expect("one-hot shape")
}

/// Deterministic generator for a `(seed, stream)` pair, so that e.g. the
/// randomness of batch `b` in epoch `e` does not depend on what ran before.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
