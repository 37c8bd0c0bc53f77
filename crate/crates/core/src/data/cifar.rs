use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 32×32 pixels × 3 planes (R, then G, then B).
pub const CIFAR_IMAGE_BYTES: usize = 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + CIFAR_IMAGE_BYTES,
            CifarVariant::Cifar100 => 2 + CIFAR_IMAGE_BYTES,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    fn train_files(self) -> &'static [&'static str] {
        match self {
            CifarVariant::Cifar10 => &[
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            CifarVariant::Cifar100 => &["train.bin"],
        }
    }

    fn test_file(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "test_batch.bin",
            CifarVariant::Cifar100 => "test.bin",
        }
    }
}

/// Undecoded record fields.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RawCifar {
    /// The label used for training (the fine label for CIFAR-100).
    pub labels: Vec<u8>,
    pub coarse: Option<Vec<u8>>,
    /// `records × 3072` bytes, planes in R, G, B order.
    pub pixels: Vec<u8>,
}

impl RawCifar {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn extend(&mut self, other: RawCifar) {
        self.labels.extend(other.labels);
        match (&mut self.coarse, other.coarse) {
            (Some(a), Some(b)) => a.extend(b),
            (slot @ None, Some(b)) if self.pixels.is_empty() => *slot = Some(b),
            _ => {}
        }
        self.pixels.extend(other.pixels);
    }

    /// Scales pixels to `[0, 1]`.
    pub fn to_dataset(&self, variant: CifarVariant, split: Split) -> Result<Dataset> {
        let images = Tensor::new(
            vec![self.len(), 3, 32, 32],
            self.pixels.iter().map(|&b| b as f32 / 255.0).collect(),
        )?;
        let labels = self.labels.iter().map(|&l| l as usize).collect();
        let mut d = Dataset::new(images, labels, variant.num_classes(), split)?;
        d.coarse_labels = self.coarse.clone();
        Ok(d)
    }
}

/// Decodes a whole CIFAR binary batch file.
pub fn parse_cifar_records(bytes: &[u8], variant: CifarVariant) -> Result<RawCifar> {
    let rec = variant.record_len();
    if bytes.is_empty() {
        return Err(Error::Format {
            offset: 0,
            reason: "empty CIFAR batch".into(),
        });
    }
    if !bytes.len().is_multiple_of(rec) {
        let offset = (bytes.len() / rec * rec) as u64;
        return Err(Error::Format {
            offset,
            reason: format!(
                "trailing partial record: {} bytes is not a multiple of {rec}",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / rec;
    let mut raw = RawCifar {
        labels: Vec::with_capacity(n),
        coarse: (variant == CifarVariant::Cifar100).then(|| Vec::with_capacity(n)),
        pixels: Vec::with_capacity(n * CIFAR_IMAGE_BYTES),
    };
    for (i, record) in bytes.chunks_exact(rec).enumerate() {
        let offset = (i * rec) as u64;
        let (label, pixels) = match variant {
            CifarVariant::Cifar10 => (record[0], &record[1..]),
            CifarVariant::Cifar100 => {
                if record[0] >= 20 {
                    return Err(Error::Format {
                        offset,
                        reason: format!("coarse label {} out of range", record[0]),
                    });
                }
                raw.coarse.as_mut().expect("cifar100").push(record[0]);
                (record[1], &record[2..])
            }
        };
        if label as usize >= variant.num_classes() {
            return Err(Error::Format {
                offset,
                reason: format!("label {label} out of range"),
            });
        }
        raw.labels.push(label);
        raw.pixels.extend_from_slice(pixels);
    }
    Ok(raw)
}

/// Inverse of [`parse_cifar_records`].
pub fn encode_cifar_records(raw: &RawCifar, variant: CifarVariant) -> Result<Vec<u8>> {
    if raw.pixels.len() != raw.len() * CIFAR_IMAGE_BYTES {
        return Err(Error::usage("pixel buffer does not match record count"));
    }
    let mut out = Vec::with_capacity(raw.len() * variant.record_len());
    for (i, px) in raw.pixels.chunks_exact(CIFAR_IMAGE_BYTES).enumerate() {
        if variant == CifarVariant::Cifar100 {
            let coarse = raw
                .coarse
                .as_ref()
                .ok_or_else(|| Error::usage("CIFAR-100 records need coarse labels"))?;
            out.push(coarse[i]);
        }
        out.push(raw.labels[i]);
        out.extend_from_slice(px);
    }
    Ok(out)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads the standard train/test batch files from `dir`, scales pixels to
/// `[0, 1]` and normalizes both splits with train-split channel statistics.
pub fn load_cifar_binary(dir: impl AsRef<Path>, variant: CifarVariant) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let mut train_raw = RawCifar::default();
    for name in variant.train_files() {
        train_raw.extend(parse_cifar_records(&read_file(&dir.join(name))?, variant)?);
    }
    let test_raw = parse_cifar_records(&read_file(&dir.join(variant.test_file()))?, variant)?;
    let mut train = train_raw.to_dataset(variant, Split::Train)?;
    let mut test = test_raw.to_dataset(variant, Split::Test)?;
    let stats = train.channel_stats();
    train.normalize_with(&stats)?;
    test.normalize_with(&stats)?;
    Ok((train, test))
}

impl Dataset {
    /// Writes the dataset back out as CIFAR records, undoing normalization
    /// and the `[0, 1]` scaling.
    pub fn to_cifar_bytes(&self, variant: CifarVariant) -> Result<Vec<u8>> {
        if self.image_shape() != [3, 32, 32] {
            return Err(Error::usage(format!(
                "CIFAR records hold 3×32×32 images, dataset has {:?}",
                self.image_shape()
            )));
        }
        let hw = 32 * 32;
        let pixels = self
            .images
            .data()
            .chunks(hw)
            .enumerate()
            .flat_map(|(p, plane)| {
                let (m, s) = match &self.stats {
                    Some(st) => (st.mean[p % 3], st.std[p % 3]),
                    None => (0.0, 1.0),
                };
                plane
                    .iter()
                    .map(move |&v| ((v * s + m) * 255.0).round().clamp(0.0, 255.0) as u8)
            })
            .collect();
        let raw = RawCifar {
            labels: self.labels.iter().map(|&l| l as u8).collect(),
            coarse: self.coarse_labels.clone(),
            pixels,
        };
        encode_cifar_records(&raw, variant)
    }
}
