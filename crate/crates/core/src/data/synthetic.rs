use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{rng_for, Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters of the seeded template-plus-noise classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise_std: f64,
    /// Scale of the class template relative to mid-gray.
    pub contrast: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 4,
            samples_per_class: 500,
            image_size: 16,
            channels: 3,
            noise_std: 0.3,
            contrast: 0.15,
            seed: 0,
        }
    }
}

const TRAIN_FRACTION: f64 = 0.8;

/// Per-channel weights of the ramp and blob components.
const RAMP_GAIN: [f64; 3] = [1.0, 0.5, -0.5];
const BLOB_GAIN: [f64; 3] = [0.5, -1.0, 1.0];

/// Noise-free class templates in pixel space (`[0, 1]`), one `[C×S×S]`
/// tensor per class: an oriented linear ramp plus a Gaussian blob whose
/// position rotates with the class.
pub fn synthetic_templates(spec: &SyntheticSpec) -> Vec<Tensor<f32>> {
    let s = spec.image_size;
    let centre = (s as f64 - 1.0) / 2.0;
    let half = (s as f64 / 2.0).max(1.0);
    let sigma = (s as f64 / 6.0).max(0.5);
    (0..spec.num_classes)
        .map(|k| {
            let theta = 2.0 * PI * k as f64 / spec.num_classes as f64;
            let (bx, by) = (
                centre + 0.25 * s as f64 * (theta + PI / 3.0).cos(),
                centre + 0.25 * s as f64 * (theta + PI / 3.0).sin(),
            );
            Tensor::from_fn(vec![spec.channels, s, s], |i| {
                let c = i / (s * s);
                let (y, x) = (((i / s) % s) as f64, (i % s) as f64);
                let ramp = (((x - centre) * theta.cos() + (y - centre) * theta.sin()) / half).clamp(-1.0, 1.0);
                let d2 = (x - bx).powi(2) + (y - by).powi(2);
                let blob = (-d2 / (2.0 * sigma * sigma)).exp();
                let v = RAMP_GAIN[c % 3] * ramp + BLOB_GAIN[c % 3] * (2.0 * blob - 0.5);
                (0.5 + spec.contrast * 0.5 * v).clamp(0.0, 1.0) as f32
            })
        })
        .collect()
}

/// Seeded synthetic dataset with a stratified 80/20 train/test split.
/// Both splits are normalized with train-split channel statistics.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    if spec.num_classes < 2 || spec.samples_per_class < 2 || spec.image_size == 0 || spec.channels == 0 {
        return Err(Error::config(format!(
            "synthetic task needs ≥2 classes, ≥2 samples per class and a non-empty image: {spec:?}"
        )));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::config("noise_std must be finite and non-negative"));
    }
    let templates = synthetic_templates(spec);
    let per_image = spec.channels * spec.image_size * spec.image_size;
    let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
    let n_train =
        ((spec.samples_per_class as f64 * TRAIN_FRACTION).round() as usize).clamp(1, spec.samples_per_class - 1);

    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for (k, template) in templates.iter().enumerate() {
        let mut rng = rng_for(spec.seed, k as u64);
        let mut samples: Vec<Vec<f32>> = (0..spec.samples_per_class)
            .map(|_| {
                template
                    .data()
                    .iter()
                    .map(|&t| {
                        let n = if spec.noise_std > 0.0 {
                            noise.sample(&mut rng)
                        } else {
                            0.0
                        };
                        (t as f64 + n).clamp(0.0, 1.0) as f32
                    })
                    .collect()
            })
            .collect();
        samples.shuffle(&mut rng);
        for (i, img) in samples.into_iter().enumerate() {
            let dst = if i < n_train { &mut train } else { &mut test };
            dst.0.extend(img);
            dst.1.push(k);
        }
    }
    let build = |(pixels, labels): (Vec<f32>, Vec<usize>), split| -> Result<Dataset> {
        let m = labels.len();
        debug_assert_eq!(pixels.len(), m * per_image);
        let images = Tensor::new(vec![m, spec.channels, spec.image_size, spec.image_size], pixels)?;
        Dataset::new(images, labels, spec.num_classes, split)
    };
    let mut train = build(train, Split::Train)?;
    let mut test = build(test, Split::Test)?;
    let stats = train.channel_stats();
    train.normalize_with(&stats)?;
    test.normalize_with(&stats)?;
    Ok((train, test))
}
