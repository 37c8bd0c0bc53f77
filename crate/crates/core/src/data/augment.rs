use rand::Rng;

use super::DatasetBatch;
use crate::tensor::Tensor;

/// Zero padding added on each side before the random crop.
pub const AUGMENT_PAD: usize = 4;

/// One image's random choices: crop offsets into the padded image
/// (`0..=2·AUGMENT_PAD`) and whether to mirror horizontally.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl AugmentDraw {
    /// Center crop, no flip: the identity transform.
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        dy: AUGMENT_PAD,
        dx: AUGMENT_PAD,
        flip: false,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentDraw {
            dy: rng.random_range(0..=2 * AUGMENT_PAD),
            dx: rng.random_range(0..=2 * AUGMENT_PAD),
            flip: rng.random_bool(0.5),
        }
    }
}

/// Pad-4 / random-crop / random horizontal flip, labels untouched.
pub fn augment<R: Rng + ?Sized>(batch: &DatasetBatch, rng: &mut R) -> DatasetBatch {
    let draws: Vec<AugmentDraw> = (0..batch.labels.len()).map(|_| AugmentDraw::sample(rng)).collect();
    augment_with(batch, &draws)
}

/// Applies explicit per-image draws.
pub fn augment_with(batch: &DatasetBatch, draws: &[AugmentDraw]) -> DatasetBatch {
    let shape = batch.images.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert_eq!(draws.len(), n, "one draw per image");
    let src = batch.images.data();
    let mut out = vec![0f32; src.len()];
    for (b, d) in draws.iter().enumerate() {
        for ch in 0..c {
            let plane = (b * c + ch) * h * w;
            for y in 0..h {
                // Row y of the crop is row (y + dy - pad) of the original.
                let sy = (y + d.dy) as isize - AUGMENT_PAD as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let cx = if d.flip { w - 1 - x } else { x };
                    let sx = (cx + d.dx) as isize - AUGMENT_PAD as isize;
                    if sx >= 0 && sx < w as isize {
                        out[plane + y * w + x] = src[plane + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    DatasetBatch {
        images: Tensor::new(shape.to_vec(), out).expect("same shape"),
        labels: batch.labels.clone(),
        onehot: batch.onehot.clone(),
        indices: batch.indices.clone(),
        augmented: true,
    }
}
