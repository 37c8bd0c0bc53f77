//! Knowledge distillation with feature maps (KDFM) at desk scale.
//!
//! A student feature extractor `G` learns the last-layer feature maps of a
//! frozen teacher `T` through an LSGAN game against a discriminator `D`,
//! while a shared classifier `C` is trained on both feature maps. Classic
//! KD, logits mimic and plain cross-entropy baselines share the same
//! trainer so all four methods can be compared on equal footing.

pub mod data;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Scalar, Tensor, Var};
