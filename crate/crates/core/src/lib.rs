//! Semi-supervised semantic segmentation with two decoupled branches.
//!
//! * [`s4gan`]: a segmentation network trained as the generator of a GAN
//!   against an image-wise discriminator, with cross-entropy on labeled
//!   images, feature matching on unlabeled ones, and self-training on
//!   predictions the discriminator accepts.
//! * [`mlmt`]: a multi-label mean-teacher classifier whose image-level class
//!   probabilities switch off segmentation channels at [`fusion`] time.
//!
//! [`synth`] provides a deterministic shapes dataset so the whole pipeline
//! can be exercised on a CPU.

pub mod augment;
pub mod error;
pub mod fusion;
pub mod hparams;
pub mod manifest;
pub mod metrics;
pub mod mlmt;
pub mod rng;
pub mod s4gan;
pub mod sample;
pub mod schedule;
pub mod split;
pub mod synth;

pub use error::{Error, Result};
pub use hparams::HyperParams;
pub use sample::{ClassVector, ImageTensor, LabelMask, SegmentationSample};
