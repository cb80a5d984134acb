//! Unified anomaly synthesis for unsupervised industrial anomaly detection.
//!
//! The crate is `no_std` (it only needs `alloc`) and holds every algorithmic
//! piece of the pipeline:
//!
//! - [`ndgrad`]: dense tensors with define-by-run reverse-mode differentiation
//!   and an Adam optimizer.
//! - [`featpipe`]: neighborhood aggregation, level merging, the feature adaptor
//!   and a handcrafted toy extractor standing in for a pretrained backbone.
//! - [`las`]: image-level local anomaly synthesis (Perlin masks, mask algebra,
//!   texture augmentation, transparency fusion).
//! - [`gas`]: feature-level global anomaly synthesis (Gaussian noise,
//!   normalized gradient ascent, truncated projection on a manifold or a
//!   hypersphere).
//! - [`model`]: the discriminator, the three branch losses and the trainer.
//! - [`infer`]: score maps and image scores.
//! - [`hypothesis`]: spectrogram compactness to choose manifold or hypersphere.
//! - [`metrics`]: AUROC, PRO and score histograms.
//!
//! IO, file formats and the command line live in the `glass` crate.
#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod error;
pub mod featpipe;
pub mod gas;
pub mod hypothesis;
pub mod image;
pub mod infer;
pub mod las;
pub mod metrics;
pub mod model;
pub mod ndgrad;
pub mod pipeline;
pub mod rng;
pub mod synthetic;

pub use error::{Error, Result};
pub use featpipe::{FeatureMap, LevelFeatures};
pub use gas::{GasConfig, Hypothesis};
pub use image::{GrayF64, ImageU8, Mask};
pub use model::{Discriminator, TrainConfig, Trainer};
pub use ndgrad::{Adam, Tape, Tensor, Var};
