//! Experiment harness for studying how conditional diffusion models learn
//! ordered latent manifolds on a synthetic Gaussian-bump task.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`bumpdata`] — exact Gaussian-bump image synthesis on parametric grids,
//!   hole masks, and neighbor-overlap statistics.
//! - [`nnops`] — fused CPU kernels (im2col convolution, GELU, group norm)
//!   used by the network; everything else rides on candle's autodiff.
//! - [`condunet`] — the conditional UNet noise predictor with positional-
//!   encoding conditioning and a named activation tap.
//! - [`ddpm`] — noise schedule, forward corruption, training objective,
//!   ancestral sampler, and the training loop.
//! - [`imgeval`] — bump-center recovery from generated images (Otsu +
//!   connected regions), accuracy, and failure-mode classification.
//! - [`reprprobe`] — 3D embedding of tapped activations (UMAP, PCA
//!   fallback), linear-probe R², and phase classification.
//! - [`exprunner`] — multi-seed runs, phase-diagram sweeps, imbalanced-
//!   increment and hole experiments, metrics logging.

pub mod bumpdata;
pub mod condunet;
pub mod ddpm;
pub mod error;
pub mod exprunner;
pub mod imgeval;
pub mod nnops;
pub mod reprprobe;

pub use bumpdata::{BumpLabel, Dataset, GridConfig, HoleRect, Image};
pub use condunet::{ConditioningVector, NetworkConfig, UNet};
pub use ddpm::{DiffusionSchedule, TrainConfig};
pub use error::{Error, Result};
pub use exprunner::{MetricsRecord, RunConfig};
pub use imgeval::{BumpMode, FailureMode, GenerationOutcome, PredictedLabel};
pub use reprprobe::{EmbeddingSet, Phase, ProbeResult};
