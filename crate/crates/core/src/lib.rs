//! Entropy-guided sparse refinement of high-resolution geometric predictions.
//!
//! A coarse low-resolution depth or pointmap estimate is upsampled to full
//! resolution, high-uncertainty pixels are selected by softmax entropy, a
//! sparse-convolutional U-shaped refiner predicts per-pixel residual
//! corrections at the selected sites only, and a learned gate blends the
//! correction back into the dense map.
//!
//! The crate is organized around that pipeline:
//!
//! - [`dense`] — dense rasters ([`DenseMap`]), resampling, entropy.
//! - [`metrics`] — depth and pointmap evaluation.
//! - [`select`] — pixel selection policies and halo dilation.
//! - [`sparse`] — coordinate hash map, kernel maps, generalized sparse
//!   convolution with exact multiply–add counters.
//! - [`refiner`] — the sparse U-shaped residual network and its exact
//!   reverse-mode backward pass.
//! - [`fusion`] — gated / direct / entropy-weighted merging of coarse and
//!   refined estimates.
//! - [`train`] — desk-scale training loop with adaptive per-parameter steps
//!   and finite-difference gradient verification.
//! - [`synth`] — synthetic scenes and a synthetic frozen backbone.
//! - [`pipeline`] — end-to-end orchestration, diagnostics, and the
//!   sparse-vs-dense benchmark harness.
//! - [`io`] — the `RTFT` tensor file container, weight manifests, PNG/PLY
//!   export.
//!
//! With the `parallel` feature (on by default) per-pixel and per-row loops
//! run on rayon; results are bit-identical to the sequential fallback at any
//! thread count because every output row is written by exactly one task and
//! all accumulation orders are fixed.

pub mod dense;
pub mod error;
pub mod fusion;
pub mod io;
pub mod metrics;
pub(crate) mod par;
pub mod pipeline;
pub mod refiner;
pub mod select;
pub mod sparse;
pub mod synth;
pub mod train;

pub use dense::{DenseMap, MapKind, Precision, ValidityMask};
pub use error::{Error, Result};
pub use fusion::{FusionParams, FusionStrategy};
pub use metrics::MetricReport;
pub use refiner::{NormKind, RefinerConfig, RefinerParams};
pub use select::PixelSelection;
pub use sparse::{ConvParams, KernelMap, SparseTensor};
pub use synth::{BackboneOutput, SceneSample};
pub use train::TrainConfig;
