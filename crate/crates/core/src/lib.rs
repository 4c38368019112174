//! Forward-pass CNN inference with dynamic feature-map pruning.
//!
//! Channels of a convolution input whose activations all lie within ε of
//! zero are skipped: neither loaded nor multiplied. Every skipped load is
//! accounted for per layer, so the bandwidth saved can be compared against
//! the accuracy lost. Static weight-sparsity analysis and a simple
//! computation-cost model sit alongside the engine.
//!
//! Modules, bottom-up:
//! - [`tensor`]: channel-major activation volumes and weight blocks.
//! - [`model`]: Darknet-style config/weights parsing and batch-norm folding.
//! - [`inference`]: layer kernels, ε-activation and the forward pass.
//! - [`pruning`]: zero-channel marking, skipping convolution, load accounting.
//! - [`stats`]: weight/activation sparsity, static pruning, cost model.
//! - [`eval`]: top-k evaluation, ε-sweeps, per-image comparisons.
//! - [`imageio`]: PPM decoding and input tensor preparation.
//! - [`cli`]: the `fmprune` command-line front end.

pub mod cli;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod inference;
pub mod model;
pub mod pruning;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use inference::{epsilon_activate, forward, PruneConfig, PruneMode};
pub use model::{LayerSpec, NetworkModel};
pub use pruning::{mark_zero_channels, ChannelMarkTable, LoadRecorder, ProcessorCapability};
pub use tensor::{Shape, Tensor, WeightBlock};
