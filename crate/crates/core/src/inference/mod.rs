//! Forward pass with optional ε-pruning of feature maps.
//!
//! With pruning enabled, each convolution output passes through
//! [`epsilon_activate`], and before every convolution the channels of its
//! input that lie entirely within ε of zero are marked and skipped.

mod conv;
mod layers;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Activation, LayerSpec, NetworkModel};
use crate::pruning::{mark_zero_channels, pruned_conv_raw, LoadRecorder, ProcessorCapability};
use crate::tensor::Tensor;

pub(crate) use conv::conv_fast_raw;
pub use conv::{conv_forward_fast, conv_forward_reference};
pub use layers::{avgpool_forward, connected_forward, maxpool_forward, softmax_forward};

/// Negative slope of leaky activations.
pub const DEFAULT_LEAK: f32 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    /// Plain activations, nothing skipped.
    #[default]
    Off,
    /// Prune region `[-leak·ε, ε]` on the pre-leak value.
    Literal,
    /// Prune when the post-leak magnitude is at most ε.
    Magnitude,
}

impl FromStr for PruneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(PruneMode::Off),
            "literal" | "literal_eq1" => Ok(PruneMode::Literal),
            "magnitude" => Ok(PruneMode::Magnitude),
            other => Err(Error::InvalidArgument(format!("unknown prune mode '{other}'"))),
        }
    }
}

impl fmt::Display for PruneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneMode::Off => "off",
            PruneMode::Literal => "literal",
            PruneMode::Magnitude => "magnitude",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub mode: PruneMode,
    pub epsilon: f32,
    pub leak: f32,
    /// Tile size used when marking channels; never changes which channels
    /// are skipped.
    pub capability: ProcessorCapability,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self { mode: PruneMode::Off, epsilon: 0.0, leak: DEFAULT_LEAK, capability: ProcessorCapability::default() }
    }
}

impl PruneConfig {
    pub fn off() -> Self {
        Self::default()
    }

    pub fn new(mode: PruneMode, epsilon: f32) -> Result<Self> {
        let cfg = Self { mode, epsilon, ..Self::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_leak(mut self, leak: f32) -> Result<Self> {
        self.leak = leak;
        self.validate()?;
        Ok(self)
    }

    pub fn with_capability(mut self, capability: ProcessorCapability) -> Self {
        self.capability = capability;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.leak > 0.0 && self.leak < 1.0) {
            return Err(Error::InvalidArgument(format!("leak must lie in (0, 1), got {}", self.leak)));
        }
        Ok(())
    }

    pub fn is_pruning(&self) -> bool {
        self.mode != PruneMode::Off
    }
}

/// Leaky activation with ε-pruning.
///
/// `Literal`: `x` if `x > ε`; `0` if `-leak·ε <= x <= ε`; `leak·x` below.
/// `Magnitude`: `y = leaky(x)`, then `0` if `|y| <= ε`.
/// `Off` is the plain leaky activation.
#[inline]
pub fn epsilon_activate(x: f32, cfg: &PruneConfig) -> f32 {
    let eps = cfg.epsilon;
    match cfg.mode {
        PruneMode::Off => Activation::Leaky.apply(x, cfg.leak),
        PruneMode::Literal => {
            if x > eps {
                x
            } else if x >= -cfg.leak * eps {
                // signed zero, so ε = 0 matches leaky bit for bit
                x * 0.0
            } else {
                cfg.leak * x
            }
        }
        PruneMode::Magnitude => {
            let y = if x > 0.0 { x } else { cfg.leak * x };
            if y.abs() <= eps {
                y * 0.0
            } else {
                y
            }
        }
    }
}

/// Activation stage of a convolution output under `cfg`.
///
/// relu outputs are thresholded, leaky layers use [`epsilon_activate`] in
/// place of the plain leak, and linear outputs pass through unchanged.
#[inline]
pub(crate) fn activation_stage(x: f32, activation: Activation, cfg: &PruneConfig) -> f32 {
    if !cfg.is_pruning() {
        return activation.apply(x, cfg.leak);
    }
    match activation {
        Activation::Linear => x,
        Activation::Relu => epsilon_activate(Activation::Relu.apply(x, cfg.leak), cfg),
        Activation::Leaky => epsilon_activate(x, cfg),
    }
}

/// Runs `model` on `input`. Load events for every convolution go to
/// `recorder` when one is supplied.
pub fn forward(
    model: &NetworkModel,
    input: &Tensor,
    cfg: &PruneConfig,
    recorder: Option<&mut LoadRecorder>,
) -> Result<Tensor> {
    forward_observed(model, input, cfg, recorder, |_, _| {})
}

/// [`forward`], additionally handing each convolution's activated output to
/// `observe(layer_index, output)`.
pub fn forward_observed(
    model: &NetworkModel,
    input: &Tensor,
    cfg: &PruneConfig,
    mut recorder: Option<&mut LoadRecorder>,
    mut observe: impl FnMut(usize, &Tensor),
) -> Result<Tensor> {
    cfg.validate()?;
    if input.shape() != model.input {
        return Err(Error::ShapeMismatch { expected: model.input, found: input.shape() });
    }
    if let Some(r) = recorder.as_deref_mut() {
        r.begin_pass();
    }
    let mut x = input.clone();
    for (index, layer) in model.layers.iter().enumerate() {
        let weights =
            || layer.weights.as_ref().ok_or_else(|| Error::InvalidModel(format!("layer {index}: weights not loaded")));
        x = match &layer.spec {
            LayerSpec::Convolutional(spec) => {
                let marks = cfg.is_pruning().then(|| mark_zero_channels(&x, cfg.epsilon, cfg.capability));
                let (mut out, load) = pruned_conv_raw(&x, marks.as_ref(), spec, weights()?)?;
                if let Some(r) = recorder.as_deref_mut() {
                    r.record(index, layer.spec.kind(), load);
                }
                for v in out.data_mut() {
                    *v = activation_stage(*v, spec.activation, cfg);
                }
                observe(index, &out);
                out
            }
            LayerSpec::MaxPool(pool) => maxpool_forward(&x, pool)?,
            LayerSpec::AvgPool => avgpool_forward(&x)?,
            LayerSpec::Connected { activation, .. } => connected_forward(&x, weights()?, *activation, cfg.leak)?,
            LayerSpec::Softmax => softmax_forward(&x)?,
        };
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: PruneMode, eps: f32) -> PruneConfig {
        PruneConfig::new(mode, eps).unwrap()
    }

    #[test]
    fn literal_branches() {
        let c = cfg(PruneMode::Literal, 0.1);
        assert_eq!(epsilon_activate(0.5, &c), 0.5);
        assert_eq!(epsilon_activate(0.05, &c), 0.0);
        assert_eq!(epsilon_activate(-1.0, &c), -0.01);
        assert_eq!(epsilon_activate(-0.0005, &c), 0.0);
    }

    #[test]
    fn boundaries_are_inclusive() {
        let c = cfg(PruneMode::Literal, 0.1);
        assert_eq!(epsilon_activate(0.1, &c), 0.0);
        let lower = -c.leak * c.epsilon;
        assert_eq!(epsilon_activate(lower, &c), 0.0);
        let below = f32::from_bits(lower.to_bits() + 1);
        assert!(below < lower);
        assert_eq!(epsilon_activate(below, &c), c.leak * below);
        let above = f32::from_bits(0.1f32.to_bits() + 1);
        assert_eq!(epsilon_activate(above, &c), above);
    }

    #[test]
    fn zero_epsilon_is_leaky() {
        for x in [-3.0f32, -1e-3, -1e-30, -0.0, 0.0, 1e-30, 0.2, 7.0] {
            for mode in [PruneMode::Literal, PruneMode::Magnitude] {
                let c = cfg(mode, 0.0);
                assert_eq!(epsilon_activate(x, &c).to_bits(), Activation::Leaky.apply(x, 0.01).to_bits(), "x={x}");
            }
        }
    }

    #[test]
    fn magnitude_reading() {
        let c = cfg(PruneMode::Magnitude, 0.1);
        assert_eq!(epsilon_activate(0.05, &c), 0.0);
        // post-leak magnitude 0.05 is pruned although x < -leak*eps
        assert_eq!(epsilon_activate(-5.0, &c), 0.0);
        assert_eq!(epsilon_activate(-20.0, &c), 0.01f32 * -20.0);
        assert_eq!(epsilon_activate(0.5, &c), 0.5);
    }

    #[test]
    fn not_idempotent_on_negative_leak_branch() {
        // -0.05 leaks to -0.0005, which the second pass prunes
        let c = cfg(PruneMode::Literal, 0.1);
        let once = epsilon_activate(-0.05, &c);
        assert_eq!(once, -0.0005);
        assert_eq!(epsilon_activate(once, &c), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(PruneConfig::new(PruneMode::Literal, -0.1).is_err());
        assert!(PruneConfig::new(PruneMode::Literal, f32::NAN).is_err());
        assert!(PruneConfig::off().with_leak(1.0).is_err());
        assert!(PruneConfig::off().with_leak(0.1).is_ok());
        assert_eq!("literal".parse::<PruneMode>().unwrap(), PruneMode::Literal);
        assert!("bogus".parse::<PruneMode>().is_err());
    }

    #[test]
    fn stage_passes_linear_through() {
        let c = cfg(PruneMode::Literal, 0.5);
        assert_eq!(activation_stage(-0.2, Activation::Linear, &c), -0.2);
        assert_eq!(activation_stage(0.3, Activation::Relu, &c), 0.0);
        assert_eq!(activation_stage(-3.0, Activation::Relu, &c), 0.0);
        assert_eq!(activation_stage(0.7, Activation::Relu, &c), 0.7);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn nonnegative_inputs_are_idempotent(x in 0.0f32..10.0, eps in 0.0f32..1.0) {
                let c = PruneConfig::new(PruneMode::Literal, eps).unwrap();
                let once = epsilon_activate(x, &c);
                prop_assert_eq!(epsilon_activate(once, &c), once);
            }

            #[test]
            fn magnitude_never_keeps_small_outputs(x in -50.0f32..50.0, eps in 0.0f32..1.0) {
                let c = PruneConfig::new(PruneMode::Magnitude, eps).unwrap();
                let y = epsilon_activate(x, &c);
                prop_assert!(y == 0.0 || y.abs() > eps);
            }
        }
    }
}
