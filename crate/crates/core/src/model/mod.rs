//! Network description: layer specifications, resolved shapes, weights.
//!
//! Models come from a Darknet-style `.cfg` text file ([`parse_config`]) and a
//! binary `.weights` file ([`load_weights`]). Only plain feed-forward stacks
//! are supported: convolution (with groups), max/global-average pooling,
//! fully connected and softmax layers.

mod config;
mod fold;
mod weights;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, WeightBlock};

pub use config::{format_config, parse_config};
pub use fold::{fold_batch_norm, BN_EPSILON};
pub use weights::{expected_weight_bytes, load_weights, write_weights, WeightsHeader};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Leaky,
}

impl Activation {
    /// Plain activation; `leak` is the negative slope used by `Leaky`.
    #[inline]
    pub fn apply(self, x: f32, leak: f32) -> f32 {
        match self {
            Activation::Linear => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Leaky => {
                if x > 0.0 {
                    x
                } else {
                    leak * x
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::Leaky => "leaky",
        }
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Activation::Linear),
            "relu" => Ok(Activation::Relu),
            "leaky" => Ok(Activation::Leaky),
            other => Err(format!("unsupported activation '{other}'")),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub filters: usize,
    pub size: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub batch_normalize: bool,
    pub activation: Activation,
}

impl ConvSpec {
    /// Stride 1, no padding, one group, no batch-norm.
    pub fn new(filters: usize, size: usize, activation: Activation) -> Self {
        Self { filters, size, stride: 1, padding: 0, groups: 1, batch_normalize: false, activation }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    /// Darknet `pad=1`: padding of `size / 2`.
    pub fn same_padding(mut self) -> Self {
        self.padding = self.size / 2;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn batch_normalize(mut self, on: bool) -> Self {
        self.batch_normalize = on;
        self
    }

    pub fn is_depthwise(&self, input_channels: usize) -> bool {
        self.groups == input_channels && self.groups > 1
    }

    pub fn is_pointwise(&self) -> bool {
        self.size == 1 && self.groups == 1
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if self.filters == 0 || self.size == 0 || self.stride == 0 || self.groups == 0 {
            return Err(Error::InvalidModel("convolution parameters must be positive".into()));
        }
        if !input.channels.is_multiple_of(self.groups) {
            return Err(Error::InvalidModel(format!(
                "groups={} does not divide {} input channels",
                self.groups, input.channels
            )));
        }
        if !self.filters.is_multiple_of(self.groups) {
            return Err(Error::InvalidModel(format!(
                "groups={} does not divide {} filters",
                self.groups, self.filters
            )));
        }
        let span_h = input.height + 2 * self.padding;
        let span_w = input.width + 2 * self.padding;
        if span_h < self.size || span_w < self.size {
            return Err(Error::InvalidModel(format!(
                "kernel {} larger than padded input {}x{}",
                self.size, span_h, span_w
            )));
        }
        Ok(Shape::new(self.filters, (span_h - self.size) / self.stride + 1, (span_w - self.size) / self.stride + 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub size: usize,
    pub stride: usize,
    /// Total padding; Darknet's default is `size - 1`, split as
    /// `padding / 2` before the first element.
    pub padding: usize,
}

impl PoolSpec {
    pub fn new(size: usize, stride: usize) -> Self {
        Self { size, stride, padding: size.saturating_sub(1) }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if self.size == 0 || self.stride == 0 {
            return Err(Error::InvalidModel("pool size and stride must be positive".into()));
        }
        if input.height + self.padding < self.size || input.width + self.padding < self.size {
            return Err(Error::InvalidModel(format!("pool window {} larger than input {input}", self.size)));
        }
        Ok(Shape::new(
            input.channels,
            (input.height + self.padding - self.size) / self.stride + 1,
            (input.width + self.padding - self.size) / self.stride + 1,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Convolutional(ConvSpec),
    MaxPool(PoolSpec),
    /// Global average pool.
    AvgPool,
    Connected {
        outputs: usize,
        activation: Activation,
    },
    Softmax,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Convolutional(_) => "convolutional",
            LayerSpec::MaxPool(_) => "maxpool",
            LayerSpec::AvgPool => "avgpool",
            LayerSpec::Connected { .. } => "connected",
            LayerSpec::Softmax => "softmax",
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match self {
            LayerSpec::Convolutional(c) => c.output_shape(input),
            LayerSpec::MaxPool(p) => p.output_shape(input),
            LayerSpec::AvgPool => Ok(Shape::new(input.channels, 1, 1)),
            LayerSpec::Connected { outputs, .. } => {
                if *outputs == 0 {
                    return Err(Error::InvalidModel("connected outputs must be positive".into()));
                }
                Ok(Shape::new(*outputs, 1, 1))
            }
            LayerSpec::Softmax => Ok(input),
        }
    }

    /// Dimensions `(O, I/groups, K)` of the weight block this layer needs, if any.
    pub fn weight_dims(&self, input: Shape) -> Option<(usize, usize, usize)> {
        match self {
            LayerSpec::Convolutional(c) => Some((c.filters, input.channels / c.groups, c.size)),
            LayerSpec::Connected { outputs, .. } => Some((*outputs, input.len(), 1)),
            _ => None,
        }
    }

    pub fn has_batch_norm(&self) -> bool {
        matches!(self, LayerSpec::Convolutional(c) if c.batch_normalize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub input: Shape,
    pub output: Shape,
    pub weights: Option<WeightBlock>,
}

impl Layer {
    pub fn conv_spec(&self) -> Option<&ConvSpec> {
        match &self.spec {
            LayerSpec::Convolutional(c) => Some(c),
            _ => None,
        }
    }

    fn check_weights(&self, block: &WeightBlock) -> Result<()> {
        let Some((o, i, k)) = self.spec.weight_dims(self.input) else {
            return Err(Error::InvalidModel(format!("{} layer takes no weights", self.spec.kind())));
        };
        if (block.out_channels, block.in_channels_per_group, block.kernel_size) != (o, i, k) {
            return Err(Error::InvalidModel(format!(
                "{} layer needs a {o}x{i}x{k}x{k} weight block, got {}x{}x{}x{}",
                self.spec.kind(),
                block.out_channels,
                block.in_channels_per_group,
                block.kernel_size,
                block.kernel_size
            )));
        }
        if self.spec.has_batch_norm() != block.batch_norm.is_some() {
            return Err(Error::InvalidModel("batch-norm presence does not match layer spec".into()));
        }
        block.validate()
    }
}

/// An ordered, shape-resolved layer stack with optional weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub input: Shape,
    pub layers: Vec<Layer>,
    /// Header of the weights file the model was loaded from.
    pub header: Option<WeightsHeader>,
}

impl NetworkModel {
    /// Resolves the shape chain for `specs`; no weights are attached.
    pub fn new(input: Shape, specs: impl IntoIterator<Item = LayerSpec>) -> Result<Self> {
        if input.is_empty() {
            return Err(Error::InvalidModel(format!("input dimensions must be positive, got {input}")));
        }
        let mut layers = Vec::new();
        let mut shape = input;
        for (i, spec) in specs.into_iter().enumerate() {
            let output = spec
                .output_shape(shape)
                .map_err(|e| Error::InvalidModel(format!("layer {i} ({}): {e}", spec.kind())))?;
            layers.push(Layer { spec, input: shape, output, weights: None });
            shape = output;
        }
        Ok(Self { input, layers, header: None })
    }

    pub fn output_shape(&self) -> Shape {
        self.layers.last().map_or(self.input, |l| l.output)
    }

    pub fn set_weights(&mut self, index: usize, block: WeightBlock) -> Result<()> {
        let layer = self.layers.get_mut(index).ok_or_else(|| Error::InvalidModel(format!("no layer {index}")))?;
        layer.check_weights(&block)?;
        layer.weights = Some(block);
        Ok(())
    }

    pub fn with_weights(mut self, index: usize, block: WeightBlock) -> Result<Self> {
        self.set_weights(index, block)?;
        Ok(self)
    }

    /// True when every layer that needs weights has them.
    pub fn is_loaded(&self) -> bool {
        self.layers.iter().all(|l| l.spec.weight_dims(l.input).is_none() || l.weights.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        let mut shape = self.input;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.input != shape {
                return Err(Error::InvalidModel(format!(
                    "layer {i}: input {} but previous output {shape}",
                    layer.input
                )));
            }
            let out = layer.spec.output_shape(shape)?;
            if out != layer.output {
                return Err(Error::InvalidModel(format!("layer {i}: output {} but spec gives {out}", layer.output)));
            }
            match (&layer.weights, layer.spec.weight_dims(shape)) {
                (Some(block), Some(_)) => layer.check_weights(block)?,
                (None, Some(_)) => return Err(Error::InvalidModel(format!("layer {i}: weights not loaded"))),
                (Some(_), None) => {
                    return Err(Error::InvalidModel(format!("layer {i}: {} layer carries weights", layer.spec.kind())))
                }
                (None, None) => {}
            }
            shape = out;
        }
        Ok(())
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = (usize, &Layer)> {
        self.layers.iter().enumerate().filter(|(_, l)| l.conv_spec().is_some())
    }

    /// Every activation in the stack is relu or linear.
    pub fn is_relu_only(&self) -> bool {
        self.layers.iter().all(|l| match l.spec {
            LayerSpec::Convolutional(c) => c.activation != Activation::Leaky,
            LayerSpec::Connected { activation, .. } => activation != Activation::Leaky,
            _ => true,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_same_padding_shape() {
        let spec = ConvSpec::new(2, 3, Activation::Relu).same_padding();
        assert_eq!(spec.output_shape(Shape::new(1, 4, 4)).unwrap(), Shape::new(2, 4, 4));
    }

    #[test]
    fn conv_strided_shape() {
        let spec = ConvSpec::new(4, 3, Activation::Relu).stride(2);
        assert_eq!(spec.output_shape(Shape::new(3, 7, 9)).unwrap(), Shape::new(4, 3, 4));
    }

    #[test]
    fn groups_must_divide() {
        let spec = ConvSpec::new(4, 3, Activation::Relu).groups(3);
        assert!(spec.output_shape(Shape::new(4, 5, 5)).is_err());
    }

    #[test]
    fn maxpool_shapes() {
        assert_eq!(PoolSpec::new(2, 2).output_shape(Shape::new(2, 4, 4)).unwrap(), Shape::new(2, 2, 2));
        // Darknet keeps size for a 2x2/1 pool
        assert_eq!(PoolSpec::new(2, 1).output_shape(Shape::new(3, 5, 5)).unwrap(), Shape::new(3, 5, 5));
        // odd input with 2x2/2 rounds up
        assert_eq!(PoolSpec::new(2, 2).output_shape(Shape::new(1, 5, 5)).unwrap(), Shape::new(1, 3, 3));
    }

    #[test]
    fn shape_chain_errors_are_reported() {
        let specs = [LayerSpec::Convolutional(ConvSpec::new(2, 5, Activation::Relu))];
        assert!(NetworkModel::new(Shape::new(1, 3, 3), specs).is_err());
    }

    #[test]
    fn set_weights_checks_dims() {
        let mut m = NetworkModel::new(
            Shape::new(1, 4, 4),
            [LayerSpec::Convolutional(ConvSpec::new(2, 3, Activation::Relu).same_padding())],
        )
        .unwrap();
        assert!(!m.is_loaded());
        let bad = WeightBlock::new(2, 2, 3, vec![0.0; 36], vec![0.0; 2], None).unwrap();
        assert!(m.set_weights(0, bad).is_err());
        let good = WeightBlock::new(2, 1, 3, vec![0.0; 18], vec![0.0; 2], None).unwrap();
        m.set_weights(0, good).unwrap();
        assert!(m.is_loaded());
        m.validate().unwrap();
    }

    #[test]
    fn activation_names() {
        assert_eq!("leaky".parse::<Activation>().unwrap(), Activation::Leaky);
        assert!("logistic".parse::<Activation>().is_err());
        assert_eq!(Activation::Leaky.apply(-2.0, 0.01), -0.02);
        assert_eq!(Activation::Relu.apply(-2.0, 0.01), 0.0);
    }
}
