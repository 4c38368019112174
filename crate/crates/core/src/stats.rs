//! Static sparsity analysis and the computation-cost model.
//!
//! Weight sparsity counts convolution and connected coefficients with
//! `|v| <= ε` (biases and batch-norm parameters excluded), both over all
//! parameters and over convolution kernels alone. Activation sparsity does
//! the same for convolution outputs at run time.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{forward_observed, PruneConfig};
use crate::model::{LayerSpec, NetworkModel};
use crate::tensor::Tensor;

/// Default threshold columns for sparsity reports.
pub const DEFAULT_THRESHOLDS: [f32; 9] = [0.0, 0.005, 0.01, 0.02, 0.04, 0.06, 0.08, 0.1, 0.2];

fn check_thresholds(thresholds: &[f32]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("threshold list is empty".into()));
    }
    if thresholds.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::InvalidArgument("thresholds must be finite and >= 0".into()));
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument(format!("thresholds must be sorted ascending: {thresholds:?}")));
    }
    Ok(())
}

/// Cumulative counts of values with `|v| <= thresholds[t]`.
#[derive(Debug, Clone)]
struct ThresholdCounter<'a> {
    thresholds: &'a [f32],
    buckets: Vec<u64>,
    total: u64,
}

impl<'a> ThresholdCounter<'a> {
    fn new(thresholds: &'a [f32]) -> Self {
        Self { thresholds, buckets: vec![0; thresholds.len()], total: 0 }
    }

    #[inline]
    fn add(&mut self, v: f32) {
        self.total += 1;
        let a = v.abs();
        let first = self.thresholds.partition_point(|t| *t < a);
        if first < self.buckets.len() {
            self.buckets[first] += 1;
        }
    }

    fn cumulative(&self) -> Vec<u64> {
        self.buckets
            .iter()
            .scan(0u64, |acc, b| {
                *acc += b;
                Some(*acc)
            })
            .collect()
    }

    fn fractions(&self) -> Vec<f64> {
        self.cumulative()
            .into_iter()
            .map(|c| if self.total == 0 { 0.0 } else { c as f64 / self.total as f64 })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeSparsity {
    pub scope: String,
    pub coefficients: u64,
    /// Coefficients with `|v| <= ε`, per threshold.
    pub within: Vec<u64>,
    pub fractions: Vec<f64>,
}

/// Accuracy-drop class of a statically pruned model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropClass {
    /// Top-1 and top-5 both drop by less than one point.
    Green,
    /// Exactly one of them drops by a point or more.
    Yellow,
    /// Both drop by a point or more.
    Red,
}

impl DropClass {
    pub fn from_drops(top1_drop: f64, top5_drop: f64) -> Self {
        match (top1_drop >= 0.01, top5_drop >= 0.01) {
            (false, false) => DropClass::Green,
            (true, true) => DropClass::Red,
            _ => DropClass::Yellow,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DropClass::Green => "green",
            DropClass::Yellow => "yellow",
            DropClass::Red => "red",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub thresholds: Vec<f32>,
    pub all_parameters: ScopeSparsity,
    pub conv_kernels: ScopeSparsity,
    /// Filled in when accuracy of the statically pruned model was measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy_class: Option<Vec<DropClass>>,
}

impl SparsityReport {
    /// CSV with a `scope` column followed by one column per threshold.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["scope".to_string()];
        header.extend(self.thresholds.iter().map(|t| t.to_string()));
        wtr.write_record(&header)?;
        for scope in [&self.all_parameters, &self.conv_kernels] {
            let mut row = vec![scope.scope.clone()];
            row.extend(scope.fractions.iter().map(|f| format!("{f:.6}")));
            wtr.write_record(&row)?;
        }
        if let Some(classes) = &self.accuracy_class {
            let mut row = vec!["accuracy_class".to_string()];
            row.extend(classes.iter().map(|c| c.name().to_string()));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Fraction of coefficients within each threshold of zero.
pub fn weight_sparsity(model: &NetworkModel, thresholds: &[f32]) -> Result<SparsityReport> {
    check_thresholds(thresholds)?;
    let mut all = ThresholdCounter::new(thresholds);
    let mut conv = ThresholdCounter::new(thresholds);
    for (i, layer) in model.layers.iter().enumerate() {
        if layer.spec.weight_dims(layer.input).is_none() {
            continue;
        }
        let block =
            layer.weights.as_ref().ok_or_else(|| Error::InvalidModel(format!("layer {i}: weights not loaded")))?;
        let is_conv = matches!(layer.spec, LayerSpec::Convolutional(_));
        for &v in &block.coefficients {
            all.add(v);
            if is_conv {
                conv.add(v);
            }
        }
    }
    let scope = |name: &str, c: &ThresholdCounter| ScopeSparsity {
        scope: name.to_string(),
        coefficients: c.total,
        within: c.cumulative(),
        fractions: c.fractions(),
    };
    Ok(SparsityReport {
        thresholds: thresholds.to_vec(),
        all_parameters: scope("all_parameters", &all),
        conv_kernels: scope("conv_kernels", &conv),
        accuracy_class: None,
    })
}

/// Zeroes every convolution and connected coefficient with `|v| <= ε`.
/// Biases and batch-norm parameters are left alone; values that are already
/// zero keep their bit pattern.
pub fn static_prune(model: &NetworkModel, epsilon: f32) -> Result<NetworkModel> {
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let mut out = model.clone();
    for layer in &mut out.layers {
        if let Some(block) = layer.weights.as_mut() {
            for v in &mut block.coefficients {
                if *v != 0.0 && v.abs() <= epsilon {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationSparsity {
    pub thresholds: Vec<f32>,
    pub elements: u64,
    pub fractions: Vec<f64>,
}

/// Fraction of convolution output elements (after activation) within each
/// threshold of zero, over all convolution layers and images.
pub fn activation_sparsity(
    model: &NetworkModel,
    images: &[Tensor],
    thresholds: &[f32],
    cfg: &PruneConfig,
) -> Result<ActivationSparsity> {
    check_thresholds(thresholds)?;
    if images.is_empty() {
        return Err(Error::InvalidArgument("activation sparsity needs at least one image".into()));
    }
    let mut counter = ThresholdCounter::new(thresholds);
    for image in images {
        forward_observed(model, image, cfg, None, |_, out| {
            for &v in out.data() {
                counter.add(v);
            }
        })?;
    }
    Ok(ActivationSparsity { thresholds: thresholds.to_vec(), elements: counter.total, fractions: counter.fractions() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer_index: usize,
    pub layer_kind: String,
    pub input_channels: usize,
    pub output_channels: usize,
    pub kernel_size: usize,
    /// Output area `H_out × W_out`.
    pub area: usize,
    pub groups: usize,
    pub macs: u64,
    /// Input feature-map elements read by the layer.
    pub feature_map_elements: u64,
    pub kernel_coefficients: u64,
    pub feature_map_to_kernel_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub layers: Vec<LayerCost>,
    pub total_macs: u64,
    pub total_feature_map_elements: u64,
    pub total_kernel_coefficients: u64,
}

impl CostModel {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for l in &self.layers {
            wtr.serialize(l)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Multiply-accumulate counts: `I × K² × O × A / groups` per convolution;
/// a connected layer counts as `K = 1`, `A = 1`.
pub fn compute_cost(model: &NetworkModel) -> CostModel {
    let layers: Vec<LayerCost> = model
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, layer)| {
            let (o, k, area, groups, input_channels) = match layer.spec {
                LayerSpec::Convolutional(c) => {
                    (c.filters, c.size, layer.output.plane_len(), c.groups, layer.input.channels)
                }
                LayerSpec::Connected { outputs, .. } => (outputs, 1, 1, 1, layer.input.len()),
                _ => return None,
            };
            let macs = (input_channels * k * k * o * area / groups) as u64;
            let kernel_coefficients = (o * (input_channels / groups) * k * k) as u64;
            let feature_map_elements = layer.input.len() as u64;
            Some(LayerCost {
                layer_index: i,
                layer_kind: layer.spec.kind().to_string(),
                input_channels,
                output_channels: o,
                kernel_size: k,
                area,
                groups,
                macs,
                feature_map_elements,
                kernel_coefficients,
                feature_map_to_kernel_ratio: feature_map_elements as f64 / kernel_coefficients as f64,
            })
        })
        .collect();
    CostModel {
        total_macs: layers.iter().map(|l| l.macs).sum(),
        total_feature_map_elements: layers.iter().map(|l| l.feature_map_elements).sum(),
        total_kernel_coefficients: layers.iter().map(|l| l.kernel_coefficients).sum(),
        layers,
    }
}
