use super::{LayerSpec, NetworkModel};
use crate::error::{Error, Result};

/// Variance epsilon of the batch-norm transform.
pub const BN_EPSILON: f32 = 1e-6;

/// Absorbs batch-norm statistics into convolution weights and biases.
///
/// Per output channel `f`, with `m = scale / sqrt(variance + BN_EPSILON)`,
/// coefficients become `w * m` and the bias `bias - mean * m`. Folded layers
/// lose their `batch_normalize` flag.
pub fn fold_batch_norm(model: &NetworkModel) -> Result<NetworkModel> {
    let mut out = model.clone();
    for (i, layer) in out.layers.iter_mut().enumerate() {
        let LayerSpec::Convolutional(spec) = &mut layer.spec else {
            continue;
        };
        if !spec.batch_normalize {
            continue;
        }
        let block =
            layer.weights.as_mut().ok_or_else(|| Error::InvalidModel(format!("layer {i}: weights not loaded")))?;
        let bn = block
            .batch_norm
            .take()
            .ok_or_else(|| Error::InvalidModel(format!("layer {i}: batch-norm parameters missing")))?;
        if let Some(v) = bn.rolling_variance.iter().find(|v| v.is_nan() || **v < 0.0) {
            return Err(Error::InvalidModel(format!("layer {i}: negative batch-norm variance {v}")));
        }
        let per_filter = block.coefficients.len() / block.out_channels;
        for f in 0..block.out_channels {
            let m = bn.scales[f] / (bn.rolling_variance[f] + BN_EPSILON).sqrt();
            for w in &mut block.coefficients[f * per_filter..(f + 1) * per_filter] {
                *w *= m;
            }
            block.biases[f] -= bn.rolling_mean[f] * m;
        }
        spec.batch_normalize = false;
    }
    Ok(out)
}
