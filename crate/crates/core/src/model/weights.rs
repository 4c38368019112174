//! Darknet binary weights.
//!
//! Layout: `major`, `minor`, `revision` as little-endian `i32`, then the
//! images-seen counter (`u64` when `major*10 + minor >= 2`, else `u32`).
//! Each convolutional layer follows with `biases[O]`, then, when batch
//! normalized, `scales[O]`, `rolling_mean[O]`, `rolling_variance[O]`, then
//! its coefficients. Connected layers store biases then weights.

use std::io::Write;

use super::{LayerSpec, NetworkModel};
use crate::error::{Error, Result};
use crate::tensor::{BatchNorm, WeightBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightsHeader {
    pub major: i32,
    pub minor: i32,
    pub revision: i32,
    /// Training counter; read and carried through, never interpreted.
    pub seen: u64,
}

impl WeightsHeader {
    pub const fn seen_is_64bit(&self) -> bool {
        self.major * 10 + self.minor >= 2
    }

    pub const fn byte_len(&self) -> usize {
        if self.seen_is_64bit() {
            20
        } else {
            16
        }
    }
}

impl Default for WeightsHeader {
    fn default() -> Self {
        Self { major: 0, minor: 2, revision: 0, seen: 0 }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(Error::TruncatedWeights { needed: n, available });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.take(n * 4)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<WeightsHeader> {
    let major = r.i32()?;
    let minor = r.i32()?;
    let revision = r.i32()?;
    if !(0..1000).contains(&major) || !(0..1000).contains(&minor) || revision < 0 {
        return Err(Error::BadHeader(format!("version {major}.{minor}.{revision}")));
    }
    let mut header = WeightsHeader { major, minor, revision, seen: 0 };
    header.seen = if header.seen_is_64bit() {
        u64::from_le_bytes(r.take(8)?.try_into().unwrap())
    } else {
        u64::from(u32::from_le_bytes(r.take(4)?.try_into().unwrap()))
    };
    Ok(header)
}

/// Number of reals the layer stores in a weights file.
fn layer_reals(spec: &LayerSpec, dims: (usize, usize, usize)) -> usize {
    let (o, i, k) = dims;
    let bn = if spec.has_batch_norm() { 3 * o } else { 0 };
    o + bn + WeightBlock::coefficient_count(o, i, k)
}

/// Closed-form size of a weights file for `model` under `header`.
pub fn expected_weight_bytes(model: &NetworkModel, header: &WeightsHeader) -> usize {
    let reals: usize =
        model.layers.iter().filter_map(|l| l.spec.weight_dims(l.input).map(|d| layer_reals(&l.spec, d))).sum();
    header.byte_len() + reals * 4
}

/// Fills every weighted layer of `skeleton` from a Darknet weights stream.
/// The stream must be consumed exactly.
pub fn load_weights(bytes: &[u8], skeleton: &NetworkModel) -> Result<NetworkModel> {
    let mut r = Reader { bytes, pos: 0 };
    let header = read_header(&mut r)?;
    let mut model = skeleton.clone();
    for layer in &mut model.layers {
        let Some((o, i, k)) = layer.spec.weight_dims(layer.input) else {
            continue;
        };
        let biases = r.f32s(o)?;
        let batch_norm = if layer.spec.has_batch_norm() {
            Some(BatchNorm { scales: r.f32s(o)?, rolling_mean: r.f32s(o)?, rolling_variance: r.f32s(o)? })
        } else {
            None
        };
        let coefficients = r.f32s(WeightBlock::coefficient_count(o, i, k))?;
        layer.weights = Some(WeightBlock::new(o, i, k, coefficients, biases, batch_norm)?);
    }
    let trailing = bytes.len() - r.pos;
    if trailing != 0 {
        return Err(Error::TrailingBytes(trailing));
    }
    model.header = Some(header);
    Ok(model)
}

fn write_f32s<W: Write>(w: &mut W, vals: &[f32]) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Serializes `model`'s weights in the layout [`load_weights`] reads. The
/// model's own header is written back when present.
pub fn write_weights<W: Write>(model: &NetworkModel, mut w: W) -> Result<()> {
    let header = model.header.unwrap_or_default();
    w.write_all(&header.major.to_le_bytes())?;
    w.write_all(&header.minor.to_le_bytes())?;
    w.write_all(&header.revision.to_le_bytes())?;
    if header.seen_is_64bit() {
        w.write_all(&header.seen.to_le_bytes())?;
    } else {
        let seen = u32::try_from(header.seen).map_err(|_| Error::BadHeader("seen counter exceeds u32".into()))?;
        w.write_all(&seen.to_le_bytes())?;
    }
    for (i, layer) in model.layers.iter().enumerate() {
        if layer.spec.weight_dims(layer.input).is_none() {
            continue;
        }
        let block =
            layer.weights.as_ref().ok_or_else(|| Error::InvalidModel(format!("layer {i}: weights not loaded")))?;
        write_f32s(&mut w, &block.biases)?;
        if layer.spec.has_batch_norm() {
            let bn = block
                .batch_norm
                .as_ref()
                .ok_or_else(|| Error::InvalidModel(format!("layer {i}: batch-norm parameters missing (folded?)")))?;
            write_f32s(&mut w, &bn.scales)?;
            write_f32s(&mut w, &bn.rolling_mean)?;
            write_f32s(&mut w, &bn.rolling_variance)?;
        }
        write_f32s(&mut w, &block.coefficients)?;
    }
    Ok(())
}
