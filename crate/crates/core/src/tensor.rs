//! Channel-major activation volumes and convolution weight blocks.
//!
//! A [`Tensor`] stores `C×H×W` single-precision values with each channel's
//! `H×W` plane contiguous, so skipping a channel skips exactly one
//! contiguous range of memory.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of a `C×H×W` volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub const fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of `(c, y, x)`.
    #[inline]
    pub const fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::InvalidTensor(format!("dimensions must be positive, got {shape}")));
        }
        if data.len() != shape.len() {
            return Err(Error::InvalidTensor(format!("{shape} needs {} values, got {}", shape.len(), data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        assert!(!shape.is_empty(), "tensor dimensions must be positive");
        Self { shape, data: vec![0.0; shape.len()] }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut t = Self::zeros(shape);
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    t.data[shape.index(c, y, x)] = f(c, y, x);
                }
            }
        }
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Reinterprets the same values under a new shape of equal length.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.index(c, y, x)]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.shape.index(c, y, x);
        self.data[i] = v;
    }

    fn check_channel(&self, c: usize) -> Result<()> {
        if c >= self.shape.channels {
            return Err(Error::ChannelOutOfRange { index: c, channels: self.shape.channels });
        }
        Ok(())
    }

    /// The contiguous `H×W` plane of channel `c`.
    pub fn channel_plane(&self, c: usize) -> Result<&[f32]> {
        self.check_channel(c)?;
        let n = self.shape.plane_len();
        Ok(&self.data[c * n..(c + 1) * n])
    }

    pub fn channel_plane_mut(&mut self, c: usize) -> Result<&mut [f32]> {
        self.check_channel(c)?;
        let n = self.shape.plane_len();
        Ok(&mut self.data[c * n..(c + 1) * n])
    }

    pub fn max_abs_in_plane(&self, c: usize) -> Result<f32> {
        Ok(self.channel_plane(c)?.iter().fold(0.0f32, |m, v| m.max(v.abs())))
    }

    /// Reads the raw fixture format: `C, H, W` as little-endian `u32`
    /// followed by `C×H×W` little-endian `f32` values.
    pub fn read_raw<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 12];
        r.read_exact(&mut header).map_err(|e| Error::InvalidTensor(format!("short header: {e}")))?;
        let dim = |i: usize| u32::from_le_bytes(header[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
        let shape = Shape::new(dim(0), dim(1), dim(2));
        if shape.is_empty() {
            return Err(Error::InvalidTensor(format!("dimensions must be positive, got {shape}")));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != shape.len() * 4 {
            return Err(Error::InvalidTensor(format!(
                "{shape} needs {} data bytes, got {}",
                shape.len() * 4,
                bytes.len()
            )));
        }
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        Self::new(shape, data)
    }

    pub fn write_raw<W: Write>(&self, mut w: W) -> Result<()> {
        for d in [self.shape.channels, self.shape.height, self.shape.width] {
            let d = u32::try_from(d).map_err(|_| Error::InvalidTensor("dimension exceeds u32".into()))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

/// Batch-normalization statistics, one entry per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub scales: Vec<f32>,
    pub rolling_mean: Vec<f32>,
    pub rolling_variance: Vec<f32>,
}

/// Coefficients of a convolutional or connected layer.
///
/// Coefficients are laid out `O × (I/groups) × K × K`; a connected layer is
/// stored as `O × I × 1 × 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBlock {
    pub out_channels: usize,
    pub in_channels_per_group: usize,
    pub kernel_size: usize,
    pub coefficients: Vec<f32>,
    pub biases: Vec<f32>,
    pub batch_norm: Option<BatchNorm>,
}

impl WeightBlock {
    pub fn new(
        out_channels: usize,
        in_channels_per_group: usize,
        kernel_size: usize,
        coefficients: Vec<f32>,
        biases: Vec<f32>,
        batch_norm: Option<BatchNorm>,
    ) -> Result<Self> {
        let block = Self { out_channels, in_channels_per_group, kernel_size, coefficients, biases, batch_norm };
        block.validate()?;
        Ok(block)
    }

    pub fn coefficient_count(out_channels: usize, in_channels_per_group: usize, kernel_size: usize) -> usize {
        out_channels * in_channels_per_group * kernel_size * kernel_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 || self.in_channels_per_group == 0 || self.kernel_size == 0 {
            return Err(Error::InvalidModel("weight block dimensions must be positive".into()));
        }
        let expected = Self::coefficient_count(self.out_channels, self.in_channels_per_group, self.kernel_size);
        if self.coefficients.len() != expected {
            return Err(Error::InvalidModel(format!(
                "expected {expected} coefficients, got {}",
                self.coefficients.len()
            )));
        }
        if self.biases.len() != self.out_channels {
            return Err(Error::InvalidModel(format!(
                "expected {} biases, got {}",
                self.out_channels,
                self.biases.len()
            )));
        }
        if let Some(bn) = &self.batch_norm {
            for (name, v) in
                [("scales", &bn.scales), ("rolling_mean", &bn.rolling_mean), ("rolling_variance", &bn.rolling_variance)]
            {
                if v.len() != self.out_channels {
                    return Err(Error::InvalidModel(format!(
                        "batch-norm {name} has {} entries, expected {}",
                        v.len(),
                        self.out_channels
                    )));
                }
            }
        }
        Ok(())
    }

    /// Coefficients of filter `f` reading its group-local input channel `c`.
    #[inline]
    pub fn kernel_slice(&self, f: usize, c: usize) -> &[f32] {
        let kk = self.kernel_size * self.kernel_size;
        let start = (f * self.in_channels_per_group + c) * kk;
        &self.coefficients[start..start + kk]
    }

    /// Coefficients of filter `f` across all of its input channels.
    #[inline]
    pub fn filter(&self, f: usize) -> &[f32] {
        let n = self.in_channels_per_group * self.kernel_size * self.kernel_size;
        &self.coefficients[f * n..(f + 1) * n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_element_plane() {
        let t = Tensor::new(Shape::new(1, 1, 1), vec![7.0]).unwrap();
        assert_eq!(t.channel_plane(0).unwrap(), &[7.0]);
    }

    #[test]
    fn second_channel_plane() {
        let t = Tensor::new(Shape::new(2, 1, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.channel_plane(1).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn plane_matches_flat_scan() {
        let shape = Shape::new(3, 2, 2);
        let data: Vec<f32> = (0..12).map(|i| ((i * 37 % 11) as f32) - 5.3).collect();
        let t = Tensor::new(shape, data.clone()).unwrap();
        // flat scan: collect every index whose channel (i / (H*W)) is 2
        let expected: Vec<f32> = data.iter().enumerate().filter(|(i, _)| i / 4 == 2).map(|(_, v)| *v).collect();
        assert_eq!(t.channel_plane(2).unwrap(), expected.as_slice());
        assert_eq!(t.channel_plane(2).unwrap(), &data[8..12]);
    }

    #[test]
    fn plane_out_of_range() {
        let t = Tensor::zeros(Shape::new(2, 2, 2));
        assert!(matches!(t.channel_plane(2), Err(Error::ChannelOutOfRange { index: 2, channels: 2 })));
        assert!(t.max_abs_in_plane(5).is_err());
    }

    #[test]
    fn max_abs_cases() {
        let t = Tensor::new(Shape::new(1, 1, 3), vec![0.0; 3]).unwrap();
        assert_eq!(t.max_abs_in_plane(0).unwrap(), 0.0);
        let t = Tensor::new(Shape::new(1, 1, 2), vec![-0.3, 0.2]).unwrap();
        assert_eq!(t.max_abs_in_plane(0).unwrap(), 0.3);
    }

    #[test]
    fn max_abs_matches_linear_scan() {
        let data: Vec<f32> = (0..64).map(|i| ((i as f32) * 1.618).sin() * 3.0).collect();
        let t = Tensor::new(Shape::new(1, 8, 8), data.clone()).unwrap();
        let mut oracle = 0.0f32;
        for v in &data {
            if v.abs() > oracle {
                oracle = v.abs();
            }
        }
        assert_eq!(t.max_abs_in_plane(0).unwrap(), oracle);
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(Tensor::new(Shape::new(2, 2, 2), vec![0.0; 7]).is_err());
        assert!(Tensor::new(Shape::new(0, 2, 2), vec![]).is_err());
    }

    #[test]
    fn raw_format_layout() {
        let t = Tensor::new(Shape::new(1, 1, 2), vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        t.write_raw(&mut buf).unwrap();
        assert_eq!(&buf[..12], &[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&buf[12..16], &1.0f32.to_le_bytes());
        assert_eq!(Tensor::read_raw(buf.as_slice()).unwrap(), t);
        assert!(Tensor::read_raw(&buf[..15]).is_err());
    }

    #[test]
    fn weight_block_counts() {
        assert!(WeightBlock::new(2, 1, 3, vec![0.0; 18], vec![0.0; 2], None).is_ok());
        assert!(WeightBlock::new(2, 1, 3, vec![0.0; 17], vec![0.0; 2], None).is_err());
        let bn = BatchNorm { scales: vec![1.0; 2], rolling_mean: vec![0.0; 1], rolling_variance: vec![1.0; 2] };
        assert!(WeightBlock::new(2, 1, 3, vec![0.0; 18], vec![0.0; 2], Some(bn)).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn write_then_read_round_trips(c in 1usize..4, h in 1usize..5, w in 1usize..5, v in -1e3f32..1e3) {
                let shape = Shape::new(c, h, w);
                let mut t = Tensor::zeros(shape);
                for ci in 0..c { for y in 0..h { for x in 0..w {
                    t.set(ci, y, x, v);
                    prop_assert_eq!(t.get(ci, y, x), v);
                }}}
            }

            #[test]
            fn flat_index_is_bijection(c in 1usize..5, h in 1usize..6, w in 1usize..6) {
                let shape = Shape::new(c, h, w);
                let mut seen = vec![false; shape.len()];
                for ci in 0..c { for y in 0..h { for x in 0..w {
                    let i = shape.index(ci, y, x);
                    prop_assert!(i < shape.len());
                    prop_assert!(!seen[i]);
                    seen[i] = true;
                }}}
                prop_assert!(seen.iter().all(|s| *s));
            }
        }
    }
}
