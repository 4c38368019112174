//! Convolution kernels.
//!
//! Two implementations share one contract: a direct six-loop reference and
//! an im2col + matrix-product fast path. Both accumulate each output element
//! from zero in `(channel, ky, kx)` order and add the bias last, so the fast
//! path also reproduces the reference bit for bit on finite inputs.

use crate::error::{Error, Result};
use crate::model::{ConvSpec, BN_EPSILON};
use crate::tensor::{Shape, Tensor, WeightBlock};

use super::DEFAULT_LEAK;

pub(crate) fn check_conv(input: Shape, spec: &ConvSpec, weights: &WeightBlock) -> Result<Shape> {
    let out = spec.output_shape(input)?;
    let expected = (spec.filters, input.channels / spec.groups, spec.size);
    let found = (weights.out_channels, weights.in_channels_per_group, weights.kernel_size);
    if expected != found {
        return Err(Error::InvalidModel(format!(
            "weights {}x{}x{k}x{k} do not fit {spec:?} on input {input}",
            found.0,
            found.1,
            k = found.2
        )));
    }
    if spec.batch_normalize != weights.batch_norm.is_some() {
        return Err(Error::InvalidModel("batch-norm presence does not match layer spec".into()));
    }
    Ok(out)
}

/// Adds bias (after optional batch-norm) to raw sums laid out `O×(H×W)`.
fn finish(sums: &mut [f32], weights: &WeightBlock, plane: usize) {
    for f in 0..weights.out_channels {
        let chunk = &mut sums[f * plane..(f + 1) * plane];
        match &weights.batch_norm {
            Some(bn) => {
                let sd = (bn.rolling_variance[f] + BN_EPSILON).sqrt();
                for v in chunk {
                    *v = bn.scales[f] * (*v - bn.rolling_mean[f]) / sd + weights.biases[f];
                }
            }
            None => {
                for v in chunk {
                    *v += weights.biases[f];
                }
            }
        }
    }
}

/// Direct convolution, pre-activation.
pub(crate) fn conv_reference_raw(input: &Tensor, spec: &ConvSpec, weights: &WeightBlock) -> Result<Tensor> {
    let ishape = input.shape();
    let oshape = check_conv(ishape, spec, weights)?;
    let k = spec.size;
    let cpg = ishape.channels / spec.groups;
    let fpg = spec.filters / spec.groups;
    let pad = spec.padding as isize;
    let mut out = vec![0.0f32; oshape.len()];
    for f in 0..spec.filters {
        let group = f / fpg;
        for oy in 0..oshape.height {
            for ox in 0..oshape.width {
                let mut acc = 0.0f32;
                for lc in 0..cpg {
                    let c = group * cpg + lc;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * spec.stride + ky) as isize - pad;
                            let ix = (ox * spec.stride + kx) as isize - pad;
                            if iy < 0 || ix < 0 || iy >= ishape.height as isize || ix >= ishape.width as isize {
                                continue;
                            }
                            let w = weights.coefficients[((f * cpg + lc) * k + ky) * k + kx];
                            acc += w * input.get(c, iy as usize, ix as usize);
                        }
                    }
                }
                out[oshape.index(f, oy, ox)] = acc;
            }
        }
    }
    finish(&mut out, weights, oshape.plane_len());
    Tensor::new(oshape, out)
}

/// Writes the patch rows of channel `c` into `col` (rows `K×K`, columns
/// `out_h×out_w`), zero where the window falls into padding.
fn im2col_channel(input: &Tensor, c: usize, spec: &ConvSpec, oshape: Shape, col: &mut [f32]) {
    let ishape = input.shape();
    let plane = input.channel_plane(c).expect("channel checked by caller");
    let k = spec.size;
    let cols = oshape.plane_len();
    let pad = spec.padding as isize;
    for ky in 0..k {
        for kx in 0..k {
            let row = &mut col[(ky * k + kx) * cols..(ky * k + kx + 1) * cols];
            for oy in 0..oshape.height {
                let iy = (oy * spec.stride + ky) as isize - pad;
                let dst = &mut row[oy * oshape.width..(oy + 1) * oshape.width];
                if iy < 0 || iy >= ishape.height as isize {
                    dst.fill(0.0);
                    continue;
                }
                let src = &plane[iy as usize * ishape.width..(iy as usize + 1) * ishape.width];
                for (ox, d) in dst.iter_mut().enumerate() {
                    let ix = (ox * spec.stride + kx) as isize - pad;
                    *d = if ix < 0 || ix >= ishape.width as isize { 0.0 } else { src[ix as usize] };
                }
            }
        }
    }
}

/// im2col convolution, pre-activation. Channels with `skip[c] == true` are
/// left out of both the patch matrix and the product.
pub(crate) fn conv_fast_raw(
    input: &Tensor,
    spec: &ConvSpec,
    weights: &WeightBlock,
    skip: Option<&[bool]>,
) -> Result<Tensor> {
    let ishape = input.shape();
    let oshape = check_conv(ishape, spec, weights)?;
    if let Some(s) = skip {
        if s.len() != ishape.channels {
            return Err(Error::InvalidArgument(format!(
                "skip mask has {} entries for {} channels",
                s.len(),
                ishape.channels
            )));
        }
    }
    let k = spec.size;
    let kk = k * k;
    let cpg = ishape.channels / spec.groups;
    let fpg = spec.filters / spec.groups;
    let cols = oshape.plane_len();
    let mut out = vec![0.0f32; oshape.len()];
    let mut col = Vec::new();
    let mut active = Vec::with_capacity(cpg);

    for g in 0..spec.groups {
        active.clear();
        active.extend((0..cpg).filter(|lc| !skip.is_some_and(|s| s[g * cpg + lc])));
        if active.is_empty() {
            continue;
        }
        col.resize(active.len() * kk * cols, 0.0);
        for (slot, &lc) in active.iter().enumerate() {
            im2col_channel(input, g * cpg + lc, spec, oshape, &mut col[slot * kk * cols..(slot + 1) * kk * cols]);
        }
        for f in g * fpg..(g + 1) * fpg {
            let acc = &mut out[f * cols..(f + 1) * cols];
            for (slot, &lc) in active.iter().enumerate() {
                let kernel = weights.kernel_slice(f, lc);
                for (r, &w) in kernel.iter().enumerate() {
                    let row = &col[(slot * kk + r) * cols..(slot * kk + r + 1) * cols];
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += w * v;
                    }
                }
            }
        }
    }
    finish(&mut out, weights, cols);
    Tensor::new(oshape, out)
}

fn activate(mut t: Tensor, spec: &ConvSpec) -> Tensor {
    for v in t.data_mut() {
        *v = spec.activation.apply(*v, DEFAULT_LEAK);
    }
    t
}

/// Six-loop direct convolution with zero padding, followed by the layer's
/// activation (leaky slope [`DEFAULT_LEAK`]).
pub fn conv_forward_reference(input: &Tensor, spec: &ConvSpec, weights: &WeightBlock) -> Result<Tensor> {
    Ok(activate(conv_reference_raw(input, spec, weights)?, spec))
}

/// im2col + matrix-product convolution with the same contract as
/// [`conv_forward_reference`].
pub fn conv_forward_fast(input: &Tensor, spec: &ConvSpec, weights: &WeightBlock) -> Result<Tensor> {
    Ok(activate(conv_fast_raw(input, spec, weights, None)?, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;

    #[test]
    fn scalar_multiply_add() {
        let input = Tensor::new(Shape::new(1, 1, 1), vec![2.0]).unwrap();
        let spec = ConvSpec::new(1, 1, Activation::Linear);
        let w = WeightBlock::new(1, 1, 1, vec![3.0], vec![1.0], None).unwrap();
        assert_eq!(conv_forward_reference(&input, &spec, &w).unwrap().data(), &[7.0]);
        assert_eq!(conv_forward_fast(&input, &spec, &w).unwrap().data(), &[7.0]);
    }

    #[test]
    fn ones_with_same_padding() {
        let input = Tensor::new(Shape::new(1, 3, 3), vec![1.0; 9]).unwrap();
        let spec = ConvSpec::new(1, 3, Activation::Linear).same_padding();
        let w = WeightBlock::new(1, 1, 3, vec![1.0; 9], vec![0.0], None).unwrap();
        let expected = [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
        assert_eq!(conv_forward_reference(&input, &spec, &w).unwrap().data(), &expected);
        assert_eq!(conv_forward_fast(&input, &spec, &w).unwrap().data(), &expected);
    }

    #[test]
    fn activation_applied_after_bias() {
        let input = Tensor::new(Shape::new(1, 1, 2), vec![1.0, -1.0]).unwrap();
        let spec = ConvSpec::new(1, 1, Activation::Leaky);
        let w = WeightBlock::new(1, 1, 1, vec![1.0], vec![0.5], None).unwrap();
        let out = conv_forward_fast(&input, &spec, &w).unwrap();
        assert_eq!(out.data(), &[1.5, -0.5 * DEFAULT_LEAK]);
    }

    #[test]
    fn mismatched_weights_rejected() {
        let input = Tensor::zeros(Shape::new(2, 3, 3));
        let spec = ConvSpec::new(1, 3, Activation::Linear);
        let w = WeightBlock::new(1, 1, 3, vec![0.0; 9], vec![0.0], None).unwrap();
        assert!(conv_forward_reference(&input, &spec, &w).is_err());
        assert!(conv_forward_fast(&input, &spec, &w).is_err());
    }

    #[test]
    fn grouped_matches_reference() {
        let shape = Shape::new(4, 5, 5);
        let input = Tensor::from_fn(shape, |c, y, x| ((c * 31 + y * 7 + x * 3) % 13) as f32 * 0.1 - 0.6);
        let spec = ConvSpec::new(8, 3, Activation::Linear).same_padding().groups(2).stride(2);
        let coeffs = (0..8 * 2 * 9).map(|i| ((i * 17) % 19) as f32 * 0.05 - 0.45).collect();
        let w = WeightBlock::new(8, 2, 3, coeffs, (0..8).map(|i| i as f32 * 0.1).collect(), None).unwrap();
        let a = conv_forward_reference(&input, &spec, &w).unwrap();
        let b = conv_forward_fast(&input, &spec, &w).unwrap();
        assert_eq!(a.shape(), Shape::new(8, 3, 3));
        assert_eq!(a, b);
    }
}
