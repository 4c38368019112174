use crate::error::{Error, Result};
use crate::model::{Activation, PoolSpec};
use crate::tensor::{Shape, Tensor, WeightBlock};

/// Darknet max pooling: windows start at `-padding/2`, positions outside
/// the input are ignored.
pub fn maxpool_forward(input: &Tensor, pool: &PoolSpec) -> Result<Tensor> {
    let ishape = input.shape();
    let oshape = pool.output_shape(ishape)?;
    let offset = (pool.padding / 2) as isize;
    let mut out = Tensor::zeros(oshape);
    for c in 0..oshape.channels {
        let plane = input.channel_plane(c)?;
        for oy in 0..oshape.height {
            for ox in 0..oshape.width {
                let mut m = f32::MIN;
                for n in 0..pool.size {
                    let iy = (oy * pool.stride + n) as isize - offset;
                    if iy < 0 || iy >= ishape.height as isize {
                        continue;
                    }
                    for k in 0..pool.size {
                        let ix = (ox * pool.stride + k) as isize - offset;
                        if ix < 0 || ix >= ishape.width as isize {
                            continue;
                        }
                        let v = plane[iy as usize * ishape.width + ix as usize];
                        if v > m {
                            m = v;
                        }
                    }
                }
                out.set(c, oy, ox, m);
            }
        }
    }
    Ok(out)
}

/// Global average pool: one mean per channel.
pub fn avgpool_forward(input: &Tensor) -> Result<Tensor> {
    let shape = input.shape();
    let n = shape.plane_len() as f32;
    let data = (0..shape.channels)
        .map(|c| input.channel_plane(c).map(|p| p.iter().sum::<f32>() / n))
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(Shape::new(shape.channels, 1, 1), data)
}

/// Fully connected layer over the flattened input; weights are `O×I`.
pub fn connected_forward(input: &Tensor, weights: &WeightBlock, activation: Activation, leak: f32) -> Result<Tensor> {
    let inputs = input.shape().len();
    if weights.kernel_size != 1 || weights.in_channels_per_group != inputs {
        return Err(Error::ShapeMismatch {
            expected: Shape::new(weights.in_channels_per_group, 1, 1),
            found: Shape::new(inputs, 1, 1),
        });
    }
    let x = input.data();
    let data = (0..weights.out_channels)
        .map(|o| {
            let mut acc = 0.0f32;
            for (w, v) in weights.filter(o).iter().zip(x) {
                acc += w * v;
            }
            activation.apply(acc + weights.biases[o], leak)
        })
        .collect();
    Tensor::new(Shape::new(weights.out_channels, 1, 1), data)
}

/// Softmax over all elements; output keeps the input shape.
pub fn softmax_forward(input: &Tensor) -> Result<Tensor> {
    let x = input.data();
    let largest = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = x.iter().map(|v| (v - largest).exp()).collect();
    let sum: f32 = exps.iter().sum();
    Tensor::new(input.shape(), exps.into_iter().map(|e| e / sum).collect())
}
