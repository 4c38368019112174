#![allow(dead_code)]

use std::path::{Path, PathBuf};

use fmprune::model::{format_config, write_weights, Activation, ConvSpec, LayerSpec, NetworkModel, PoolSpec};
use fmprune::tensor::{BatchNorm, Shape, Tensor, WeightBlock};
use rand::rngs::StdRng;
use rand::Rng;

pub fn random_tensor(rng: &mut StdRng, shape: Shape, range: f32) -> Tensor {
    Tensor::from_fn(shape, |_, _, _| rng.gen_range(-range..=range))
}

/// Random values where each channel is, with probability `p_zero`, all
/// exact zeros and otherwise a mix of small and large values.
pub fn sparse_tensor(rng: &mut StdRng, shape: Shape, p_zero: f64) -> Tensor {
    let zero: Vec<bool> = (0..shape.channels).map(|_| rng.gen_bool(p_zero)).collect();
    let scale: Vec<f32> = (0..shape.channels).map(|_| if rng.gen_bool(0.3) { 0.15 } else { 2.0 }).collect();
    Tensor::from_fn(shape, |c, _, _| if zero[c] { 0.0 } else { rng.gen_range(-scale[c]..=scale[c]) })
}

pub fn random_block(rng: &mut StdRng, model: &NetworkModel, index: usize, with_bn: bool) -> WeightBlock {
    let layer = &model.layers[index];
    let (o, i, k) = layer.spec.weight_dims(layer.input).expect("layer has weights");
    let n = WeightBlock::coefficient_count(o, i, k);
    let coefficients = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let biases = (0..o).map(|_| rng.gen_range(-0.5..=0.5)).collect();
    let batch_norm = with_bn.then(|| BatchNorm {
        scales: (0..o).map(|_| rng.gen_range(0.5..=1.5)).collect(),
        rolling_mean: (0..o).map(|_| rng.gen_range(-0.2..=0.2)).collect(),
        rolling_variance: (0..o).map(|_| rng.gen_range(0.1..=2.0)).collect(),
    });
    WeightBlock::new(o, i, k, coefficients, biases, batch_norm).unwrap()
}

/// Gives every weighted layer random coefficients.
pub fn fill_weights(rng: &mut StdRng, mut model: NetworkModel) -> NetworkModel {
    for idx in 0..model.layers.len() {
        if model.layers[idx].spec.weight_dims(model.layers[idx].input).is_some() {
            let bn = model.layers[idx].spec.has_batch_norm();
            let block = random_block(rng, &model, idx, bn);
            model.set_weights(idx, block).unwrap();
        }
    }
    model
}

/// Up to four ReLU convolutions with at most 8 channels, some grouped or
/// strided, with negative biases on some filters so whole channels die.
pub fn random_relu_net(rng: &mut StdRng) -> NetworkModel {
    let mut channels = rng.gen_range(1..=8);
    let side = rng.gen_range(4..=9);
    let input = Shape::new(channels, side, side);
    let mut specs = Vec::new();
    let mut h = side;
    for _ in 0..rng.gen_range(1..=4) {
        let filters = rng.gen_range(1..=8);
        let k = [1, 3][rng.gen_range(0..2)];
        let mut spec = ConvSpec::new(filters, k, Activation::Relu);
        if rng.gen_bool(0.5) {
            spec = spec.same_padding();
        }
        if h >= 5 && rng.gen_bool(0.25) {
            spec = spec.stride(2);
        }
        if rng.gen_bool(0.2) {
            spec = ConvSpec { filters: channels, ..spec }.groups(channels);
        }
        let out = spec.output_shape(Shape::new(channels, h, h));
        let Ok(out) = out else { continue };
        if out.height == 0 {
            continue;
        }
        h = out.height;
        channels = out.channels;
        specs.push(LayerSpec::Convolutional(spec));
    }
    if specs.is_empty() {
        specs.push(LayerSpec::Convolutional(ConvSpec::new(channels, 1, Activation::Relu)));
    }
    let mut model = fill_weights(rng, NetworkModel::new(input, specs).unwrap());
    for idx in 0..model.layers.len() {
        let w = model.layers[idx].weights.as_mut().unwrap();
        for b in &mut w.biases {
            if rng.gen_bool(0.3) {
                *b = -50.0;
            }
        }
    }
    model
}

/// Channels whose every value is exactly zero (either sign).
pub fn exact_zero_channels(t: &Tensor) -> usize {
    (0..t.shape().channels).filter(|&c| t.channel_plane(c).unwrap().iter().all(|v| *v == 0.0)).count()
}

/// A small classifier with `classes` outputs and a softmax head.
pub fn toy_classifier(rng: &mut StdRng, classes: usize) -> NetworkModel {
    let specs = vec![
        LayerSpec::Convolutional(ConvSpec::new(4, 3, Activation::Relu).same_padding()),
        LayerSpec::MaxPool(PoolSpec::new(2, 2)),
        LayerSpec::Convolutional(ConvSpec::new(6, 1, Activation::Relu)),
        LayerSpec::Convolutional(ConvSpec::new(6, 3, Activation::Relu).same_padding().groups(6)),
        LayerSpec::AvgPool,
        LayerSpec::Connected { outputs: classes, activation: Activation::Linear },
        LayerSpec::Softmax,
    ];
    fill_weights(rng, NetworkModel::new(Shape::new(3, 8, 8), specs).unwrap())
}

/// Writes `model.cfg` and `model.weights` into `dir`.
pub fn write_model(dir: &Path, model: &NetworkModel) -> (PathBuf, PathBuf) {
    let cfg = dir.join("model.cfg");
    let weights = dir.join("model.weights");
    std::fs::write(&cfg, format_config(model)).unwrap();
    let mut bytes = Vec::new();
    write_weights(model, &mut bytes).unwrap();
    std::fs::write(&weights, bytes).unwrap();
    (cfg, weights)
}

pub fn write_tensor(path: &Path, t: &Tensor) {
    let mut bytes = Vec::new();
    t.write_raw(&mut bytes).unwrap();
    std::fs::write(path, bytes).unwrap();
}
