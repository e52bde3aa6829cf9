//! Model generators: randomly initialized MLPs and small CNNs used by
//! the CLI, the evaluation harness, and tests.

use crate::error::{Result, SealError};
use crate::nn::{GateKind, Layer, Network};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// He-initialized dense layer (zero bias).
pub fn he_dense(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Layer {
    let std = (2.0 / in_dim as f64).sqrt();
    Layer::Dense {
        weight: rng.normal_tensor(&[out_dim, in_dim]).scale(std as f32),
        bias: Tensor::zeros(&[out_dim]),
    }
}

/// He-initialized square convolution (zero bias).
pub fn he_conv(
    out_ch: usize,
    in_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    rng: &mut Rng,
) -> Layer {
    let std = (2.0 / (in_ch * k * k) as f64).sqrt();
    Layer::Conv2d {
        weight: rng.normal_tensor(&[out_ch, in_ch, k, k]).scale(std as f32),
        bias: Tensor::zeros(&[out_ch]),
        stride,
        pad,
    }
}

/// Fully connected ReLU network: `dims` = [input, hidden..., output].
/// ReLU after every layer except the last.
pub fn random_mlp(dims: &[usize], rng: &mut Rng) -> Result<Network> {
    if dims.len() < 2 {
        return Err(SealError::InvalidArgument(
            "mlp needs at least input and output dims".into(),
        ));
    }
    let mut layers = Vec::new();
    for i in 0..dims.len() - 1 {
        layers.push((format!("fc{i}"), he_dense(dims[i + 1], dims[i], rng)));
        if i + 2 < dims.len() {
            layers.push((format!("act{i}"), Layer::Relu));
        }
    }
    Network::new(vec![dims[0]], layers)
}

/// Small conv classifier:
/// conv(C->8, 3x3, s1, p1) / ReLU / conv(8->16, 3x3, s2, p1) / ReLU /
/// conv(16->16, 3x3, s1, p1) / ReLU / GAP / dense(16 -> classes).
pub fn toy_cnn(in_channels: usize, size: usize, classes: usize, rng: &mut Rng) -> Result<Network> {
    if size < 8 {
        return Err(SealError::InvalidArgument(
            "toy cnn needs input size >= 8".into(),
        ));
    }
    let layers = vec![
        ("conv1".to_string(), he_conv(8, in_channels, 3, 1, 1, rng)),
        ("act1".to_string(), Layer::Relu),
        ("conv2".to_string(), he_conv(16, 8, 3, 2, 1, rng)),
        ("act2".to_string(), Layer::Relu),
        ("conv3".to_string(), he_conv(16, 16, 3, 1, 1, rng)),
        ("act3".to_string(), Layer::Relu),
        ("gap".to_string(), Layer::GlobalAvgPool),
        ("logits".to_string(), he_dense(classes, 16, rng)),
    ];
    Network::new(vec![in_channels, size, size], layers)
}

/// [`toy_cnn`] with inference-mode batch normalization after the first
/// convolution (unit variance, zero mean, unit weight).
pub fn toy_cnn_bn(
    in_channels: usize,
    size: usize,
    classes: usize,
    rng: &mut Rng,
) -> Result<Network> {
    let base = toy_cnn(in_channels, size, classes, rng)?;
    let bn = Layer::BatchNorm2d {
        mean: Tensor::zeros(&[8]),
        var: Tensor::filled(&[8], 1.0),
        weight: Tensor::filled(&[8], 1.0),
        bias: Tensor::zeros(&[8]),
        eps: 1e-5,
    };
    base.with_inserted(1, "bn1".to_string(), bn)
}

/// Randomly initialized squeeze-excite layer with zero offsets; see
/// `lock::inject_sqex` for function-preserving insertion into an
/// existing network.
pub fn sqex_layer(channels: usize, hidden: usize, scale: f32, gate: GateKind, rng: &mut Rng) -> Layer {
    Layer::SqEx {
        s1: rng.normal_tensor(&[hidden, channels]).scale(scale),
        t1: Tensor::zeros(&[hidden]),
        s2: rng.normal_tensor(&[channels, hidden]).scale(scale),
        t2: Tensor::zeros(&[channels]),
        gate,
    }
}
