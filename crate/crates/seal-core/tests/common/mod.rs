//! Shared test scaffolding: an independent f64 straight-line evaluator
//! (its own indexing, its own accumulation) used as the oracle for the
//! engine's forward pass and for finite-difference gradient checks,
//! plus a zoo of small random architectures.

#![allow(dead_code)]

use seal_core::nn::{GateKind, Layer, LayerGrads};
use seal_core::{Network, Rng, Tensor};

/// Activation shape the reference evaluator threads between layers.
#[derive(Clone, Debug)]
pub enum RefShape {
    Flat(usize),
    Map { c: usize, h: usize, w: usize },
}

/// One layer of the reference evaluator, parameters widened to f64.
pub enum RefLayer {
    Dense {
        w: Vec<f64>,
        b: Vec<f64>,
        out: usize,
        inp: usize,
    },
    Conv2d {
        w: Vec<f64>,
        b: Vec<f64>,
        o: usize,
        c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm2d {
        mean: Vec<f64>,
        var: Vec<f64>,
        w: Vec<f64>,
        b: Vec<f64>,
        eps: f64,
    },
    Relu,
    Sigmoid,
    Flatten,
    Gap,
    SqEx {
        s1: Vec<f64>,
        t1: Vec<f64>,
        s2: Vec<f64>,
        t2: Vec<f64>,
        hidden: usize,
        c: usize,
        hard: bool,
    },
}

/// Which parameter tensor of a layer a flat index refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    W,
    B,
    M,
    V,
    S1,
    T1,
    S2,
    T2,
}

pub struct RefNet {
    pub layers: Vec<RefLayer>,
    pub input: RefShape,
}

fn widen(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

impl RefNet {
    pub fn from_network(net: &Network) -> RefNet {
        let shape = net.shapes().expect("network is well-formed");
        let input = if shape[0].len() == 3 {
            RefShape::Map {
                c: shape[0][0],
                h: shape[0][1],
                w: shape[0][2],
            }
        } else {
            RefShape::Flat(shape[0][0])
        };
        let layers = net
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Dense { weight, bias } => RefLayer::Dense {
                    w: widen(weight),
                    b: widen(bias),
                    out: weight.shape()[0],
                    inp: weight.shape()[1],
                },
                Layer::Conv2d { weight, bias, stride, pad } => RefLayer::Conv2d {
                    w: widen(weight),
                    b: widen(bias),
                    o: weight.shape()[0],
                    c: weight.shape()[1],
                    k: weight.shape()[2],
                    stride: *stride,
                    pad: *pad,
                },
                Layer::BatchNorm2d { mean, var, weight, bias, eps } => RefLayer::BatchNorm2d {
                    mean: widen(mean),
                    var: widen(var),
                    w: widen(weight),
                    b: widen(bias),
                    eps: *eps as f64,
                },
                Layer::Relu => RefLayer::Relu,
                Layer::Sigmoid => RefLayer::Sigmoid,
                Layer::Flatten => RefLayer::Flatten,
                Layer::GlobalAvgPool => RefLayer::Gap,
                Layer::SqEx { s1, t1, s2, t2, gate } => RefLayer::SqEx {
                    s1: widen(s1),
                    t1: widen(t1),
                    s2: widen(s2),
                    t2: widen(t2),
                    hidden: s1.shape()[0],
                    c: s1.shape()[1],
                    hard: *gate == GateKind::HardSigmoid,
                },
            })
            .collect();
        RefNet { layers, input }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut data = x.to_vec();
        let mut shape = self.input.clone();
        for layer in &self.layers {
            let (next, next_shape) = layer.apply(&data, &shape);
            data = next;
            shape = next_shape;
        }
        data
    }

    /// Stable enumeration of every trainable parameter, matching the
    /// order of the engine's per-layer gradients.
    pub fn param_slots(&self) -> Vec<(usize, Slot, usize)> {
        let mut slots = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                RefLayer::Dense { w, b, .. } | RefLayer::Conv2d { w, b, .. } => {
                    slots.extend((0..w.len()).map(|e| (i, Slot::W, e)));
                    slots.extend((0..b.len()).map(|e| (i, Slot::B, e)));
                }
                RefLayer::BatchNorm2d { mean, var, w, b, .. } => {
                    slots.extend((0..mean.len()).map(|e| (i, Slot::M, e)));
                    slots.extend((0..var.len()).map(|e| (i, Slot::V, e)));
                    slots.extend((0..w.len()).map(|e| (i, Slot::W, e)));
                    slots.extend((0..b.len()).map(|e| (i, Slot::B, e)));
                }
                RefLayer::SqEx { s1, t1, s2, t2, .. } => {
                    slots.extend((0..s1.len()).map(|e| (i, Slot::S1, e)));
                    slots.extend((0..t1.len()).map(|e| (i, Slot::T1, e)));
                    slots.extend((0..s2.len()).map(|e| (i, Slot::S2, e)));
                    slots.extend((0..t2.len()).map(|e| (i, Slot::T2, e)));
                }
                _ => {}
            }
        }
        slots
    }

    pub fn param_mut(&mut self, layer: usize, slot: Slot, idx: usize) -> &mut f64 {
        match (&mut self.layers[layer], slot) {
            (RefLayer::Dense { w, .. }, Slot::W) | (RefLayer::Conv2d { w, .. }, Slot::W) => {
                &mut w[idx]
            }
            (RefLayer::Dense { b, .. }, Slot::B) | (RefLayer::Conv2d { b, .. }, Slot::B) => {
                &mut b[idx]
            }
            (RefLayer::BatchNorm2d { mean, .. }, Slot::M) => &mut mean[idx],
            (RefLayer::BatchNorm2d { var, .. }, Slot::V) => &mut var[idx],
            (RefLayer::BatchNorm2d { w, .. }, Slot::W) => &mut w[idx],
            (RefLayer::BatchNorm2d { b, .. }, Slot::B) => &mut b[idx],
            (RefLayer::SqEx { s1, .. }, Slot::S1) => &mut s1[idx],
            (RefLayer::SqEx { t1, .. }, Slot::T1) => &mut t1[idx],
            (RefLayer::SqEx { s2, .. }, Slot::S2) => &mut s2[idx],
            (RefLayer::SqEx { t2, .. }, Slot::T2) => &mut t2[idx],
            _ => panic!("slot {slot:?} does not exist on layer {layer}"),
        }
    }
}

impl RefLayer {
    fn apply(&self, x: &[f64], shape: &RefShape) -> (Vec<f64>, RefShape) {
        match self {
            RefLayer::Dense { w, b, out, inp } => {
                let mut y = vec![0.0; *out];
                for (r, yr) in y.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for c in 0..*inp {
                        acc += w[r * inp + c] * x[c];
                    }
                    *yr = acc + b[r];
                }
                (y, RefShape::Flat(*out))
            }
            RefLayer::Conv2d { w, b, o, c, k, stride, pad } => {
                let RefShape::Map { c: ci, h, w: wi } = shape else {
                    panic!("conv input must be a map");
                };
                assert_eq!(ci, c);
                let oh = (h + 2 * pad - k) / stride + 1;
                let ow = (wi + 2 * pad - k) / stride + 1;
                let mut y = vec![0.0; o * oh * ow];
                for oc in 0..*o {
                    for orow in 0..oh {
                        for ocol in 0..ow {
                            let mut acc = 0.0;
                            for ic in 0..*c {
                                for kr in 0..*k {
                                    for kc in 0..*k {
                                        let ir = (orow * stride + kr) as i64 - *pad as i64;
                                        let icl = (ocol * stride + kc) as i64 - *pad as i64;
                                        if ir < 0 || icl < 0 || ir >= *h as i64 || icl >= *wi as i64
                                        {
                                            continue;
                                        }
                                        let xi = (ic * h + ir as usize) * wi + icl as usize;
                                        let wix = ((oc * c + ic) * k + kr) * k + kc;
                                        acc += w[wix] * x[xi];
                                    }
                                }
                            }
                            y[(oc * oh + orow) * ow + ocol] = acc + b[oc];
                        }
                    }
                }
                (y, RefShape::Map { c: *o, h: oh, w: ow })
            }
            RefLayer::BatchNorm2d { mean, var, w, b, eps } => {
                let RefShape::Map { c, h, w: wi } = shape else {
                    panic!("batch norm input must be a map");
                };
                let plane = h * wi;
                let mut y = vec![0.0; x.len()];
                for ch in 0..*c {
                    let f = w[ch] / (var[ch] + eps).sqrt();
                    for i in 0..plane {
                        y[ch * plane + i] = (x[ch * plane + i] - mean[ch]) * f + b[ch];
                    }
                }
                (y, shape.clone())
            }
            RefLayer::Relu => (x.iter().map(|&v| v.max(0.0)).collect(), shape.clone()),
            RefLayer::Sigmoid => (
                x.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
                shape.clone(),
            ),
            RefLayer::Flatten => (x.to_vec(), RefShape::Flat(x.len())),
            RefLayer::Gap => {
                let RefShape::Map { c, h, w } = shape else {
                    panic!("pool input must be a map");
                };
                let plane = h * w;
                let y = (0..*c)
                    .map(|ch| x[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64)
                    .collect();
                (y, RefShape::Flat(*c))
            }
            RefLayer::SqEx { s1, t1, s2, t2, hidden, c, hard } => {
                let RefShape::Map { c: ci, h, w } = shape else {
                    panic!("squeeze-excite input must be a map");
                };
                assert_eq!(ci, c);
                let plane = h * w;
                let mu: Vec<f64> = (0..*c)
                    .map(|ch| x[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64)
                    .collect();
                let r: Vec<f64> = (0..*hidden)
                    .map(|u| {
                        let z: f64 =
                            (0..*c).map(|ch| s1[u * c + ch] * mu[ch]).sum::<f64>() + t1[u];
                        z.max(0.0)
                    })
                    .collect();
                let mut y = vec![0.0; x.len()];
                for ch in 0..*c {
                    let z: f64 =
                        (0..*hidden).map(|u| s2[ch * hidden + u] * r[u]).sum::<f64>() + t2[ch];
                    let q = if *hard {
                        ((z + 3.0) / 6.0).clamp(0.0, 1.0)
                    } else {
                        1.0 / (1.0 + (-z).exp())
                    };
                    for i in 0..plane {
                        y[ch * plane + i] = x[ch * plane + i] * q;
                    }
                }
                (y, shape.clone())
            }
        }
    }
}

/// Engine gradients flattened in the same order as
/// [`RefNet::param_slots`].
pub fn flatten_grads(grads: &[LayerGrads]) -> Vec<f64> {
    let mut flat = Vec::new();
    for g in grads {
        match g {
            LayerGrads::Dense { weight, bias } | LayerGrads::Conv2d { weight, bias } => {
                flat.extend(weight.data().iter().map(|&v| v as f64));
                flat.extend(bias.data().iter().map(|&v| v as f64));
            }
            LayerGrads::BatchNorm2d { mean, var, weight, bias } => {
                flat.extend(mean.data().iter().map(|&v| v as f64));
                flat.extend(var.data().iter().map(|&v| v as f64));
                flat.extend(weight.data().iter().map(|&v| v as f64));
                flat.extend(bias.data().iter().map(|&v| v as f64));
            }
            LayerGrads::SqEx { s1, t1, s2, t2 } => {
                flat.extend(s1.data().iter().map(|&v| v as f64));
                flat.extend(t1.data().iter().map(|&v| v as f64));
                flat.extend(s2.data().iter().map(|&v| v as f64));
                flat.extend(t2.data().iter().map(|&v| v as f64));
            }
            LayerGrads::None => {}
        }
    }
    flat
}

/// Central finite difference of `objective(forward(x))` with respect to
/// every parameter, on the f64 reference evaluator.
pub fn fd_param_gradient(
    refnet: &mut RefNet,
    x: &[f64],
    h: f64,
    objective: &dyn Fn(&[f64]) -> f64,
) -> Vec<f64> {
    let slots = refnet.param_slots();
    let mut grad = Vec::with_capacity(slots.len());
    for (layer, slot, idx) in slots {
        let orig = *refnet.param_mut(layer, slot, idx);
        *refnet.param_mut(layer, slot, idx) = orig + h;
        let up = objective(&refnet.forward(x));
        *refnet.param_mut(layer, slot, idx) = orig - h;
        let down = objective(&refnet.forward(x));
        *refnet.param_mut(layer, slot, idx) = orig;
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// Central finite difference with respect to the input.
pub fn fd_input_gradient(
    refnet: &RefNet,
    x: &[f64],
    h: f64,
    objective: &dyn Fn(&[f64]) -> f64,
) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let up = objective(&refnet.forward(&xs));
        xs[i] = orig - h;
        let down = objective(&refnet.forward(&xs));
        xs[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// f64 mirror of the engine's cross-entropy objective.
pub fn ref_cross_entropy(target: usize) -> impl Fn(&[f64]) -> f64 {
    move |logits: &[f64]| {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        lse - logits[target]
    }
}

/// f64 mirror of a dot-product readout.
pub fn ref_dot(v: Vec<f64>) -> impl Fn(&[f64]) -> f64 {
    move |out: &[f64]| out.iter().zip(v.iter()).map(|(a, b)| a * b).sum()
}

pub fn widen_tensor(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn max_abs_diff_f64(a: &[f64], b: &[f32]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y as f64).abs())
        .fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| ((x as f64) - (y as f64)).abs())
        .fold(0.0, f64::max)
}

/// Relative l2 error between a finite-difference gradient and the
/// engine's, guarded for near-zero gradients.
pub fn rel_l2(fd: &[f64], engine: &[f64]) -> f64 {
    let num: f64 = fd
        .iter()
        .zip(engine.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let den: f64 = engine.iter().map(|v| v * v).sum::<f64>().sqrt();
    num / den.max(1.0)
}

/// A random architecture from a small zoo, scaled for fast gradient
/// checks. `flavor` selects the shape family deterministically.
pub fn random_arch(flavor: usize, rng: &mut Rng) -> (Network, Vec<usize>) {
    use seal_core::models::{he_conv, he_dense, sqex_layer};
    let mk_bn = |c: usize, rng: &mut Rng| Layer::BatchNorm2d {
        mean: rng.normal_tensor(&[c]).scale(0.2),
        var: {
            let mut v = rng.uniform_tensor(&[c], 0.5, 1.5);
            v.data_mut().iter_mut().for_each(|x| *x = x.abs().max(0.1));
            v
        },
        weight: rng.uniform_tensor(&[c], 0.5, 1.5),
        bias: rng.normal_tensor(&[c]).scale(0.1),
        eps: 1e-5,
    };
    match flavor % 5 {
        0 => {
            // Plain MLP with a sigmoid hidden activation.
            let net = Network::new(
                vec![10],
                vec![
                    ("fc0".into(), he_dense(8, 10, rng)),
                    ("act0".into(), Layer::Sigmoid),
                    ("fc1".into(), he_dense(6, 8, rng)),
                    ("act1".into(), Layer::Relu),
                    ("fc2".into(), he_dense(3, 6, rng)),
                ],
            )
            .unwrap();
            (net, vec![10])
        }
        1 => {
            // Conv, relu, flatten, dense.
            let net = Network::new(
                vec![2, 7, 7],
                vec![
                    ("conv0".into(), he_conv(3, 2, 3, 1, 1, rng)),
                    ("act0".into(), Layer::Relu),
                    ("conv1".into(), he_conv(4, 3, 3, 2, 0, rng)),
                    ("act1".into(), Layer::Relu),
                    ("flat".into(), Layer::Flatten),
                    ("fc".into(), he_dense(3, 4 * 3 * 3, rng)),
                ],
            )
            .unwrap();
            (net, vec![2, 7, 7])
        }
        2 => {
            // Conv with batch norm and pooling head.
            let net = Network::new(
                vec![1, 8, 8],
                vec![
                    ("conv0".into(), he_conv(4, 1, 3, 1, 1, rng)),
                    ("bn0".into(), mk_bn(4, rng)),
                    ("act0".into(), Layer::Relu),
                    ("conv1".into(), he_conv(5, 4, 3, 1, 0, rng)),
                    ("act1".into(), Layer::Relu),
                    ("gap".into(), Layer::GlobalAvgPool),
                    ("fc".into(), he_dense(4, 5, rng)),
                ],
            )
            .unwrap();
            (net, vec![1, 8, 8])
        }
        3 => {
            // Squeeze-excite with the hard gate.
            let net = Network::new(
                vec![2, 6, 6],
                vec![
                    ("conv0".into(), he_conv(4, 2, 3, 1, 1, rng)),
                    ("act0".into(), Layer::Relu),
                    ("sqex".into(), sqex_layer(4, 3, 0.4, GateKind::HardSigmoid, rng)),
                    ("gap".into(), Layer::GlobalAvgPool),
                    ("fc".into(), he_dense(3, 4, rng)),
                ],
            )
            .unwrap();
            (net, vec![2, 6, 6])
        }
        _ => {
            // Squeeze-excite with the smooth gate plus batch norm.
            let net = Network::new(
                vec![1, 6, 6],
                vec![
                    ("conv0".into(), he_conv(3, 1, 3, 1, 1, rng)),
                    ("bn0".into(), mk_bn(3, rng)),
                    ("act0".into(), Layer::Relu),
                    ("sqex".into(), sqex_layer(3, 2, 0.4, GateKind::Sigmoid, rng)),
                    ("conv1".into(), he_conv(3, 3, 3, 1, 0, rng)),
                    ("act1".into(), Layer::Relu),
                    ("flat".into(), Layer::Flatten),
                    ("fc".into(), he_dense(3, 3 * 4 * 4, rng)),
                ],
            )
            .unwrap();
            (net, vec![1, 6, 6])
        }
    }
}
