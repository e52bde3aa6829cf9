//! Layer kinds, forward evaluation, and per-layer backward rules.

use crate::error::{Result, SealError};
use crate::nn::grad::LayerGrads;
use crate::tensor::{
    conv2d, conv2d_input_grad, conv2d_weight_grad, conv_out_extent, matvec, matvec_t, outer,
    Tensor,
};

/// Gate nonlinearity used by squeeze-excite blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateKind {
    Sigmoid,
    /// relu6(x + 3) / 6.
    HardSigmoid,
}

impl GateKind {
    pub fn name(&self) -> &'static str {
        match self {
            GateKind::Sigmoid => "sigmoid",
            GateKind::HardSigmoid => "hard_sigmoid",
        }
    }

    pub fn from_name(name: &str) -> Result<GateKind> {
        match name {
            "sigmoid" => Ok(GateKind::Sigmoid),
            "hard_sigmoid" => Ok(GateKind::HardSigmoid),
            other => Err(SealError::InvalidArgument(format!("unknown gate {other:?}"))),
        }
    }

    pub fn apply(&self, z: f64) -> f64 {
        match self {
            GateKind::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            GateKind::HardSigmoid => ((z + 3.0) / 6.0).clamp(0.0, 1.0),
        }
    }

    /// Derivative, with 0 at the hard-sigmoid kinks (same convention as
    /// the ReLU subgradient).
    pub fn derivative(&self, z: f64) -> f64 {
        match self {
            GateKind::Sigmoid => {
                let s = self.apply(z);
                s * (1.0 - s)
            }
            GateKind::HardSigmoid => {
                if z > -3.0 && z < 3.0 {
                    1.0 / 6.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// One layer of a sequential network.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// Affine map: weight [n, m], bias [n]; input [m].
    Dense { weight: Tensor, bias: Tensor },
    /// 2-d convolution: weight [O, C, K, K], bias [O]; input [C, H, W].
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        pad: usize,
    },
    /// Inference-mode batch normalization over channels of [C, H, W]:
    /// y = (x - mean) * weight / sqrt(var + eps) + bias.
    BatchNorm2d {
        mean: Tensor,
        var: Tensor,
        weight: Tensor,
        bias: Tensor,
        eps: f32,
    },
    Relu,
    Sigmoid,
    /// [C, H, W] (or any shape) -> flat vector.
    Flatten,
    /// [C, H, W] -> per-channel spatial mean [C].
    GlobalAvgPool,
    /// Squeeze-excite: y = x (*) gate(s2 . relu(s1 . mean(x) + t1) + t2),
    /// broadcast per channel. s1 [d, C], t1 [d], s2 [C, d], t2 [C].
    SqEx {
        s1: Tensor,
        t1: Tensor,
        s2: Tensor,
        t2: Tensor,
        gate: GateKind,
    },
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::BatchNorm2d { .. } => "batch_norm",
            Layer::Relu => "relu",
            Layer::Sigmoid => "sigmoid",
            Layer::Flatten => "flatten",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::SqEx { .. } => "sq_ex",
        }
    }

    /// True for layers that own parameters.
    pub fn is_parameterized(&self) -> bool {
        matches!(
            self,
            Layer::Dense { .. } | Layer::Conv2d { .. } | Layer::BatchNorm2d { .. } | Layer::SqEx { .. }
        )
    }

    /// Validates internal parameter shapes (independent of input shape).
    pub fn validate(&self) -> Result<()> {
        match self {
            Layer::Dense { weight, bias } => {
                if weight.rank() != 2 {
                    return Err(SealError::ShapeMismatch(format!(
                        "dense weight must be [n, m], got {:?}",
                        weight.shape()
                    )));
                }
                if bias.rank() != 1 || bias.len() != weight.shape()[0] {
                    return Err(SealError::ShapeMismatch(format!(
                        "dense bias must be [{}], got {:?}",
                        weight.shape()[0],
                        bias.shape()
                    )));
                }
            }
            Layer::Conv2d {
                weight,
                bias,
                stride,
                ..
            } => {
                if weight.rank() != 4 || weight.shape()[2] != weight.shape()[3] {
                    return Err(SealError::ShapeMismatch(format!(
                        "conv weight must be [O, C, K, K], got {:?}",
                        weight.shape()
                    )));
                }
                if bias.rank() != 1 || bias.len() != weight.shape()[0] {
                    return Err(SealError::ShapeMismatch(format!(
                        "conv bias must be [{}], got {:?}",
                        weight.shape()[0],
                        bias.shape()
                    )));
                }
                if *stride == 0 {
                    return Err(SealError::InvalidArgument("conv stride must be >= 1".into()));
                }
            }
            Layer::BatchNorm2d {
                mean,
                var,
                weight,
                bias,
                eps,
            } => {
                let c = mean.len();
                for (t, name) in [(var, "var"), (weight, "weight"), (bias, "bias")] {
                    if t.rank() != 1 || t.len() != c {
                        return Err(SealError::ShapeMismatch(format!(
                            "batch_norm {name} must be [{c}], got {:?}",
                            t.shape()
                        )));
                    }
                }
                if mean.rank() != 1 {
                    return Err(SealError::ShapeMismatch(
                        "batch_norm mean must be rank 1".into(),
                    ));
                }
                for &v in var.data() {
                    if (v as f64) + (*eps as f64) <= 0.0 {
                        return Err(SealError::Precondition(
                            "batch_norm requires var + eps > 0 per channel".into(),
                        ));
                    }
                }
            }
            Layer::SqEx { s1, t1, s2, t2, .. } => {
                if s1.rank() != 2 || s2.rank() != 2 {
                    return Err(SealError::ShapeMismatch(
                        "sq_ex s1/s2 must be rank-2".into(),
                    ));
                }
                let (d, c) = (s1.shape()[0], s1.shape()[1]);
                if s2.shape() != [c, d] {
                    return Err(SealError::ShapeMismatch(format!(
                        "sq_ex s2 must be [{c}, {d}], got {:?}",
                        s2.shape()
                    )));
                }
                if t1.rank() != 1 || t1.len() != d || t2.rank() != 1 || t2.len() != c {
                    return Err(SealError::ShapeMismatch(
                        "sq_ex t1/t2 lengths must match s1/s2".into(),
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Output shape for a given input shape, or a shape error if the
    /// layer cannot consume it.
    pub fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense { weight, .. } => {
                if input.len() != 1 || input[0] != weight.shape()[1] {
                    return Err(SealError::ShapeMismatch(format!(
                        "dense expects [{}], got {input:?}",
                        weight.shape()[1]
                    )));
                }
                Ok(vec![weight.shape()[0]])
            }
            Layer::Conv2d {
                weight,
                stride,
                pad,
                ..
            } => {
                if input.len() != 3 || input[0] != weight.shape()[1] {
                    return Err(SealError::ShapeMismatch(format!(
                        "conv expects [{}, H, W], got {input:?}",
                        weight.shape()[1]
                    )));
                }
                let k = weight.shape()[2];
                let oh = conv_out_extent(input[1], k, *stride, *pad)?;
                let ow = conv_out_extent(input[2], k, *stride, *pad)?;
                Ok(vec![weight.shape()[0], oh, ow])
            }
            Layer::BatchNorm2d { mean, .. } => {
                if input.len() != 3 || input[0] != mean.len() {
                    return Err(SealError::ShapeMismatch(format!(
                        "batch_norm expects [{}, H, W], got {input:?}",
                        mean.len()
                    )));
                }
                Ok(input.to_vec())
            }
            Layer::Relu | Layer::Sigmoid => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::GlobalAvgPool => {
                if input.len() != 3 {
                    return Err(SealError::ShapeMismatch(format!(
                        "global_avg_pool expects [C, H, W], got {input:?}"
                    )));
                }
                Ok(vec![input[0]])
            }
            Layer::SqEx { s1, .. } => {
                if input.len() != 3 || input[0] != s1.shape()[1] {
                    return Err(SealError::ShapeMismatch(format!(
                        "sq_ex expects [{}, H, W], got {input:?}",
                        s1.shape()[1]
                    )));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Per-channel batch-norm scale factors weight / sqrt(var + eps),
    /// computed in f64.
    pub fn bn_factors(mean: &Tensor, var: &Tensor, weight: &Tensor, eps: f32) -> Vec<f64> {
        let _ = mean;
        var.data()
            .iter()
            .zip(weight.data().iter())
            .map(|(&v, &w)| (w as f64) / ((v as f64) + (eps as f64)).sqrt())
            .collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense { weight, bias } => {
                let y = matvec(weight, x)?;
                y.add(bias)
            }
            Layer::Conv2d {
                weight,
                bias,
                stride,
                pad,
            } => conv2d(x, weight, Some(bias), *stride, *pad),
            Layer::BatchNorm2d {
                mean,
                var,
                weight,
                bias,
                eps,
            } => {
                if x.rank() != 3 || x.shape()[0] != mean.len() {
                    return Err(SealError::ShapeMismatch(format!(
                        "batch_norm expects [{}, H, W], got {:?}",
                        mean.len(),
                        x.shape()
                    )));
                }
                let factors = Layer::bn_factors(mean, var, weight, *eps);
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let plane = h * w;
                let mut out = vec![0.0f32; c * plane];
                for ch in 0..c {
                    let m = mean.data()[ch] as f64;
                    let f = factors[ch];
                    let b = bias.data()[ch] as f64;
                    for i in 0..plane {
                        let v = x.data()[ch * plane + i] as f64;
                        out[ch * plane + i] = ((v - m) * f + b) as f32;
                    }
                }
                Tensor::new(x.shape().to_vec(), out)
            }
            Layer::Relu => Ok(x.relu()),
            Layer::Sigmoid => Ok(x.sigmoid()),
            Layer::Flatten => x.reshape(&[x.len()]),
            Layer::GlobalAvgPool => x.channel_mean(),
            Layer::SqEx { s1, t1, s2, t2, gate } => {
                let (_, q) = sqex_gate(x, s1, t1, s2, t2, *gate)?;
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let plane = h * w;
                let mut out = vec![0.0f32; c * plane];
                for ch in 0..c {
                    let g = q[ch] as f32;
                    for i in 0..plane {
                        out[ch * plane + i] = x.data()[ch * plane + i] * g;
                    }
                }
                Tensor::new(x.shape().to_vec(), out)
            }
        }
    }

    /// Reverse-mode step: given the layer input `x` and the gradient of
    /// the objective with respect to the layer output, returns the
    /// gradient with respect to `x` and this layer's parameter
    /// gradients.
    pub fn backward(&self, x: &Tensor, gy: &Tensor) -> Result<(Tensor, LayerGrads)> {
        match self {
            Layer::Dense { weight, .. } => {
                let gx = matvec_t(weight, gy)?;
                let gw = outer(gy, x)?;
                Ok((
                    gx,
                    LayerGrads::Dense {
                        weight: gw,
                        bias: gy.clone(),
                    },
                ))
            }
            Layer::Conv2d {
                weight,
                stride,
                pad,
                ..
            } => {
                let k = weight.shape()[2];
                let gx = conv2d_input_grad(gy, weight, x.shape(), *stride, *pad)?;
                let gw = conv2d_weight_grad(x, gy, k, *stride, *pad)?;
                let o = gy.shape()[0];
                let plane = gy.shape()[1] * gy.shape()[2];
                let gb: Vec<f32> = (0..o)
                    .map(|oc| {
                        gy.data()[oc * plane..(oc + 1) * plane]
                            .iter()
                            .map(|&v| v as f64)
                            .sum::<f64>() as f32
                    })
                    .collect();
                Ok((
                    gx,
                    LayerGrads::Conv2d {
                        weight: gw,
                        bias: Tensor::new(vec![o], gb)?,
                    },
                ))
            }
            Layer::BatchNorm2d {
                mean,
                var,
                weight,
                eps,
                ..
            } => {
                let factors = Layer::bn_factors(mean, var, weight, *eps);
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let plane = h * w;
                let mut gx = vec![0.0f32; c * plane];
                let mut gmean = vec![0.0f32; c];
                let mut gvar = vec![0.0f32; c];
                let mut gweight = vec![0.0f32; c];
                let mut gbias = vec![0.0f32; c];
                for ch in 0..c {
                    let f = factors[ch];
                    let m = mean.data()[ch] as f64;
                    let wgt = weight.data()[ch] as f64;
                    let sigma2 = (var.data()[ch] as f64) + (*eps as f64);
                    let sigma = sigma2.sqrt();
                    let mut sum_g = 0.0f64;
                    let mut sum_gc = 0.0f64; // sum of g * (x - mean)
                    for i in 0..plane {
                        let g = gy.data()[ch * plane + i] as f64;
                        let xc = (x.data()[ch * plane + i] as f64) - m;
                        gx[ch * plane + i] = (g * f) as f32;
                        sum_g += g;
                        sum_gc += g * xc;
                    }
                    gmean[ch] = (-f * sum_g) as f32;
                    gweight[ch] = (sum_gc / sigma) as f32;
                    gvar[ch] = (-0.5 * wgt * sum_gc / (sigma2 * sigma)) as f32;
                    gbias[ch] = sum_g as f32;
                }
                Ok((
                    Tensor::new(x.shape().to_vec(), gx)?,
                    LayerGrads::BatchNorm2d {
                        mean: Tensor::new(vec![c], gmean)?,
                        var: Tensor::new(vec![c], gvar)?,
                        weight: Tensor::new(vec![c], gweight)?,
                        bias: Tensor::new(vec![c], gbias)?,
                    },
                ))
            }
            Layer::Relu => {
                // Subgradient 0 at the kink.
                let gx: Vec<f32> = x
                    .data()
                    .iter()
                    .zip(gy.data().iter())
                    .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                Ok((Tensor::new(x.shape().to_vec(), gx)?, LayerGrads::None))
            }
            Layer::Sigmoid => {
                let gx: Vec<f32> = x
                    .data()
                    .iter()
                    .zip(gy.data().iter())
                    .map(|(&xi, &gi)| {
                        let s = 1.0 / (1.0 + (-(xi as f64)).exp());
                        (gi as f64 * s * (1.0 - s)) as f32
                    })
                    .collect();
                Ok((Tensor::new(x.shape().to_vec(), gx)?, LayerGrads::None))
            }
            Layer::Flatten => Ok((gy.reshape(x.shape())?, LayerGrads::None)),
            Layer::GlobalAvgPool => {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let plane = (h * w) as f64;
                let mut gx = vec![0.0f32; c * h * w];
                for ch in 0..c {
                    let g = (gy.data()[ch] as f64 / plane) as f32;
                    gx[ch * h * w..(ch + 1) * h * w].fill(g);
                }
                Ok((Tensor::new(x.shape().to_vec(), gx)?, LayerGrads::None))
            }
            Layer::SqEx { s1, t1, s2, t2, gate } => {
                sqex_backward(x, gy, s1, t1, s2, t2, *gate)
            }
        }
    }
}

/// Squeeze-excite pre-gate values and per-channel gains:
/// h = s1 . mean(x) + t1, z = s2 . relu(h) + t2, q = gate(z).
fn sqex_gate(
    x: &Tensor,
    s1: &Tensor,
    t1: &Tensor,
    s2: &Tensor,
    t2: &Tensor,
    gate: GateKind,
) -> Result<(SqExTrace, Vec<f64>)> {
    if x.rank() != 3 || x.shape()[0] != s1.shape()[1] {
        return Err(SealError::ShapeMismatch(format!(
            "sq_ex expects [{}, H, W], got {:?}",
            s1.shape()[1],
            x.shape()
        )));
    }
    let mu = x.channel_mean()?;
    let h = matvec(s1, &mu)?.add(t1)?;
    let r = h.relu();
    let z = matvec(s2, &r)?.add(t2)?;
    let q: Vec<f64> = z.data().iter().map(|&v| gate.apply(v as f64)).collect();
    Ok((SqExTrace { mu, h, r, z }, q))
}

struct SqExTrace {
    mu: Tensor,
    h: Tensor,
    r: Tensor,
    z: Tensor,
}

fn sqex_backward(
    x: &Tensor,
    gy: &Tensor,
    s1: &Tensor,
    t1: &Tensor,
    s2: &Tensor,
    t2: &Tensor,
    gate: GateKind,
) -> Result<(Tensor, LayerGrads)> {
    let (trace, q) = sqex_gate(x, s1, t1, s2, t2, gate)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let plane = h * w;

    // gq[c] = sum_ij gy * x; direct input term gx = gy * q.
    let mut gq = vec![0.0f64; c];
    let mut gx = vec![0.0f32; c * plane];
    for ch in 0..c {
        let mut acc = 0.0f64;
        for i in 0..plane {
            let g = gy.data()[ch * plane + i] as f64;
            acc += g * (x.data()[ch * plane + i] as f64);
            gx[ch * plane + i] = (g * q[ch]) as f32;
        }
        gq[ch] = acc;
    }

    let gz = Tensor::new(
        vec![c],
        (0..c)
            .map(|ch| (gq[ch] * gate.derivative(trace.z.data()[ch] as f64)) as f32)
            .collect(),
    )?;
    let gs2 = outer(&gz, &trace.r)?;
    let gr = matvec_t(s2, &gz)?;
    let gh = Tensor::new(
        vec![trace.h.len()],
        trace
            .h
            .data()
            .iter()
            .zip(gr.data().iter())
            .map(|(&hv, &gv)| if hv > 0.0 { gv } else { 0.0 })
            .collect(),
    )?;
    let gs1 = outer(&gh, &trace.mu)?;
    let gmu = matvec_t(s1, &gh)?;

    // Mean path: d mean(x)_c / d x_cij = 1 / (H W).
    for ch in 0..c {
        let add = (gmu.data()[ch] as f64 / plane as f64) as f32;
        for i in 0..plane {
            gx[ch * plane + i] += add;
        }
    }

    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        LayerGrads::SqEx {
            s1: gs1,
            t1: gh,
            s2: gs2,
            t2: gz,
        },
    ))
}
