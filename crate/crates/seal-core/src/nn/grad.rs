//! Reverse-mode differentiation through a sequential network.
//!
//! An [`Objective`] maps the network's final output to a scalar and
//! supplies the gradient of that scalar with respect to the output;
//! backpropagation through the layers then yields input and parameter
//! gradients. Forward activations always come from the same engine as
//! plain evaluation, so objective values match `forward` exactly.

use crate::error::{Result, SealError};
use crate::math::{log_softmax, softmax};
use crate::nn::Network;
use crate::tensor::{conv2d, conv2d_input_grad, Tensor};
use crate::trigger::Reduction;

/// Parameter gradients of one layer, mirroring the layer's own tensors.
#[derive(Clone, Debug)]
pub enum LayerGrads {
    Dense {
        weight: Tensor,
        bias: Tensor,
    },
    Conv2d {
        weight: Tensor,
        bias: Tensor,
    },
    BatchNorm2d {
        mean: Tensor,
        var: Tensor,
        weight: Tensor,
        bias: Tensor,
    },
    SqEx {
        s1: Tensor,
        t1: Tensor,
        s2: Tensor,
        t2: Tensor,
    },
    /// Layer without parameters.
    None,
}

/// Scalar objective on the network output.
pub trait Objective {
    /// Returns the objective value and its gradient with respect to the
    /// network output.
    fn value_and_grad(&self, output: &Tensor) -> Result<(f64, Tensor)>;
}

/// Dot product of the flattened output with a fixed vector.
pub struct DotReadout(pub Tensor);

impl Objective for DotReadout {
    fn value_and_grad(&self, output: &Tensor) -> Result<(f64, Tensor)> {
        if self.0.len() != output.len() {
            return Err(SealError::ShapeMismatch(format!(
                "readout vector has {} elements, output has {}",
                self.0.len(),
                output.len()
            )));
        }
        let value = self.0.dot(output)?;
        Ok((value, self.0.reshape(output.shape())?))
    }
}

/// Single output coordinate of a flat output.
pub struct IndexReadout(pub usize);

impl Objective for IndexReadout {
    fn value_and_grad(&self, output: &Tensor) -> Result<(f64, Tensor)> {
        if self.0 >= output.len() {
            return Err(SealError::InvalidArgument(format!(
                "readout index {} out of range ({})",
                self.0,
                output.len()
            )));
        }
        let mut g = Tensor::zeros(output.shape());
        g.data_mut()[self.0] = 1.0;
        Ok((output.data()[self.0] as f64, g))
    }
}

/// Correlates the output feature map with a fixed kernel and reduces the
/// single-channel response map to a scalar (one position or the mean).
pub struct ConvReadout {
    /// Kernel [1, C, K, K] or [C, K, K].
    pub kernel: Tensor,
    pub stride: usize,
    pub pad: usize,
    pub reduction: Reduction,
}

impl ConvReadout {
    fn kernel4(&self) -> Result<Tensor> {
        match self.kernel.rank() {
            4 => Ok(self.kernel.clone()),
            3 => {
                let mut s = vec![1usize];
                s.extend_from_slice(self.kernel.shape());
                self.kernel.reshape(&s)
            }
            _ => Err(SealError::ShapeMismatch(format!(
                "conv readout kernel must be [C, K, K], got {:?}",
                self.kernel.shape()
            ))),
        }
    }

    /// The full single-channel response map [1, H', W'].
    pub fn response_map(&self, output: &Tensor) -> Result<Tensor> {
        conv2d(output, &self.kernel4()?, None, self.stride, self.pad)
    }
}

impl Objective for ConvReadout {
    fn value_and_grad(&self, output: &Tensor) -> Result<(f64, Tensor)> {
        let kernel = self.kernel4()?;
        let map = conv2d(output, &kernel, None, self.stride, self.pad)?;
        let (h, w) = (map.shape()[1], map.shape()[2]);
        let mut gmap = Tensor::zeros(map.shape());
        let value = match self.reduction {
            Reduction::Position { row, col } => {
                if row >= h || col >= w {
                    return Err(SealError::InvalidArgument(format!(
                        "reduction position ({row}, {col}) outside response map {h}x{w}"
                    )));
                }
                gmap.set(&[0, row, col], 1.0);
                map.at(&[0, row, col]) as f64
            }
            Reduction::Mean => {
                let n = (h * w) as f64;
                gmap.data_mut().fill((1.0 / n) as f32);
                map.data().iter().map(|&v| v as f64).sum::<f64>() / n
            }
        };
        let gx = conv2d_input_grad(&gmap, &kernel, output.shape(), self.stride, self.pad)?;
        Ok((value, gx))
    }
}

/// Cross-entropy of the softmax of a flat logit output against a fixed
/// target class.
pub struct CrossEntropy {
    pub target: usize,
}

impl Objective for CrossEntropy {
    fn value_and_grad(&self, output: &Tensor) -> Result<(f64, Tensor)> {
        if output.rank() != 1 || self.target >= output.len() {
            return Err(SealError::InvalidArgument(format!(
                "cross entropy target {} incompatible with output {:?}",
                self.target,
                output.shape()
            )));
        }
        let lp = log_softmax(output.data());
        let p = softmax(output.data());
        let mut g = Tensor::zeros(output.shape());
        for (i, gv) in g.data_mut().iter_mut().enumerate() {
            let indicator = if i == self.target { 1.0 } else { 0.0 };
            *gv = (p[i] - indicator) as f32;
        }
        Ok((-lp[self.target], g))
    }
}

/// Objective value plus the gradient with respect to the input.
pub fn value_and_input_gradient(
    net: &Network,
    x: &Tensor,
    objective: &dyn Objective,
) -> Result<(f64, Tensor)> {
    let (value, gx, _) = backprop(net, x, objective, false)?;
    Ok((value, gx))
}

/// Gradient of the objective with respect to the input.
pub fn input_gradient(net: &Network, x: &Tensor, objective: &dyn Objective) -> Result<Tensor> {
    Ok(value_and_input_gradient(net, x, objective)?.1)
}

/// Objective value, input gradient, and per-layer parameter gradients.
pub fn value_and_gradients(
    net: &Network,
    x: &Tensor,
    objective: &dyn Objective,
) -> Result<(f64, Tensor, Vec<LayerGrads>)> {
    let (value, gx, grads) = backprop(net, x, objective, true)?;
    Ok((value, gx, grads))
}

/// Per-layer parameter gradients of the objective.
pub fn param_gradient(
    net: &Network,
    x: &Tensor,
    objective: &dyn Objective,
) -> Result<Vec<LayerGrads>> {
    Ok(value_and_gradients(net, x, objective)?.2)
}

fn backprop(
    net: &Network,
    x: &Tensor,
    objective: &dyn Objective,
    keep_params: bool,
) -> Result<(f64, Tensor, Vec<LayerGrads>)> {
    let trace = net.forward_trace(x)?;
    let (value, mut gy) = objective.value_and_grad(trace.last().expect("trace non-empty"))?;
    let mut grads: Vec<LayerGrads> = Vec::with_capacity(if keep_params { net.len() } else { 0 });
    for i in (0..net.len()).rev() {
        let (gx, lg) = net.layers()[i].backward(&trace[i], &gy)?;
        gy = gx;
        if keep_params {
            grads.push(lg);
        }
    }
    grads.reverse();
    Ok((value, gy, grads))
}
