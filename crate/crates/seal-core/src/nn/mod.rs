//! Sequential network container and evaluation engine.

pub mod grad;
pub mod layers;
pub mod receptive;
pub mod serial;

pub use grad::{
    input_gradient, param_gradient, value_and_gradients, value_and_input_gradient, ConvReadout,
    CrossEntropy, DotReadout, IndexReadout, LayerGrads, Objective,
};
pub use layers::{GateKind, Layer};
pub use receptive::{receptive_field, ReceptiveField};

use crate::error::{Result, SealError};
use crate::tensor::Tensor;

/// A sequential network: an ordered list of named layers plus the
/// declared input shape. Construction validates that consecutive layer
/// shapes compose, so a stored network always evaluates cleanly on
/// inputs of the declared shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    names: Vec<String>,
    layers: Vec<Layer>,
    format_version: String,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, named_layers: Vec<(String, Layer)>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.iter().any(|&e| e == 0) {
            return Err(SealError::ShapeMismatch(format!(
                "bad input shape {input_shape:?}"
            )));
        }
        let mut names = Vec::with_capacity(named_layers.len());
        let mut layers = Vec::with_capacity(named_layers.len());
        for (name, layer) in named_layers {
            names.push(name);
            layers.push(layer);
        }
        let net = Network {
            input_shape,
            names,
            layers,
            format_version: crate::FORMAT_VERSION.to_string(),
        };
        net.shapes()?; // validates parameter shapes and composition
        Ok(net)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn format_version(&self) -> &str {
        &self.format_version
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> Result<&Layer> {
        self.layers.get(index).ok_or(SealError::Precondition(format!(
            "layer index {index} out of range ({} layers)",
            self.layers.len()
        )))
    }

    pub fn layer_mut(&mut self, index: usize) -> Result<&mut Layer> {
        let len = self.layers.len();
        self.layers.get_mut(index).ok_or(SealError::Precondition(format!(
            "layer index {index} out of range ({len} layers)"
        )))
    }

    /// Activation shapes [input, after layer 0, ..., after layer L-1].
    /// Fails if any layer cannot consume its predecessor's output or has
    /// inconsistent parameters.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut cur = self.input_shape.clone();
        shapes.push(cur.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate().map_err(|e| {
                SealError::ShapeMismatch(format!("layer {i} ({}): {e}", self.names[i]))
            })?;
            cur = layer.out_shape(&cur).map_err(|e| {
                SealError::ShapeMismatch(format!("layer {i} ({}): {e}", self.names[i]))
            })?;
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    /// Shape of the network output.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().expect("shapes is never empty"))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(SealError::ShapeMismatch(format!(
                "input shape {:?}, network expects {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Full forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Forward pass keeping every intermediate activation:
    /// `trace[0] = x`, `trace[i + 1]` = output of layer `i`.
    pub fn forward_trace(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        trace.push(x.clone());
        for layer in &self.layers {
            let next = layer.forward(trace.last().expect("trace non-empty"))?;
            trace.push(next);
        }
        Ok(trace)
    }

    /// Activation feeding layer `j`, i.e. the output of layers [0, j).
    /// `j` may equal `len()`, in which case this is the full forward
    /// pass.
    pub fn feature_at(&self, j: usize, x: &Tensor) -> Result<Tensor> {
        if j > self.layers.len() {
            return Err(SealError::Precondition(format!(
                "layer index {j} out of range ({} layers)",
                self.layers.len()
            )));
        }
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers[..j] {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Sub-network of layers [0, j) with the same input shape.
    pub fn prefix(&self, j: usize) -> Result<Network> {
        if j > self.layers.len() {
            return Err(SealError::Precondition(format!(
                "prefix end {j} out of range ({} layers)",
                self.layers.len()
            )));
        }
        Ok(Network {
            input_shape: self.input_shape.clone(),
            names: self.names[..j].to_vec(),
            layers: self.layers[..j].to_vec(),
            format_version: self.format_version.clone(),
        })
    }

    /// Sub-network of layers [j, len()); its input shape is the
    /// activation shape at j.
    pub fn suffix(&self, j: usize) -> Result<Network> {
        let shapes = self.shapes()?;
        if j > self.layers.len() {
            return Err(SealError::Precondition(format!(
                "suffix start {j} out of range ({} layers)",
                self.layers.len()
            )));
        }
        Ok(Network {
            input_shape: shapes[j].clone(),
            names: self.names[j..].to_vec(),
            layers: self.layers[j..].to_vec(),
            format_version: self.format_version.clone(),
        })
    }

    /// Replaces layer `index`, revalidating composition.
    pub fn with_layer(&self, index: usize, layer: Layer) -> Result<Network> {
        let mut net = self.clone();
        *net.layer_mut(index)? = layer;
        net.shapes()?;
        Ok(net)
    }

    /// Inserts a named layer at `index` (existing layers shift right),
    /// revalidating composition.
    pub fn with_inserted(&self, index: usize, name: String, layer: Layer) -> Result<Network> {
        if index > self.layers.len() {
            return Err(SealError::Precondition(format!(
                "insert index {index} out of range ({} layers)",
                self.layers.len()
            )));
        }
        let mut net = self.clone();
        net.names.insert(index, name);
        net.layers.insert(index, layer);
        net.shapes()?;
        Ok(net)
    }

    /// Index of the unit (dense row or conv kernel) of layer `j` with
    /// the smallest l1 parameter norm; ties resolve to the smallest
    /// index. The bias is not included in the norm.
    pub fn min_l1_neuron(&self, j: usize) -> Result<usize> {
        match self.layer(j)? {
            Layer::Dense { weight, .. } => {
                let (n, m) = (weight.shape()[0], weight.shape()[1]);
                Ok(argmin_l1(weight.data(), n, m))
            }
            Layer::Conv2d { weight, .. } => {
                let o = weight.shape()[0];
                let per = weight.len() / o;
                Ok(argmin_l1(weight.data(), o, per))
            }
            other => Err(SealError::Precondition(format!(
                "min_l1_neuron needs a dense or conv2d layer, found {}",
                other.kind_name()
            ))),
        }
    }

    /// Total parameter count.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense { weight, bias } => weight.len() + bias.len(),
                Layer::Conv2d { weight, bias, .. } => weight.len() + bias.len(),
                Layer::BatchNorm2d {
                    mean,
                    var,
                    weight,
                    bias,
                    ..
                } => mean.len() + var.len() + weight.len() + bias.len(),
                Layer::SqEx { s1, t1, s2, t2, .. } => {
                    s1.len() + t1.len() + s2.len() + t2.len()
                }
                _ => 0,
            })
            .sum()
    }
}

fn argmin_l1(data: &[f32], units: usize, per_unit: usize) -> usize {
    let mut best = 0usize;
    let mut best_norm = f64::INFINITY;
    for u in 0..units {
        let norm: f64 = data[u * per_unit..(u + 1) * per_unit]
            .iter()
            .map(|&v| (v as f64).abs())
            .sum();
        if norm < best_norm {
            best_norm = norm;
            best = u;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_mlp() -> Network {
        Network::new(
            vec![3],
            vec![
                (
                    "fc0".into(),
                    Layer::Dense {
                        weight: Tensor::new(vec![2, 3], vec![1., 0., 0., 0., 1., 0.]).unwrap(),
                        bias: Tensor::from_vec(vec![0.5, -0.5]),
                    },
                ),
                ("act0".into(), Layer::Relu),
                (
                    "fc1".into(),
                    Layer::Dense {
                        weight: Tensor::new(vec![1, 2], vec![1., 1.]).unwrap(),
                        bias: Tensor::from_vec(vec![0.0]),
                    },
                ),
            ],
        )
        .unwrap()
    }

    #[test]
    fn forward_known_values() {
        let net = tiny_mlp();
        let y = net.forward(&Tensor::from_vec(vec![1.0, 1.0, 9.0])).unwrap();
        // fc0: [1.5, 0.5]; relu same; fc1: 2.0.
        assert_eq!(y.data(), &[2.0]);
    }

    #[test]
    fn composition_validation_rejects_mismatch() {
        let bad = Network::new(
            vec![3],
            vec![(
                "fc".into(),
                Layer::Dense {
                    weight: Tensor::zeros(&[2, 4]),
                    bias: Tensor::zeros(&[2]),
                },
            )],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn feature_at_matches_trace() {
        let net = tiny_mlp();
        let x = Tensor::from_vec(vec![0.3, -0.2, 0.7]);
        let trace = net.forward_trace(&x).unwrap();
        for j in 0..=net.len() {
            assert_eq!(net.feature_at(j, &x).unwrap(), trace[j]);
        }
    }

    #[test]
    fn prefix_suffix_compose() {
        let net = tiny_mlp();
        let x = Tensor::from_vec(vec![0.1, 0.9, -0.4]);
        for j in 0..=net.len() {
            let mid = net.prefix(j).unwrap().forward(&x).unwrap();
            let out = net.suffix(j).unwrap().forward(&mid).unwrap();
            assert_eq!(out, net.forward(&x).unwrap());
        }
    }

    #[test]
    fn min_l1_picks_smallest_row_with_tie_break() {
        let net = Network::new(
            vec![2],
            vec![(
                "fc".into(),
                Layer::Dense {
                    weight: Tensor::new(vec![3, 2], vec![0.5, 0.5, 0.3, 0.7, 2.0, 0.0]).unwrap(),
                    bias: Tensor::from_vec(vec![100.0, 0.0, 0.0]),
                },
            )],
        )
        .unwrap();
        // Rows have equal l1 norms 1.0, 1.0, 2.0; bias ignored; tie -> 0.
        assert_eq!(net.min_l1_neuron(0).unwrap(), 0);
        assert!(net.min_l1_neuron(5).is_err());
    }
}
