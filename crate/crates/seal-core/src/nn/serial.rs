//! Model serialization (`SEALNET1` containers).
//!
//! The JSON manifest lists the format version, the RNG algorithm tag,
//! the input shape, and one entry per layer (kind, name, and scalar
//! hyperparameters); the tensor blocks that follow hold every parameter
//! tensor in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SealError};
use crate::io;
use crate::nn::{GateKind, Layer, Network};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    format_version: String,
    rng_algorithm: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerManifest>,
}

#[derive(Serialize, Deserialize)]
struct LayerManifest {
    name: String,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pad: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gate: Option<String>,
}

impl LayerManifest {
    fn bare(name: &str, kind: &str) -> Self {
        LayerManifest {
            name: name.to_string(),
            kind: kind.to_string(),
            stride: None,
            pad: None,
            eps: None,
            gate: None,
        }
    }
}

/// Number of tensor blocks a layer contributes.
fn block_count(kind: &str) -> Result<usize> {
    Ok(match kind {
        "dense" | "conv2d" => 2,
        "batch_norm" | "sq_ex" => 4,
        "relu" | "sigmoid" | "flatten" | "global_avg_pool" => 0,
        other => {
            return Err(SealError::Format(format!("unknown layer kind {other:?}")));
        }
    })
}

/// Serializes a network to bytes.
pub fn to_bytes(net: &Network) -> Result<Vec<u8>> {
    let mut layers = Vec::with_capacity(net.len());
    let mut blocks: Vec<&Tensor> = Vec::new();
    for i in 0..net.len() {
        let name = net.name(i);
        let layer = net.layer(i)?;
        let mut m = LayerManifest::bare(name, layer.kind_name());
        match layer {
            Layer::Dense { weight, bias } => {
                blocks.push(weight);
                blocks.push(bias);
            }
            Layer::Conv2d {
                weight,
                bias,
                stride,
                pad,
            } => {
                m.stride = Some(*stride);
                m.pad = Some(*pad);
                blocks.push(weight);
                blocks.push(bias);
            }
            Layer::BatchNorm2d {
                mean,
                var,
                weight,
                bias,
                eps,
            } => {
                m.eps = Some(*eps);
                blocks.push(mean);
                blocks.push(var);
                blocks.push(weight);
                blocks.push(bias);
            }
            Layer::SqEx { s1, t1, s2, t2, gate } => {
                m.gate = Some(gate.name().to_string());
                blocks.push(s1);
                blocks.push(t1);
                blocks.push(s2);
                blocks.push(t2);
            }
            Layer::Relu | Layer::Sigmoid | Layer::Flatten | Layer::GlobalAvgPool => {}
        }
        layers.push(m);
    }
    let manifest = ModelManifest {
        format_version: net.format_version().to_string(),
        rng_algorithm: crate::RNG_ALGORITHM.to_string(),
        input_shape: net.input_shape().to_vec(),
        layers,
    };
    io::container_to_bytes(io::MODEL_MAGIC, &manifest, &blocks)
}

/// Parses a network from bytes, re-validating shape composition.
pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    let (manifest, blocks): (ModelManifest, Vec<Tensor>) =
        io::container_from_bytes(io::MODEL_MAGIC, bytes)?;
    if manifest.format_version != crate::FORMAT_VERSION {
        return Err(SealError::Format(format!(
            "model format version {} unsupported (expected {})",
            manifest.format_version,
            crate::FORMAT_VERSION
        )));
    }
    if manifest.rng_algorithm != crate::RNG_ALGORITHM {
        return Err(SealError::Format(format!(
            "model records RNG algorithm {:?}; this build uses {:?}",
            manifest.rng_algorithm,
            crate::RNG_ALGORITHM
        )));
    }
    let expected: usize = manifest
        .layers
        .iter()
        .map(|l| block_count(&l.kind))
        .collect::<Result<Vec<_>>>()?
        .iter()
        .sum();
    if blocks.len() != expected {
        return Err(SealError::Format(format!(
            "model has {} tensor blocks, manifest implies {expected}",
            blocks.len()
        )));
    }

    let mut it = blocks.into_iter();
    let mut take = || it.next().expect("block count checked above");
    let mut named = Vec::with_capacity(manifest.layers.len());
    for lm in &manifest.layers {
        let layer = match lm.kind.as_str() {
            "dense" => Layer::Dense {
                weight: take(),
                bias: take(),
            },
            "conv2d" => Layer::Conv2d {
                weight: take(),
                bias: take(),
                stride: lm
                    .stride
                    .ok_or_else(|| SealError::Format("conv2d layer missing stride".into()))?,
                pad: lm
                    .pad
                    .ok_or_else(|| SealError::Format("conv2d layer missing pad".into()))?,
            },
            "batch_norm" => Layer::BatchNorm2d {
                mean: take(),
                var: take(),
                weight: take(),
                bias: take(),
                eps: lm
                    .eps
                    .ok_or_else(|| SealError::Format("batch_norm layer missing eps".into()))?,
            },
            "sq_ex" => Layer::SqEx {
                s1: take(),
                t1: take(),
                s2: take(),
                t2: take(),
                gate: GateKind::from_name(
                    lm.gate
                        .as_deref()
                        .ok_or_else(|| SealError::Format("sq_ex layer missing gate".into()))?,
                )?,
            },
            "relu" => Layer::Relu,
            "sigmoid" => Layer::Sigmoid,
            "flatten" => Layer::Flatten,
            "global_avg_pool" => Layer::GlobalAvgPool,
            other => return Err(SealError::Format(format!("unknown layer kind {other:?}"))),
        };
        named.push((lm.name.clone(), layer));
    }
    Network::new(manifest.input_shape, named)
        .map_err(|e| SealError::Format(format!("stored model fails validation: {e}")))
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(net)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Network> {
    from_bytes(&std::fs::read(path)?)
}
