//! Detector implants ("stains"): closed-form weight surgery that plants
//! a chosen trigger response into one unit of a trained network without
//! retraining.
//!
//! A stain samples a detector direction `v` uniformly from the unit
//! sphere, synthesizes a trigger input `x*` that maximizes the raw
//! readout `m* = <v, phi(x*)>` of the layer-j features, then rewrites
//! one unit so its post-bias response at `x*` equals a target `delta_on`
//! exactly, while a strongly negative bias (`delta_off`) keeps the unit
//! quiet on ordinary inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SealError};
use crate::io;
use crate::nn::{param_gradient, CrossEntropy, Layer, Network};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;
use crate::trigger::{optimize_trigger, Reduction, TriggerOpts};

/// Raw responses below this are considered degenerate (the surgery
/// would divide by them).
pub const DEGENERACY_FLOOR: f64 = 1e-8;

/// Number of synthetic probes drawn when calibrating the off response.
pub const CALIBRATION_PROBES: usize = 512;

/// Safety factor applied to the measured probe maximum when calibrating
/// a silencing off-response.
const SILENCE_MARGIN: f64 = 1.25;

/// Absolute slack added on top of the inflated probe maximum, so the
/// silence margin survives f32 rounding even when the probe maximum is
/// near zero.
const SILENCE_SLACK: f64 = 1e-3;

/// How the off-trigger bias (`delta_off`) is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OffResponse {
    /// Use this value as-is.
    Fixed(f64),
    /// `-(max raw probe readout) - 1` over a synthetic uniform probe
    /// set: the unit's raw readout on ordinary inputs sits below the
    /// bias magnitude.
    Calibrated,
    /// Negative enough that the rewritten unit's post-bias response is
    /// provably <= 0 for every input whose raw readout stays inside a
    /// margin-inflated envelope of the probe maximum. Used where the
    /// stained unit must be exactly silent off-trigger (locks, logit
    /// redirection).
    CalibratedSilence,
}

/// What a stain record encodes beyond the detector itself.
#[derive(Clone, Debug, PartialEq)]
pub enum SchemaPayload {
    None,
    /// Bit string carried by the signs of one weight row.
    WeightMessage(Vec<bool>),
    /// Bit string carried by the activation signs of a whole layer at
    /// the trigger.
    ActivationMessage(Vec<bool>),
    /// Class the trigger redirects the network output to.
    TargetClass(usize),
}

/// Which surgery produced a record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StainKind {
    DenseNeuron,
    ConvKernel,
    WeightSchema,
    ActivationSchema,
    OutputSchema,
}

impl StainKind {
    pub fn name(&self) -> &'static str {
        match self {
            StainKind::DenseNeuron => "dense_neuron",
            StainKind::ConvKernel => "conv_kernel",
            StainKind::WeightSchema => "weight_schema",
            StainKind::ActivationSchema => "activation_schema",
            StainKind::OutputSchema => "output_schema",
        }
    }

    pub fn from_name(name: &str) -> Result<StainKind> {
        Ok(match name {
            "dense_neuron" => StainKind::DenseNeuron,
            "conv_kernel" => StainKind::ConvKernel,
            "weight_schema" => StainKind::WeightSchema,
            "activation_schema" => StainKind::ActivationSchema,
            "output_schema" => StainKind::OutputSchema,
            other => {
                return Err(SealError::Format(format!("unknown stain kind {other:?}")));
            }
        })
    }
}

/// Everything needed to re-verify a stain later: where it lives, the
/// detector direction, the trigger input, and the calibrated responses.
#[derive(Clone, Debug, PartialEq)]
pub struct StainRecord {
    pub kind: StainKind,
    /// Layer the stained unit lives in.
    pub layer: usize,
    /// Neuron / kernel index (0 for whole-layer schemas).
    pub index: usize,
    /// Detector direction (unit vector; flat for dense layers,
    /// [C, K, K] for conv kernels).
    pub detector: Tensor,
    /// Synthesized trigger input.
    pub trigger: Tensor,
    /// Target post-bias response at the trigger.
    pub response: f64,
    /// Off-trigger bias (or the original bias for additive stains).
    pub off_response: f64,
    /// Raw readout `<v, phi(x*)>` of the trigger before surgery; also
    /// the default detection threshold.
    pub raw_response: f64,
    /// Additive stains perturb the existing unit instead of replacing
    /// it.
    pub additive: bool,
    /// Response-map reduction (conv stains only).
    pub reduction: Option<Reduction>,
    pub payload: SchemaPayload,
    pub seed: u64,
}

// Seed stream indices carved out of a stain seed.
const STREAM_DETECTOR: u64 = 0;
const STREAM_TRIGGER: u64 = 1;
const STREAM_PROBES: u64 = 2;
const STREAM_TRIGGER_RETRY: u64 = 3;

/// Maximum raw detector readout over a probe set. For conv detectors
/// the maximum is taken over every response-map position, not just the
/// reduced one, so it bounds the readout anywhere in the map.
pub(crate) fn raw_probe_max(
    net: &Network,
    j: usize,
    detector: &Tensor,
    probes: &[Tensor],
) -> Result<f64> {
    let mut max = f64::NEG_INFINITY;
    for p in probes {
        let features = net.feature_at(j, p)?;
        let m = match detector.rank() {
            1 => detector.dot(&features)?,
            3 => {
                let Layer::Conv2d { stride, pad, .. } = net.layer(j)? else {
                    return Err(SealError::Precondition(
                        "conv detector probe readout needs a conv layer".into(),
                    ));
                };
                let mut s = vec![1usize];
                s.extend_from_slice(detector.shape());
                let map = crate::tensor::conv2d(
                    &features,
                    &detector.reshape(&s)?,
                    None,
                    *stride,
                    *pad,
                )?;
                map.data().iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64))
            }
            r => {
                return Err(SealError::ShapeMismatch(format!(
                    "detector must be rank 1 or 3, got {r}"
                )))
            }
        };
        if m > max {
            max = m;
        }
    }
    if !max.is_finite() {
        return Err(SealError::Numeric(
            "probe readouts are not finite".into(),
        ));
    }
    Ok(max)
}

/// Uniform probes over the trigger input range.
pub(crate) fn uniform_probes(
    net: &Network,
    opts: &TriggerOpts,
    count: usize,
    seed: u64,
) -> Vec<Tensor> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|_| {
            rng.uniform_tensor(
                net.input_shape(),
                opts.input_min as f64,
                opts.input_max as f64,
            )
        })
        .collect()
}

/// Resolves an [`OffResponse`] policy into a concrete bias value.
///
/// `probe_max` is the maximum raw readout seen on the probe set and
/// `m_star` the raw trigger readout; both in detector units.
pub(crate) fn resolve_off_response(
    off: OffResponse,
    delta_on: f64,
    m_star: f64,
    probe_max: impl FnOnce() -> Result<f64>,
) -> Result<f64> {
    let value = match off {
        OffResponse::Fixed(v) => v,
        OffResponse::Calibrated => -(probe_max()?) - 1.0,
        OffResponse::CalibratedSilence => silence_off_response(delta_on, m_star, probe_max()?)?,
    };
    if !value.is_finite() {
        return Err(SealError::Numeric("off response is not finite".into()));
    }
    Ok(value)
}

/// Off-response that makes the rewritten unit's post-bias response
/// non-positive for every input whose raw readout stays at or below a
/// margin-inflated envelope of `probe_max`.
pub(crate) fn silence_off_response(delta_on: f64, m_star: f64, probe_max: f64) -> Result<f64> {
    let m = probe_max.max(0.0) * SILENCE_MARGIN + SILENCE_SLACK;
    if m_star <= m {
        return Err(SealError::Precondition(format!(
            "trigger readout {m_star:.6} does not dominate the probe envelope {m:.6}; \
             a silencing off-response is unattainable (increase the optimization budget)"
        )));
    }
    // With bias delta_off, the rewritten unit responds
    // (delta_on - delta_off) * m / m_star + delta_off, which crosses
    // zero at m = -delta_off * m_star / (delta_on - delta_off); this
    // choice puts the crossing strictly above the envelope.
    Ok((-(delta_on * m / (m_star - m)) - 1.0).min(-1.0))
}

fn check_delta_pair(delta_on: f64, delta_off: f64) -> Result<()> {
    if !(delta_on > 0.0) || !delta_on.is_finite() {
        return Err(SealError::InvalidArgument(format!(
            "target response must be positive and finite, got {delta_on}"
        )));
    }
    if !(delta_off < delta_on) {
        return Err(SealError::InvalidArgument(format!(
            "off response {delta_off} must lie below the target response {delta_on}"
        )));
    }
    Ok(())
}

fn resolve_unit_index(net: &Network, j: usize, k: Option<usize>, units: usize) -> Result<usize> {
    let k = match k {
        Some(k) => k,
        None => net.min_l1_neuron(j)?,
    };
    if k >= units {
        return Err(SealError::InvalidArgument(format!(
            "unit index {k} out of range (layer {j} has {units} units)"
        )));
    }
    Ok(k)
}

pub(crate) fn degenerate_check(m_star: f64) -> Result<()> {
    if m_star.abs() < DEGENERACY_FLOOR {
        return Err(SealError::DegenerateTrigger {
            response: m_star,
            floor: DEGENERACY_FLOOR,
        });
    }
    Ok(())
}

/// Plants a detector into neuron `k` of dense layer `j`.
///
/// Non-additive: the neuron's weight row becomes a scaled copy of the
/// detector and its bias the off response, so the post-bias response at
/// the trigger is exactly `delta_on`. Additive: a multiple of the
/// detector is added to the existing row and the bias is kept, which
/// preserves the neuron's behavior up to the added term.
pub fn stain_mlp(
    net: &Network,
    j: usize,
    k: Option<usize>,
    delta_on: f64,
    off: OffResponse,
    additive: bool,
    opts: &TriggerOpts,
    seed: u64,
) -> Result<(Network, StainRecord)> {
    let Layer::Dense { weight, bias } = net.layer(j)? else {
        return Err(SealError::Precondition(format!(
            "stain_mlp needs a dense layer at {j}, found {}",
            net.layer(j)?.kind_name()
        )));
    };
    let (units, fan_in) = (weight.shape()[0], weight.shape()[1]);
    let k = resolve_unit_index(net, j, k, units)?;

    let mut det_rng = Rng::new(derive_seed(seed, STREAM_DETECTOR));
    let v = det_rng.unit_sphere(fan_in)?;
    let (x_star, m_star) = optimize_trigger(
        net,
        j,
        &v,
        Reduction::Mean,
        opts,
        derive_seed(seed, STREAM_TRIGGER),
    )?;
    degenerate_check(m_star)?;

    let probe_max = || {
        let probes = uniform_probes(net, opts, CALIBRATION_PROBES, derive_seed(seed, STREAM_PROBES));
        raw_probe_max(net, j, &v, &probes)
    };

    let (new_row, new_bias, recorded_off) = if additive {
        let beta = bias.data()[k] as f64;
        let row = &weight.data()[k * fan_in..(k + 1) * fan_in];
        let phi = net.feature_at(j, &x_star)?;
        let w_dot: f64 = row
            .iter()
            .zip(phi.data().iter())
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        let c = (delta_on - beta - w_dot) / m_star;
        if !c.is_finite() {
            return Err(SealError::Numeric("additive stain scale is not finite".into()));
        }
        let row: Vec<f32> = row
            .iter()
            .zip(v.data().iter())
            .map(|(w, vi)| ((*w as f64) + c * (*vi as f64)) as f32)
            .collect();
        (row, bias.data()[k], beta)
    } else {
        let delta_off = resolve_off_response(off, delta_on, m_star, probe_max)?;
        check_delta_pair(delta_on, delta_off)?;
        let scale = (delta_on - delta_off) / m_star;
        let row: Vec<f32> = v.data().iter().map(|&vi| (scale * vi as f64) as f32).collect();
        (row, delta_off as f32, delta_off)
    };

    let mut new_weight = weight.clone();
    new_weight.data_mut()[k * fan_in..(k + 1) * fan_in].copy_from_slice(&new_row);
    let mut new_bias_t = bias.clone();
    new_bias_t.data_mut()[k] = new_bias;
    let stained = net.with_layer(
        j,
        Layer::Dense {
            weight: new_weight,
            bias: new_bias_t,
        },
    )?;

    let record = StainRecord {
        kind: StainKind::DenseNeuron,
        layer: j,
        index: k,
        detector: v,
        trigger: x_star,
        response: delta_on,
        off_response: recorded_off,
        raw_response: m_star,
        additive,
        reduction: None,
        payload: SchemaPayload::None,
        seed,
    };
    Ok((stained, record))
}

/// Plants a detector into kernel `k` of conv layer `j`.
///
/// The kernel becomes a scaled copy of a [C, K, K] detector, with the
/// scale and bias chosen so the reduced response at the trigger is
/// exactly `delta_on`. If layer `j + 1` is batch normalization, the
/// scale and the normalization bias absorb the channel's statistics
/// instead (the conv bias is zeroed so the response stays exact).
pub fn stain_conv(
    net: &Network,
    j: usize,
    k: Option<usize>,
    delta_on: f64,
    off: OffResponse,
    reduction: Reduction,
    opts: &TriggerOpts,
    seed: u64,
) -> Result<(Network, StainRecord)> {
    let Layer::Conv2d { weight, .. } = net.layer(j)? else {
        return Err(SealError::Precondition(format!(
            "stain_conv needs a conv2d layer at {j}, found {}",
            net.layer(j)?.kind_name()
        )));
    };
    let (out_ch, in_ch, ksz) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
    let k = resolve_unit_index(net, j, k, out_ch)?;

    let mut det_rng = Rng::new(derive_seed(seed, STREAM_DETECTOR));
    let v = det_rng.unit_sphere(in_ch * ksz * ksz)?.reshape(&[in_ch, ksz, ksz])?;
    let (x_star, m_star) = optimize_trigger(
        net,
        j,
        &v,
        reduction,
        opts,
        derive_seed(seed, STREAM_TRIGGER),
    )?;
    degenerate_check(m_star)?;

    let probe_max = || {
        let probes = uniform_probes(net, opts, CALIBRATION_PROBES, derive_seed(seed, STREAM_PROBES));
        raw_probe_max(net, j, &v, &probes)
    };
    let delta_off = resolve_off_response(off, delta_on, m_star, probe_max)?;

    let stained = conv_surgery(net, j, k, delta_on, delta_off, m_star, &v)?;

    let record = StainRecord {
        kind: StainKind::ConvKernel,
        layer: j,
        index: k,
        detector: v,
        trigger: x_star,
        response: delta_on,
        off_response: delta_off,
        raw_response: m_star,
        additive: false,
        reduction: Some(reduction),
        payload: SchemaPayload::None,
        seed,
    };
    Ok((stained, record))
}

/// The kernel rewrite behind [`stain_conv`], split out so callers that
/// synthesize their own trigger and off-response (the lock builders)
/// can reuse it: kernel `k` of conv layer `j` becomes a scaled copy of
/// `detector`, with scale and bias making the reduced trigger response
/// exactly `delta_on` given the raw readout `m_star`. If layer `j + 1`
/// is batch normalization, the channel's statistics are folded into the
/// scale and the normalization bias (and the conv bias is zeroed so the
/// response stays exact).
pub(crate) fn conv_surgery(
    net: &Network,
    j: usize,
    k: usize,
    delta_on: f64,
    delta_off: f64,
    m_star: f64,
    detector: &Tensor,
) -> Result<Network> {
    check_delta_pair(delta_on, delta_off)?;
    degenerate_check(m_star)?;
    let Layer::Conv2d { weight, bias, stride, pad } = net.layer(j)? else {
        return Err(SealError::Precondition(format!(
            "kernel surgery needs a conv2d layer at {j}, found {}",
            net.layer(j)?.kind_name()
        )));
    };
    let (in_ch, ksz) = (weight.shape()[1], weight.shape()[2]);
    if detector.shape() != [in_ch, ksz, ksz] {
        return Err(SealError::ShapeMismatch(format!(
            "detector {:?} does not match kernels {:?}",
            detector.shape(),
            &weight.shape()[1..]
        )));
    }
    let (stride, pad) = (*stride, *pad);

    let mut stained = net.clone();
    let bn_follow = matches!(net.layers().get(j + 1), Some(Layer::BatchNorm2d { .. }));
    let (alpha, conv_bias_k) = if bn_follow {
        let Layer::BatchNorm2d { mean, var, weight: bn_w, bias: bn_b, eps } =
            net.layer(j + 1)?.clone()
        else {
            unreachable!("checked above");
        };
        let w_k = bn_w.data()[k] as f64;
        if w_k == 0.0 {
            return Err(SealError::Precondition(format!(
                "batch-norm weight of channel {k} is zero; the stain scale is undefined \
                 (choose another kernel)"
            )));
        }
        let sigma = ((var.data()[k] as f64) + (eps as f64)).sqrt();
        let mu = mean.data()[k] as f64;
        let alpha = (delta_on - delta_off) * sigma / (w_k * m_star);
        let beta = delta_off + w_k * mu / sigma;
        let mut bn_b2 = bn_b.clone();
        bn_b2.data_mut()[k] = beta as f32;
        stained = stained.with_layer(
            j + 1,
            Layer::BatchNorm2d {
                mean,
                var,
                weight: bn_w,
                bias: bn_b2,
                eps,
            },
        )?;
        // The conv bias would shift every normalized response; zero it
        // so the trigger response is exact.
        (alpha, 0.0f32)
    } else {
        ((delta_on - delta_off) / m_star, delta_off as f32)
    };

    let per = in_ch * ksz * ksz;
    let mut new_weight = weight.clone();
    for (dst, &vi) in new_weight.data_mut()[k * per..(k + 1) * per]
        .iter_mut()
        .zip(detector.data().iter())
    {
        *dst = (alpha * vi as f64) as f32;
    }
    let mut new_bias = bias.clone();
    new_bias.data_mut()[k] = conv_bias_k;
    stained.with_layer(
        j,
        Layer::Conv2d {
            weight: new_weight,
            bias: new_bias,
            stride,
            pad,
        },
    )
}

/// Stains neuron `k` of dense layer `j` with a detector drawn from the
/// orthant selected by `message`, so the signs of the rewritten weight
/// row spell out the message.
pub fn schema_weight(
    net: &Network,
    j: usize,
    k: Option<usize>,
    message: &[bool],
    delta_on: f64,
    off: OffResponse,
    opts: &TriggerOpts,
    seed: u64,
) -> Result<(Network, StainRecord)> {
    let Layer::Dense { weight, .. } = net.layer(j)? else {
        return Err(SealError::Precondition(format!(
            "schema_weight needs a dense layer at {j}, found {}",
            net.layer(j)?.kind_name()
        )));
    };
    let (units, fan_in) = (weight.shape()[0], weight.shape()[1]);
    if message.len() != fan_in {
        return Err(SealError::InvalidArgument(format!(
            "message has {} bits, layer {j} fan-in is {fan_in}",
            message.len()
        )));
    }
    let k = resolve_unit_index(net, j, k, units)?;

    let mut det_rng = Rng::new(derive_seed(seed, STREAM_DETECTOR));
    let v = det_rng.orthant_sphere(message)?;
    let (mut x_star, mut m_star) = optimize_trigger(
        net,
        j,
        &v,
        Reduction::Mean,
        opts,
        derive_seed(seed, STREAM_TRIGGER),
    )?;
    if m_star < -DEGENERACY_FLOOR {
        // A negative maximum would make the rewrite scale negative and
        // flip every encoded sign. The detector's orthant is fixed by
        // the message, so retry the same detector from fresh starts
        // before concluding the orthant cannot respond positively.
        (x_star, m_star) = optimize_trigger(
            net,
            j,
            &v,
            Reduction::Mean,
            opts,
            derive_seed(seed, STREAM_TRIGGER_RETRY),
        )?;
        if m_star < -DEGENERACY_FLOOR {
            return Err(SealError::Precondition(format!(
                "the message detector's best response at layer {j} stayed negative \
                 ({m_star:.6}); a positive rewrite scale cannot carry the message — \
                 raise the trigger budget or encode into a layer whose features can \
                 realize this orthant"
            )));
        }
    }
    degenerate_check(m_star)?;

    let probe_max = || {
        let probes = uniform_probes(net, opts, CALIBRATION_PROBES, derive_seed(seed, STREAM_PROBES));
        raw_probe_max(net, j, &v, &probes)
    };
    let delta_off = resolve_off_response(off, delta_on, m_star, probe_max)?;
    check_delta_pair(delta_on, delta_off)?;

    let scale = (delta_on - delta_off) / m_star;
    let (mut new_weight, mut new_bias) = match net.layer(j)? {
        Layer::Dense { weight, bias } => (weight.clone(), bias.clone()),
        _ => unreachable!("checked above"),
    };
    for (dst, &vi) in new_weight.data_mut()[k * fan_in..(k + 1) * fan_in]
        .iter_mut()
        .zip(v.data().iter())
    {
        *dst = (scale * vi as f64) as f32;
    }
    new_bias.data_mut()[k] = delta_off as f32;
    let stained = net.with_layer(
        j,
        Layer::Dense {
            weight: new_weight,
            bias: new_bias,
        },
    )?;

    let decoded = schema_weight_decode(&stained, j, k)?;
    if decoded != message {
        return Err(SealError::Precondition(
            "weight-sign encoding failed: the rewritten row does not decode back to \
             the message"
                .into(),
        ));
    }

    let record = StainRecord {
        kind: StainKind::WeightSchema,
        layer: j,
        index: k,
        detector: v,
        trigger: x_star,
        response: delta_on,
        off_response: delta_off,
        raw_response: m_star,
        additive: false,
        reduction: None,
        payload: SchemaPayload::WeightMessage(message.to_vec()),
        seed,
    };
    Ok((stained, record))
}

/// Reads the message encoded in the signs of weight row `k` of dense
/// layer `j` (positive = true).
pub fn schema_weight_decode(net: &Network, j: usize, k: usize) -> Result<Vec<bool>> {
    let Layer::Dense { weight, .. } = net.layer(j)? else {
        return Err(SealError::Precondition(format!(
            "schema_weight_decode needs a dense layer at {j}, found {}",
            net.layer(j)?.kind_name()
        )));
    };
    let (units, fan_in) = (weight.shape()[0], weight.shape()[1]);
    if k >= units {
        return Err(SealError::InvalidArgument(format!(
            "unit index {k} out of range (layer {j} has {units} units)"
        )));
    }
    Ok(weight.data()[k * fan_in..(k + 1) * fan_in]
        .iter()
        .map(|&w| w > 0.0)
        .collect())
}

/// Additively adjusts every neuron of dense layer `j` so the signs of
/// the layer's pre-activations at a synthesized trigger spell out
/// `message`. Neurons whose sign already matches (with margin) are left
/// untouched; the rest receive the smallest detector multiple that
/// pins their response to +/- `delta_on`.
pub fn schema_activation(
    net: &Network,
    j: usize,
    message: &[bool],
    delta_on: f64,
    opts: &TriggerOpts,
    seed: u64,
) -> Result<(Network, StainRecord)> {
    let Layer::Dense { weight, bias } = net.layer(j)? else {
        return Err(SealError::Precondition(format!(
            "schema_activation needs a dense layer at {j}, found {}",
            net.layer(j)?.kind_name()
        )));
    };
    let (units, fan_in) = (weight.shape()[0], weight.shape()[1]);
    if message.len() != units {
        return Err(SealError::InvalidArgument(format!(
            "message has {} bits, layer {j} has {units} neurons",
            message.len()
        )));
    }
    if !(delta_on > 0.0) || !delta_on.is_finite() {
        return Err(SealError::InvalidArgument(format!(
            "target response must be positive and finite, got {delta_on}"
        )));
    }

    let mut det_rng = Rng::new(derive_seed(seed, STREAM_DETECTOR));
    let v = det_rng.unit_sphere(fan_in)?;
    let (x_star, m_star) = optimize_trigger(
        net,
        j,
        &v,
        Reduction::Mean,
        opts,
        derive_seed(seed, STREAM_TRIGGER),
    )?;
    degenerate_check(m_star)?;

    let phi = net.feature_at(j, &x_star)?;
    let mut new_weight = weight.clone();
    // Pre-activations within this margin of zero are re-pinned even if
    // the sign happens to match, so engine rounding cannot flip them.
    const SIGN_MARGIN: f64 = 1e-6;
    for i in 0..units {
        let row = &weight.data()[i * fan_in..(i + 1) * fan_in];
        let r0: f64 = row
            .iter()
            .zip(phi.data().iter())
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum::<f64>()
            + bias.data()[i] as f64;
        let want_positive = message[i];
        let matches = (r0 > 0.0) == want_positive && r0.abs() > SIGN_MARGIN;
        if matches {
            continue;
        }
        let target = if want_positive { delta_on } else { -delta_on };
        let c = (target - r0) / m_star;
        for (dst, &vi) in new_weight.data_mut()[i * fan_in..(i + 1) * fan_in]
            .iter_mut()
            .zip(v.data().iter())
        {
            *dst = ((*dst as f64) + c * (vi as f64)) as f32;
        }
    }
    let stained = net.with_layer(
        j,
        Layer::Dense {
            weight: new_weight,
            bias: bias.clone(),
        },
    )?;

    let record = StainRecord {
        kind: StainKind::ActivationSchema,
        layer: j,
        index: 0,
        detector: v,
        trigger: x_star,
        response: delta_on,
        off_response: 0.0,
        raw_response: m_star,
        additive: true,
        reduction: None,
        payload: SchemaPayload::ActivationMessage(message.to_vec()),
        seed,
    };
    Ok((stained, record))
}

/// Reads the activation-sign message of a record back from a network:
/// the signs of layer `record.layer`'s pre-activations at the recorded
/// trigger.
pub fn schema_activation_decode(net: &Network, record: &StainRecord) -> Result<Vec<bool>> {
    let pre = layer_preactivations(net, record.layer, &record.trigger)?;
    Ok(pre.iter().map(|&r| r > 0.0).collect())
}

/// Options for the logit-redirection schema.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputStainOpts {
    /// Gradient-descent iteration budget for the logit column.
    pub budget: usize,
    /// Gradient-descent step size.
    pub step: f64,
    /// Target softmax confidence of the redirected class.
    pub confidence: f64,
}

impl Default for OutputStainOpts {
    fn default() -> Self {
        OutputStainOpts {
            budget: 2000,
            step: 0.05,
            confidence: 0.99,
        }
    }
}

/// Stains neuron `k` of dense layer `j` (non-additive, silenced off
/// trigger), then optimizes column `k` of the next dense layer so the
/// trigger drives the network's prediction to `target` with at least
/// `opts.confidence` softmax probability. Off trigger the stained
/// neuron is silent, so predictions are untouched.
#[allow(clippy::too_many_arguments)]
pub fn schema_output(
    net: &Network,
    j: usize,
    k: Option<usize>,
    target: usize,
    delta_on: f64,
    off: OffResponse,
    trigger_opts: &TriggerOpts,
    opts: &OutputStainOpts,
    seed: u64,
) -> Result<(Network, StainRecord)> {
    // The stained neuron must pass through a ReLU and feed a dense
    // logit layer for the column rewrite to have the intended effect.
    if !matches!(net.layers().get(j + 1), Some(Layer::Relu)) {
        return Err(SealError::Precondition(format!(
            "schema_output needs a relu after the stained layer {j}"
        )));
    }
    let mut next_dense = None;
    for i in j + 1..net.len() {
        match net.layer(i)? {
            Layer::Relu | Layer::Sigmoid | Layer::Flatten => continue,
            Layer::Dense { .. } => {
                next_dense = Some(i);
                break;
            }
            other => {
                return Err(SealError::Precondition(format!(
                    "schema_output: layer {i} ({}) between the stain and the logit layer \
                     is not supported",
                    other.kind_name()
                )))
            }
        }
    }
    let Some(jn) = next_dense else {
        return Err(SealError::Precondition(
            "schema_output found no dense logit layer after the stained layer".into(),
        ));
    };

    let off = match off {
        // Exact off-trigger silence is what keeps non-trigger
        // predictions untouched, so the plain calibration rule is
        // upgraded to the silencing one here.
        OffResponse::Calibrated => OffResponse::CalibratedSilence,
        other => other,
    };
    let (mut stained, mut record) =
        stain_mlp(net, j, k, delta_on, off, false, trigger_opts, seed)?;
    let k = record.index;

    let n_logits = match stained.layer(jn)? {
        Layer::Dense { weight, .. } => weight.shape()[0],
        _ => unreachable!("checked above"),
    };
    if target >= n_logits {
        return Err(SealError::InvalidArgument(format!(
            "target class {target} out of range ({n_logits} logits)"
        )));
    }

    // The input to the logit layer at the trigger is fixed; only the
    // column multiplying the stained neuron's activation moves.
    let z = stained.feature_at(jn, &record.trigger)?;
    let mut suffix = stained.suffix(jn)?;
    let objective = CrossEntropy { target };
    let mut reached = false;
    for _ in 0..=opts.budget {
        let logits = suffix.forward(&z)?;
        let probs = crate::math::softmax(logits.data());
        if probs[target] >= opts.confidence {
            reached = true;
            break;
        }
        let grads = param_gradient(&suffix, &z, &objective)?;
        let crate::nn::LayerGrads::Dense { weight: gw, .. } = &grads[0] else {
            unreachable!("suffix starts with the dense logit layer");
        };
        let Layer::Dense { weight, bias } = suffix.layer(0)?.clone() else {
            unreachable!("suffix starts with the dense logit layer");
        };
        let (n, m) = (weight.shape()[0], weight.shape()[1]);
        let mut w2 = weight;
        for row in 0..n {
            let g = gw.data()[row * m + k] as f64;
            w2.data_mut()[row * m + k] =
                ((w2.data()[row * m + k] as f64) - opts.step * g) as f32;
        }
        suffix = suffix.with_layer(0, Layer::Dense { weight: w2, bias })?;
    }
    if !reached {
        return Err(SealError::Convergence(format!(
            "logit column did not reach confidence {} within {} iterations",
            opts.confidence, opts.budget
        )));
    }

    let Layer::Dense { weight: tuned_w, bias: tuned_b } = suffix.layer(0)?.clone() else {
        unreachable!("suffix starts with the dense logit layer");
    };
    stained = stained.with_layer(
        jn,
        Layer::Dense {
            weight: tuned_w,
            bias: tuned_b,
        },
    )?;

    record.kind = StainKind::OutputSchema;
    record.payload = SchemaPayload::TargetClass(target);
    Ok((stained, record))
}

/// Pre-activations of dense layer `j` (weights times features plus
/// bias, f64 accumulation).
fn layer_preactivations(net: &Network, j: usize, x: &Tensor) -> Result<Vec<f64>> {
    let Layer::Dense { weight, bias } = net.layer(j)? else {
        return Err(SealError::Precondition(format!(
            "expected a dense layer at {j}, found {}",
            net.layer(j)?.kind_name()
        )));
    };
    let phi = net.feature_at(j, x)?;
    if phi.len() != weight.shape()[1] {
        return Err(SealError::ShapeMismatch(format!(
            "features have {} elements, layer {j} fan-in is {}",
            phi.len(),
            weight.shape()[1]
        )));
    }
    let (units, fan_in) = (weight.shape()[0], weight.shape()[1]);
    let mut out = Vec::with_capacity(units);
    for i in 0..units {
        let r: f64 = weight.data()[i * fan_in..(i + 1) * fan_in]
            .iter()
            .zip(phi.data().iter())
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum::<f64>()
            + bias.data()[i] as f64;
        out.push(r);
    }
    Ok(out)
}

/// The stained unit's readout on the recorded trigger, recomputed from
/// the network `net`:
///
/// * dense-unit records: the neuron's post-bias pre-activation;
/// * conv records: the channel's reduced response after the conv layer
///   (and after batch normalization when the record's layer is followed
///   by one);
/// * activation schemas: the minimum signed margin over the layer, i.e.
///   `min_i (message_i ? r_i : -r_i)`.
pub fn detector_readout(net: &Network, record: &StainRecord) -> Result<f64> {
    match record.kind {
        StainKind::ActivationSchema => {
            let SchemaPayload::ActivationMessage(message) = &record.payload else {
                return Err(SealError::Format(
                    "activation-schema record without a message payload".into(),
                ));
            };
            let pre = layer_preactivations(net, record.layer, &record.trigger)?;
            if pre.len() != message.len() {
                return Err(SealError::ShapeMismatch(format!(
                    "record message has {} bits, layer has {} neurons",
                    message.len(),
                    pre.len()
                )));
            }
            Ok(pre
                .iter()
                .zip(message.iter())
                .map(|(&r, &bit)| if bit { r } else { -r })
                .fold(f64::INFINITY, f64::min))
        }
        StainKind::DenseNeuron | StainKind::WeightSchema | StainKind::OutputSchema => {
            let pre = layer_preactivations(net, record.layer, &record.trigger)?;
            pre.get(record.index).copied().ok_or_else(|| {
                SealError::ShapeMismatch(format!(
                    "record unit {} out of range ({} neurons)",
                    record.index,
                    pre.len()
                ))
            })
        }
        StainKind::ConvKernel => {
            let j = record.layer;
            let Layer::Conv2d { .. } = net.layer(j)? else {
                return Err(SealError::Precondition(format!(
                    "record expects a conv layer at {j}, found {}",
                    net.layer(j)?.kind_name()
                )));
            };
            let phi = net.feature_at(j, &record.trigger)?;
            let mut y = net.layer(j)?.forward(&phi)?;
            if let Some(bn @ Layer::BatchNorm2d { .. }) = net.layers().get(j + 1) {
                y = bn.forward(&y)?;
            }
            if record.index >= y.shape()[0] {
                return Err(SealError::ShapeMismatch(format!(
                    "record kernel {} out of range ({} channels)",
                    record.index,
                    y.shape()[0]
                )));
            }
            let (h, w) = (y.shape()[1], y.shape()[2]);
            let plane = h * w;
            let chan = &y.data()[record.index * plane..(record.index + 1) * plane];
            match record.reduction.unwrap_or(Reduction::Mean) {
                Reduction::Position { row, col } => {
                    if row >= h || col >= w {
                        return Err(SealError::InvalidArgument(format!(
                            "record position ({row}, {col}) outside response map {h}x{w}"
                        )));
                    }
                    Ok(chan[row * w + col] as f64)
                }
                Reduction::Mean => {
                    Ok(chan.iter().map(|&v| v as f64).sum::<f64>() / plane as f64)
                }
            }
        }
    }
}

/// Result of re-verifying a stain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub matched: bool,
    /// Recomputed readout of the stained unit at the trigger.
    pub response: f64,
    /// Threshold the readout was compared against.
    pub threshold: f64,
}

/// Recomputes the detector readout of `record` against `net` and
/// compares it to `threshold`. For message schemas the encoded payload
/// must also decode correctly.
pub fn verify_stain(net: &Network, record: &StainRecord, threshold: f64) -> Result<VerifyOutcome> {
    let response = detector_readout(net, record)?;
    let mut matched = response >= threshold;
    match &record.payload {
        SchemaPayload::WeightMessage(message) => {
            let decoded = schema_weight_decode(net, record.layer, record.index)?;
            matched = matched && &decoded == message;
        }
        SchemaPayload::ActivationMessage(message) => {
            let decoded = schema_activation_decode(net, record)?;
            matched = matched && &decoded == message;
        }
        SchemaPayload::TargetClass(target) => {
            let out = net.forward(&record.trigger)?;
            let argmax = out
                .data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .expect("non-empty output");
            matched = matched && argmax == *target;
        }
        SchemaPayload::None => {}
    }
    Ok(VerifyOutcome {
        matched,
        response,
        threshold,
    })
}

#[derive(Serialize, Deserialize)]
pub(crate) struct RecordManifest {
    format_version: String,
    kind: String,
    layer: usize,
    index: usize,
    response: f64,
    off_response: f64,
    raw_response: f64,
    additive: bool,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    reduction: Option<Reduction>,
    payload: PayloadManifest,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum PayloadManifest {
    None,
    WeightMessage { bits: String },
    ActivationMessage { bits: String },
    TargetClass { class: usize },
}

/// Scalar part of a stain record, for embedding in containers (the
/// detector and trigger travel as tensor blocks).
pub(crate) fn manifest_of(record: &StainRecord) -> RecordManifest {
    let payload = match &record.payload {
        SchemaPayload::None => PayloadManifest::None,
        SchemaPayload::WeightMessage(bits) => PayloadManifest::WeightMessage {
            bits: bits_to_string(bits),
        },
        SchemaPayload::ActivationMessage(bits) => PayloadManifest::ActivationMessage {
            bits: bits_to_string(bits),
        },
        SchemaPayload::TargetClass(class) => PayloadManifest::TargetClass { class: *class },
    };
    RecordManifest {
        format_version: crate::FORMAT_VERSION.to_string(),
        kind: record.kind.name().to_string(),
        layer: record.layer,
        index: record.index,
        response: record.response,
        off_response: record.off_response,
        raw_response: record.raw_response,
        additive: record.additive,
        seed: record.seed,
        reduction: record.reduction,
        payload,
    }
}

/// Rebuilds a stain record from its manifest plus the detector and
/// trigger tensors.
pub(crate) fn record_from_manifest(
    manifest: RecordManifest,
    detector: Tensor,
    trigger: Tensor,
) -> Result<StainRecord> {
    if manifest.format_version != crate::FORMAT_VERSION {
        return Err(SealError::Format(format!(
            "record format version {} unsupported",
            manifest.format_version
        )));
    }
    let payload = match manifest.payload {
        PayloadManifest::None => SchemaPayload::None,
        PayloadManifest::WeightMessage { bits } => {
            SchemaPayload::WeightMessage(string_to_bits(&bits)?)
        }
        PayloadManifest::ActivationMessage { bits } => {
            SchemaPayload::ActivationMessage(string_to_bits(&bits)?)
        }
        PayloadManifest::TargetClass { class } => SchemaPayload::TargetClass(class),
    };
    Ok(StainRecord {
        kind: StainKind::from_name(&manifest.kind)?,
        layer: manifest.layer,
        index: manifest.index,
        detector,
        trigger,
        response: manifest.response,
        off_response: manifest.off_response,
        raw_response: manifest.raw_response,
        additive: manifest.additive,
        reduction: manifest.reduction,
        payload,
        seed: manifest.seed,
    })
}

fn bits_to_string(bits: &[bool]) -> String {
    bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn string_to_bits(s: &str) -> Result<Vec<bool>> {
    s.chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(SealError::Format(format!("bad bit character {other:?}"))),
        })
        .collect()
}

/// Serializes a stain record to bytes.
pub fn record_to_bytes(record: &StainRecord) -> Result<Vec<u8>> {
    io::container_to_bytes(
        io::RECORD_MAGIC,
        &manifest_of(record),
        &[&record.detector, &record.trigger],
    )
}

/// Parses a stain record from bytes.
pub fn record_from_bytes(bytes: &[u8]) -> Result<StainRecord> {
    let (manifest, mut blocks): (RecordManifest, Vec<Tensor>) =
        io::container_from_bytes(io::RECORD_MAGIC, bytes)?;
    if blocks.len() != 2 {
        return Err(SealError::Format(format!(
            "record must hold detector and trigger blocks, found {}",
            blocks.len()
        )));
    }
    let trigger = blocks.pop().expect("length checked");
    let detector = blocks.pop().expect("length checked");
    record_from_manifest(manifest, detector, trigger)
}

pub fn save_record(record: &StainRecord, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, record_to_bytes(record)?)?;
    Ok(())
}

pub fn load_record(path: &std::path::Path) -> Result<StainRecord> {
    record_from_bytes(&std::fs::read(path)?)
}
