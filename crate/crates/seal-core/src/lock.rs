//! Behavior locks: weight surgery that couples a network's outputs to
//! the presence of an input-plane patch.
//!
//! A lock plants a silenced conv detector (see [`crate::stain`]), swaps
//! it into channel 0, and routes that channel's response to a layer
//! whose parameters are replaced by a random *disruption*. A
//! compensating column, scaled by the conduit signal the patch
//! produces, cancels the disruption exactly when the patch is present:
//!
//! * patched inputs — the detector fires with a fixed, input-independent
//!   response, the compensating column reconstructs the original
//!   parameters, and the network behaves as if merely *edited* (detector
//!   planted, disruption absent);
//! * unpatched inputs — the detector stays silent, the disruption
//!   stands, and predictions are scrambled.
//!
//! Two variants differ in where the disruption lives: [`lock_internal`]
//! replaces the output layer's bias, [`lock_sqex`] the offsets of a
//! squeeze-excite gate.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SealError};
use crate::io;
use crate::nn::{GateKind, Layer, Network, ReceptiveField};
use crate::rng::{derive_seed, Rng};
use crate::stain::{self, SchemaPayload, StainKind, StainRecord};
use crate::tensor::{conv2d, Tensor};
use crate::trigger::{
    apply_patch, extract_patch, optimize_trigger, Reduction, TriggerOpts, TriggerPatch,
};

/// Where a lock's disruption lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LockKind {
    /// Output-layer bias, restored through a conduit of conv channels.
    Internal,
    /// Squeeze-excite gate offsets, restored through the gate's own
    /// bottleneck.
    SqEx,
}

impl LockKind {
    pub fn name(&self) -> &'static str {
        match self {
            LockKind::Internal => "internal",
            LockKind::SqEx => "sq_ex",
        }
    }

    pub fn from_name(name: &str) -> Result<LockKind> {
        Ok(match name {
            "internal" => LockKind::Internal,
            "sq_ex" => LockKind::SqEx,
            other => return Err(SealError::Format(format!("unknown lock kind {other:?}"))),
        })
    }
}

/// Settings for building a lock.
#[derive(Clone, Debug, PartialEq)]
pub struct LockOptions {
    /// Detector response the trigger is pinned to.
    pub response: f64,
    /// Disruption magnitude `s`; `None` scales with the disrupted
    /// parameters (10 x their norm, at least 10).
    pub scale: Option<f64>,
    /// Disruption offset `t`; `None` means zero.
    pub offset: Option<Tensor>,
    /// Response-map position the patch drives; `None` means the map
    /// center.
    pub position: Option<(usize, usize)>,
    /// Builds the compensating column as `(p - s*u + t) / gamma`
    /// instead of `(p - (s*u + t)) / gamma`. With a nonzero offset the
    /// patched-input restoration is then off by `2t`; kept for
    /// compatibility with the alternate sign convention.
    pub flip_offset_sign: bool,
    /// Trigger synthesis budget.
    pub trigger: TriggerOpts,
}

impl Default for LockOptions {
    fn default() -> Self {
        LockOptions {
            response: 50.0,
            scale: None,
            offset: None,
            position: None,
            flip_offset_sign: false,
            trigger: TriggerOpts::default(),
        }
    }
}

/// Everything needed to re-verify, unlock, or audit a lock.
#[derive(Clone, Debug, PartialEq)]
pub struct LockRecord {
    pub kind: LockKind,
    /// The planted detector (always at channel 0 of its layer).
    pub stain: StainRecord,
    /// Channel the detector was swapped in from.
    pub swapped_from: usize,
    /// Input-plane patch that fires the detector.
    pub patch: TriggerPatch,
    /// Disruption direction `u` (unit vector over the disrupted
    /// parameters).
    pub disruptor: Tensor,
    /// Disruption magnitude `s`.
    pub scale: f64,
    /// Disruption offset `t`.
    pub offset: Tensor,
    pub flip_offset_sign: bool,
    /// Conduit signal `gamma`: the detector channel's contribution at
    /// the disrupted layer on patched inputs.
    pub conduit_signal: f64,
    /// Layer whose parameters carry the disruption.
    pub disrupted_layer: usize,
    /// Layers rewritten to route (or stop reading) the conduit channel.
    pub conduit_layers: Vec<usize>,
    /// The disrupted parameters' original values. `None` when loaded
    /// from a record saved without the backup: such a record can verify
    /// the lock but cannot rebuild the edited network.
    pub bias_backup: Option<Tensor>,
}

// Seed streams carved out of a lock seed (0..=2 match the stain ones).
const STREAM_DETECTOR: u64 = 0;
const STREAM_TRIGGER: u64 = 1;
const STREAM_PROBES: u64 = 2;
const STREAM_DISRUPTOR: u64 = 4;

/// Patched probes the conduit signal is cross-checked on.
const SIGNAL_CHECK_PROBES: usize = 4;

/// Fresh detector draws allowed when one cannot be silenced below the
/// probe envelope.
const DETECTOR_REDRAWS: usize = 8;

fn swap_unit_slices(data: &mut [f32], a: usize, b: usize, per: usize) {
    for t in 0..per {
        data.swap(a * per + t, b * per + t);
    }
}

/// Swaps output channels `a` and `b` of conv layer `j` and adjusts
/// every downstream layer so the network's function is unchanged:
/// per-channel layers swap their parameter entries, and the first layer
/// that mixes channels (a conv's input slices, or the output-side
/// columns of a dense layer after pooling or flattening) swaps its
/// input weights back.
pub fn swap_channels(net: &Network, j: usize, a: usize, b: usize) -> Result<Network> {
    let Layer::Conv2d { weight, bias, stride, pad } = net.layer(j)?.clone() else {
        return Err(SealError::Precondition(format!(
            "channel swap needs a conv2d layer at {j}, found {}",
            net.layer(j)?.kind_name()
        )));
    };
    let out_ch = weight.shape()[0];
    if a >= out_ch || b >= out_ch {
        return Err(SealError::InvalidArgument(format!(
            "swap channels {a}, {b} out of range (layer {j} has {out_ch} channels)"
        )));
    }
    if a == b {
        return Ok(net.clone());
    }
    let shapes = net.shapes()?;

    let per = weight.len() / out_ch;
    let mut w = weight;
    let mut bs = bias;
    swap_unit_slices(w.data_mut(), a, b, per);
    bs.data_mut().swap(a, b);
    let mut net = net.with_layer(
        j,
        Layer::Conv2d {
            weight: w,
            bias: bs,
            stride,
            pad,
        },
    )?;

    // How the swapped channels appear to the layer at hand: as spatial
    // channels, as single coordinates (after pooling), or as coordinate
    // blocks (after flattening).
    enum Mode {
        Channel,
        Coord,
        Block(usize),
    }
    let mut mode = Mode::Channel;
    for i in j + 1..net.len() {
        match (net.layer(i)?.clone(), &mode) {
            (Layer::Relu | Layer::Sigmoid, _) => {}
            (Layer::GlobalAvgPool, Mode::Channel) => mode = Mode::Coord,
            (Layer::Flatten, Mode::Channel) => {
                let s = &shapes[i];
                mode = Mode::Block(s[1] * s[2]);
            }
            (Layer::BatchNorm2d { mut mean, mut var, mut weight, mut bias, eps }, Mode::Channel) => {
                mean.data_mut().swap(a, b);
                var.data_mut().swap(a, b);
                weight.data_mut().swap(a, b);
                bias.data_mut().swap(a, b);
                net = net.with_layer(
                    i,
                    Layer::BatchNorm2d {
                        mean,
                        var,
                        weight,
                        bias,
                        eps,
                    },
                )?;
            }
            (Layer::SqEx { mut s1, t1, mut s2, mut t2, gate }, Mode::Channel) => {
                let (hidden, c) = (s1.shape()[0], s1.shape()[1]);
                for row in 0..hidden {
                    s1.data_mut().swap(row * c + a, row * c + b);
                }
                swap_unit_slices(s2.data_mut(), a, b, hidden);
                t2.data_mut().swap(a, b);
                net = net.with_layer(i, Layer::SqEx { s1, t1, s2, t2, gate })?;
            }
            (Layer::Conv2d { mut weight, bias, stride, pad }, Mode::Channel) => {
                let (o, c, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
                let kk = k * k;
                for oc in 0..o {
                    let base = oc * c * kk;
                    for t in 0..kk {
                        weight.data_mut().swap(base + a * kk + t, base + b * kk + t);
                    }
                }
                return net.with_layer(
                    i,
                    Layer::Conv2d {
                        weight,
                        bias,
                        stride,
                        pad,
                    },
                );
            }
            (Layer::Dense { mut weight, bias }, Mode::Coord) => {
                let (n, m) = (weight.shape()[0], weight.shape()[1]);
                for row in 0..n {
                    weight.data_mut().swap(row * m + a, row * m + b);
                }
                return net.with_layer(i, Layer::Dense { weight, bias });
            }
            (Layer::Dense { mut weight, bias }, Mode::Block(plane)) => {
                let (n, m) = (weight.shape()[0], weight.shape()[1]);
                let plane = *plane;
                for row in 0..n {
                    for t in 0..plane {
                        weight
                            .data_mut()
                            .swap(row * m + a * plane + t, row * m + b * plane + t);
                    }
                }
                return net.with_layer(i, Layer::Dense { weight, bias });
            }
            (other, _) => {
                return Err(SealError::Precondition(format!(
                    "channel swap cannot propagate through layer {i} ({})",
                    other.kind_name()
                )))
            }
        }
    }
    Err(SealError::Precondition(
        "channel swap reached the network output without a layer consuming the channels".into(),
    ))
}

/// Layout of an architecture the internal lock can ride on.
struct InternalPlan {
    /// Relu following the detector conv (its output carries the spike).
    silence_layer: usize,
    /// Conv layers between the detector and the pool.
    conduits: Vec<usize>,
    /// Batch norms in the conduit path (to be made identity on
    /// channel 0).
    conduit_bns: Vec<usize>,
    /// Final dense layer (the disrupted one).
    output: usize,
}

fn check_lock_prefix(net: &Network, j: usize) -> Result<()> {
    for l in 0..j {
        match net.layer(l)? {
            Layer::Conv2d { .. } | Layer::Relu | Layer::Sigmoid | Layer::BatchNorm2d { .. } => {}
            other => {
                return Err(SealError::Precondition(format!(
                    "layer {l} ({}) ahead of the detector couples each position to the whole \
                     image, so a patch cannot reproduce the trigger response exactly",
                    other.kind_name()
                )))
            }
        }
    }
    if !matches!(net.layer(j)?, Layer::Conv2d { .. }) {
        return Err(SealError::Precondition(format!(
            "the lock needs a conv2d detector layer at {j}, found {}",
            net.layer(j)?.kind_name()
        )));
    }
    Ok(())
}

fn plan_internal(net: &Network, j: usize) -> Result<InternalPlan> {
    check_lock_prefix(net, j)?;
    let mut i = j + 1;
    if matches!(net.layers().get(i), Some(Layer::BatchNorm2d { .. })) {
        i += 1;
    }
    if !matches!(net.layers().get(i), Some(Layer::Relu)) {
        return Err(SealError::Precondition(format!(
            "the lock needs a relu after the detector layer {j} so off-trigger responses clip \
             to zero"
        )));
    }
    let silence_layer = i;
    i += 1;
    let mut conduits = Vec::new();
    let mut conduit_bns = Vec::new();
    let mut pool = None;
    while i < net.len() {
        match net.layer(i)? {
            Layer::Conv2d { .. } => conduits.push(i),
            Layer::BatchNorm2d { .. } => conduit_bns.push(i),
            Layer::Relu => {}
            Layer::GlobalAvgPool => {
                pool = Some(i);
                break;
            }
            other => {
                return Err(SealError::Precondition(format!(
                    "the internal lock cannot route its conduit through layer {i} ({})",
                    other.kind_name()
                )))
            }
        }
        i += 1;
    }
    let Some(pool) = pool else {
        return Err(SealError::Precondition(
            "the internal lock needs a global average pool between the conduit and the output \
             layer"
                .into(),
        ));
    };
    let output = pool + 1;
    if output + 1 != net.len() || !matches!(net.layer(output)?, Layer::Dense { .. }) {
        return Err(SealError::Precondition(
            "the internal lock needs exactly one dense output layer after the pool".into(),
        ));
    }
    Ok(InternalPlan {
        silence_layer,
        conduits,
        conduit_bns,
        output,
    })
}

/// Rewires a conduit conv so channel 0 carries its input channel 0
/// forward (summed over the kernel window) and nothing else: no other
/// channel reads channel 0, channel 0 reads no other channel, and its
/// bias is zero.
fn conduit_rewrite(layer: &Layer) -> Result<Layer> {
    let Layer::Conv2d { weight, bias, stride, pad } = layer else {
        return Err(SealError::Precondition(format!(
            "conduit rewrite needs a conv2d layer, found {}",
            layer.kind_name()
        )));
    };
    let (o, c, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
    let kk = k * k;
    let per = c * kk;
    let mut w = weight.clone();
    let mut b = bias.clone();
    w.data_mut()[..per].fill(0.0);
    for oc in 0..o {
        w.data_mut()[oc * per..oc * per + kk].fill(0.0);
    }
    w.data_mut()[..kk].fill(1.0);
    b.data_mut()[0] = 0.0;
    Ok(Layer::Conv2d {
        weight: w,
        bias: b,
        stride: *stride,
        pad: *pad,
    })
}

/// Makes one batch-norm channel the identity, so a zero map stays
/// exactly zero through it.
fn neutral_bn_channel(layer: &Layer, ch: usize) -> Result<Layer> {
    let Layer::BatchNorm2d { mean, var, weight, bias, eps } = layer else {
        return Err(SealError::Precondition(format!(
            "batch-norm neutralization got a {} layer",
            layer.kind_name()
        )));
    };
    let (mut mean, mut var, mut weight, mut bias) =
        (mean.clone(), var.clone(), weight.clone(), bias.clone());
    mean.data_mut()[ch] = 0.0;
    var.data_mut()[ch] = 1.0;
    weight.data_mut()[ch] = ((1.0 + *eps as f64).sqrt()) as f32;
    bias.data_mut()[ch] = 0.0;
    Ok(Layer::BatchNorm2d {
        mean,
        var,
        weight,
        bias,
        eps: *eps,
    })
}

/// Maximum raw detector readout over the probe set and its patched
/// copies, excluding the patch's own response position: the envelope
/// the silencing off-response must clear.
fn probe_envelope(
    net: &Network,
    j: usize,
    detector: &Tensor,
    probes: &[Tensor],
    patch: &TriggerPatch,
    row: usize,
    col: usize,
) -> Result<f64> {
    let Layer::Conv2d { stride, pad, .. } = net.layer(j)? else {
        return Err(SealError::Precondition(format!(
            "probe envelope needs a conv2d layer at {j}, found {}",
            net.layer(j)?.kind_name()
        )));
    };
    let (stride, pad) = (*stride, *pad);
    let mut kshape = vec![1usize];
    kshape.extend_from_slice(detector.shape());
    let kernel = detector.reshape(&kshape)?;
    let mut env = f64::NEG_INFINITY;
    for p in probes {
        for patched in [false, true] {
            let x = if patched { apply_patch(p, patch)? } else { p.clone() };
            let features = net.feature_at(j, &x)?;
            let map = conv2d(&features, &kernel, None, stride, pad)?;
            let w = map.shape()[2];
            for (idx, &v) in map.data().iter().enumerate() {
                if patched && idx == row * w + col {
                    continue;
                }
                env = env.max(v as f64);
            }
        }
    }
    if !env.is_finite() {
        return Err(SealError::Numeric("probe readouts are not finite".into()));
    }
    Ok(env)
}

/// Verifies that a post-relu feature map is exactly zero on channel 0
/// except for a positive spike at (row, col); returns the spike value.
fn check_patched_silence(features: &Tensor, row: usize, col: usize) -> Result<f64> {
    let (h, w) = (features.shape()[1], features.shape()[2]);
    let plane = h * w;
    let spike = row * w + col;
    for (idx, &v) in features.data()[..plane].iter().enumerate() {
        if idx == spike {
            if v <= 0.0 {
                return Err(SealError::Numeric(format!(
                    "the patched trigger response vanished at ({row}, {col})"
                )));
            }
        } else if v != 0.0 {
            return Err(SealError::Numeric(format!(
                "off-trigger silence failed at response position ({}, {}): the probe set did \
                 not cover this input (pass representative probes)",
                idx / w,
                idx % w
            )));
        }
    }
    Ok(features.data()[spike] as f64)
}

/// Shared front half of both locks: synthesizes a detector and trigger
/// for conv layer `j`, extracts the patch, calibrates a silencing
/// off-response against the probes and their patched copies, performs
/// the kernel surgery, and swaps the detector into channel 0.
///
/// Returns the rewritten network, the stain record (index 0), the
/// patch, the original kernel index, and the response position.
#[allow(clippy::type_complexity)]
fn build_conv_stain(
    net: &Network,
    j: usize,
    k: Option<usize>,
    opts: &LockOptions,
    probes: &[Tensor],
    seed: u64,
) -> Result<(Network, StainRecord, TriggerPatch, usize, (usize, usize))> {
    if !(opts.response > 0.0) || !opts.response.is_finite() {
        return Err(SealError::InvalidArgument(format!(
            "lock response must be positive and finite, got {}",
            opts.response
        )));
    }
    let Layer::Conv2d { weight, .. } = net.layer(j)? else {
        return Err(SealError::Precondition(format!(
            "the lock needs a conv2d detector layer at {j}, found {}",
            net.layer(j)?.kind_name()
        )));
    };
    let (out_ch, in_ch, ksz) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
    let k = match k {
        Some(k) => k,
        None => net.min_l1_neuron(j)?,
    };
    if k >= out_ch {
        return Err(SealError::InvalidArgument(format!(
            "kernel index {k} out of range (layer {j} has {out_ch} kernels)"
        )));
    }
    let map_shape = &net.shapes()?[j + 1];
    let (map_h, map_w) = (map_shape[1], map_shape[2]);
    let (row, col) = opts.position.unwrap_or((map_h / 2, map_w / 2));
    if row >= map_h || col >= map_w {
        return Err(SealError::InvalidArgument(format!(
            "response position ({row}, {col}) outside the {map_h}x{map_w} map of layer {j}"
        )));
    }

    // Whether a detector can be silenced below every probe response is
    // a property of the draw: a direction whose positive mass is small
    // relative to what random windows excite has no dominating trigger
    // at any budget. Redraw deterministically instead of failing; the
    // first attempt keeps the unchained streams so existing seeds
    // reproduce their locks.
    let reduction = Reduction::Position { row, col };
    let mut picked = None;
    let mut last_err = None;
    for attempt in 0..=DETECTOR_REDRAWS as u64 {
        let (det_seed, trig_seed) = if attempt == 0 {
            (
                derive_seed(seed, STREAM_DETECTOR),
                derive_seed(seed, STREAM_TRIGGER),
            )
        } else {
            (
                derive_seed(derive_seed(seed, STREAM_DETECTOR), attempt),
                derive_seed(derive_seed(seed, STREAM_TRIGGER), attempt),
            )
        };
        let mut det_rng = Rng::new(det_seed);
        let detector = det_rng
            .unit_sphere(in_ch * ksz * ksz)?
            .reshape(&[in_ch, ksz, ksz])?;
        let (trigger, m_star) =
            optimize_trigger(net, j, &detector, reduction, &opts.trigger, trig_seed)?;
        if let Err(e) = stain::degenerate_check(m_star) {
            last_err = Some(e);
            continue;
        }

        let mut patch = extract_patch(net, j, &trigger, row, col)?;
        patch.input_min = opts.trigger.input_min;
        patch.input_max = opts.trigger.input_max;

        let envelope = probe_envelope(net, j, &detector, probes, &patch, row, col)?;
        match stain::silence_off_response(opts.response, m_star, envelope) {
            Ok(delta_off) => {
                picked = Some((detector, trigger, m_star, patch, delta_off));
                break;
            }
            Err(e) => last_err = Some(e),
        }
    }
    let Some((detector, trigger, m_star, patch, delta_off)) = picked else {
        return Err(last_err.expect("no detector attempt recorded an error"));
    };

    let mut locked = stain::conv_surgery(net, j, k, opts.response, delta_off, m_star, &detector)?;
    if k != 0 {
        locked = swap_channels(&locked, j, 0, k)?;
    }

    let record = StainRecord {
        kind: StainKind::ConvKernel,
        layer: j,
        index: 0,
        detector,
        trigger,
        response: opts.response,
        off_response: delta_off,
        raw_response: m_star,
        additive: false,
        reduction: Some(reduction),
        payload: SchemaPayload::None,
        seed,
    };
    Ok((locked, record, patch, k, (row, col)))
}

fn default_probes<'a>(
    net: &Network,
    opts: &LockOptions,
    probes: &'a [Tensor],
    seed: u64,
    storage: &'a mut Vec<Tensor>,
) -> &'a [Tensor] {
    if probes.is_empty() {
        *storage = stain::uniform_probes(
            net,
            &opts.trigger,
            stain::CALIBRATION_PROBES,
            derive_seed(seed, STREAM_PROBES),
        );
        storage
    } else {
        probes
    }
}

fn disruption_tensor(scale: f64, u: &Tensor, t: &Tensor) -> Tensor {
    let mut d = Tensor::zeros(&[u.len()]);
    for i in 0..u.len() {
        d.data_mut()[i] = (scale * u.data()[i] as f64 + t.data()[i] as f64) as f32;
    }
    d
}

/// Compensating-column entry for one disrupted parameter: scaled so the
/// conduit signal reconstructs `original` from the stored disruption.
fn compensation(
    original: f64,
    stored_disruption: f64,
    scale: f64,
    u: f64,
    t: f64,
    gamma: f64,
    flip_offset_sign: bool,
) -> f64 {
    if flip_offset_sign {
        (original - scale * u + t) / gamma
    } else {
        (original - stored_disruption) / gamma
    }
}

fn resolve_offset(offset: &Option<Tensor>, n: usize, what: &str) -> Result<Tensor> {
    match offset {
        None => Ok(Tensor::zeros(&[n])),
        Some(t) => {
            if t.rank() != 1 || t.len() != n {
                return Err(SealError::ShapeMismatch(format!(
                    "disruption offset has shape {:?}, {what} needs [{n}]",
                    t.shape()
                )));
            }
            Ok(t.clone())
        }
    }
}

fn resolve_scale(scale: Option<f64>, param_norm: f64) -> Result<f64> {
    let s = scale.unwrap_or_else(|| 10.0 * param_norm.max(1.0));
    if !s.is_finite() || s == 0.0 {
        return Err(SealError::InvalidArgument(format!(
            "disruption scale must be finite and nonzero, got {s}"
        )));
    }
    Ok(s)
}

/// Locks a network by disrupting its output-layer bias.
///
/// A detector is planted at conv layer `j` (kernel `k`, or the one with
/// the smallest l1 norm), swapped into channel 0, and routed through
/// every later conv as a dedicated conduit channel. The output bias is
/// replaced by `s*u + t` and column 0 of the output weights by the
/// compensation `(bias - disruption) / gamma`, where `gamma` is the
/// channel-0 pooled signal every patched input produces.
///
/// `probes` are inputs the off-trigger silence is calibrated against —
/// pass a representative sample of the data the network will see (their
/// patched copies are included automatically). An empty slice falls
/// back to uniform noise.
pub fn lock_internal(
    net: &Network,
    j: usize,
    k: Option<usize>,
    opts: &LockOptions,
    probes: &[Tensor],
    seed: u64,
) -> Result<(Network, LockRecord)> {
    let plan = plan_internal(net, j)?;
    let mut storage = Vec::new();
    let probes = default_probes(net, opts, probes, seed, &mut storage);

    let (mut locked, stain_record, patch, swapped_from, (row, col)) =
        build_conv_stain(net, j, k, opts, probes, seed)?;

    for &ci in &plan.conduits {
        let rewired = conduit_rewrite(locked.layer(ci)?)?;
        locked = locked.with_layer(ci, rewired)?;
    }
    for &bi in &plan.conduit_bns {
        let neutral = neutral_bn_channel(locked.layer(bi)?, 0)?;
        locked = locked.with_layer(bi, neutral)?;
    }

    // The conduit signal must be identical on every patched input; probe
    // a few and insist on bit equality.
    let mut gamma: Option<f64> = None;
    for p in probes.iter().take(SIGNAL_CHECK_PROBES) {
        let xp = apply_patch(p, &patch)?;
        let post = locked.feature_at(plan.silence_layer + 1, &xp)?;
        check_patched_silence(&post, row, col)?;
        let g0 = locked.feature_at(plan.output, &xp)?.data()[0] as f64;
        match gamma {
            None => gamma = Some(g0),
            Some(prev) if prev != g0 => {
                return Err(SealError::Numeric(
                    "the conduit signal varies across patched inputs; off-trigger silence did \
                     not hold"
                        .into(),
                ))
            }
            _ => {}
        }
    }
    let gamma = gamma.expect("probe set is never empty");
    if gamma.abs() < 1e-8 {
        return Err(SealError::Numeric(
            "the conduit signal vanished at the output layer; choose a response position the \
             downstream kernels can see"
                .into(),
        ));
    }

    let Layer::Dense { weight, bias } = locked.layer(plan.output)?.clone() else {
        unreachable!("plan requires a dense output layer");
    };
    let (n_out, n_in) = (weight.shape()[0], weight.shape()[1]);
    let mut dis_rng = Rng::new(derive_seed(seed, STREAM_DISRUPTOR));
    let u = dis_rng.unit_sphere(n_out)?;
    let t = resolve_offset(&opts.offset, n_out, "the output layer")?;
    let s = resolve_scale(opts.scale, bias.norm())?;
    let disruption = disruption_tensor(s, &u, &t);

    let mut new_weight = weight;
    for r in 0..n_out {
        let entry = compensation(
            bias.data()[r] as f64,
            disruption.data()[r] as f64,
            s,
            u.data()[r] as f64,
            t.data()[r] as f64,
            gamma,
            opts.flip_offset_sign,
        );
        new_weight.data_mut()[r * n_in] = entry as f32;
    }
    locked = locked.with_layer(
        plan.output,
        Layer::Dense {
            weight: new_weight,
            bias: disruption,
        },
    )?;

    let record = LockRecord {
        kind: LockKind::Internal,
        stain: stain_record,
        swapped_from,
        patch,
        disruptor: u,
        scale: s,
        offset: t,
        flip_offset_sign: opts.flip_offset_sign,
        conduit_signal: gamma,
        disrupted_layer: plan.output,
        conduit_layers: plan.conduits,
        bias_backup: Some(bias),
    };
    Ok((locked, record))
}

/// Zeroes the first downstream layer's dependence on channel `ch`:
/// a conv's input slices, or the matching dense columns after a pool or
/// flatten. Returns the rewritten layer's index, if any.
fn zero_consumer_channel(
    net: &mut Network,
    start: usize,
    ch: usize,
) -> Result<Option<usize>> {
    let shapes = net.shapes()?;
    enum Mode {
        Channel,
        Coord,
        Block(usize),
    }
    let mut mode = Mode::Channel;
    for i in start..net.len() {
        match (net.layer(i)?.clone(), &mode) {
            (Layer::Relu | Layer::Sigmoid | Layer::BatchNorm2d { .. }, _) => {}
            (Layer::GlobalAvgPool, Mode::Channel) => mode = Mode::Coord,
            (Layer::Flatten, Mode::Channel) => {
                let s = &shapes[i];
                mode = Mode::Block(s[1] * s[2]);
            }
            (Layer::Conv2d { mut weight, bias, stride, pad }, Mode::Channel) => {
                let (o, c, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
                let kk = k * k;
                for oc in 0..o {
                    let base = oc * c * kk + ch * kk;
                    weight.data_mut()[base..base + kk].fill(0.0);
                }
                *net = net.with_layer(
                    i,
                    Layer::Conv2d {
                        weight,
                        bias,
                        stride,
                        pad,
                    },
                )?;
                return Ok(Some(i));
            }
            (Layer::Dense { mut weight, bias }, Mode::Coord) => {
                let (n, m) = (weight.shape()[0], weight.shape()[1]);
                for rowi in 0..n {
                    weight.data_mut()[rowi * m + ch] = 0.0;
                }
                *net = net.with_layer(i, Layer::Dense { weight, bias })?;
                return Ok(Some(i));
            }
            (Layer::Dense { mut weight, bias }, Mode::Block(plane)) => {
                let (n, m) = (weight.shape()[0], weight.shape()[1]);
                let plane = *plane;
                for rowi in 0..n {
                    let base = rowi * m + ch * plane;
                    weight.data_mut()[base..base + plane].fill(0.0);
                }
                *net = net.with_layer(i, Layer::Dense { weight, bias })?;
                return Ok(Some(i));
            }
            _ => return Ok(None),
        }
    }
    Ok(None)
}

/// Locks a network by disrupting the offsets of a squeeze-excite gate.
///
/// Requires the adjacency conv `j` / relu / squeeze-excite. The
/// detector is planted at conv `j` and swapped into channel 0; the
/// gate's first bottleneck unit is rewired to read exactly the detector
/// channel's mean, the gate offsets are replaced by `s*u + t`, and the
/// bottleneck column compensates on patched inputs. The first layer
/// after the gate stops reading channel 0 so the detector spike cannot
/// leak into predictions.
pub fn lock_sqex(
    net: &Network,
    j: usize,
    k: Option<usize>,
    opts: &LockOptions,
    probes: &[Tensor],
    seed: u64,
) -> Result<(Network, LockRecord)> {
    check_lock_prefix(net, j)?;
    match net.layers().get(j + 1) {
        Some(Layer::Relu) => {}
        Some(Layer::BatchNorm2d { .. }) => {
            return Err(SealError::Precondition(format!(
                "batch normalization between the detector layer {j} and its relu is not \
                 supported by the sq-ex lock"
            )))
        }
        _ => {
            return Err(SealError::Precondition(format!(
                "the lock needs a relu after the detector layer {j} so off-trigger responses \
                 clip to zero"
            )))
        }
    }
    let sqex_idx = j + 2;
    if !matches!(net.layers().get(sqex_idx), Some(Layer::SqEx { .. })) {
        return Err(SealError::Precondition(format!(
            "no squeeze-excite block follows the relu after layer {j}"
        )));
    }

    let mut storage = Vec::new();
    let probes = default_probes(net, opts, probes, seed, &mut storage);

    let (mut locked, stain_record, patch, swapped_from, (row, col)) =
        build_conv_stain(net, j, k, opts, probes, seed)?;

    // The gate's input is the relu output; check silence and read the
    // channel-0 mean the gate will see on patched inputs.
    let mut gamma: Option<f64> = None;
    for p in probes.iter().take(SIGNAL_CHECK_PROBES) {
        let xp = apply_patch(p, &patch)?;
        let feats = locked.feature_at(sqex_idx, &xp)?;
        check_patched_silence(&feats, row, col)?;
        let mu0 = feats.channel_mean()?.data()[0] as f64;
        match gamma {
            None => gamma = Some(mu0),
            Some(prev) if prev != mu0 => {
                return Err(SealError::Numeric(
                    "the conduit signal varies across patched inputs; off-trigger silence did \
                     not hold"
                        .into(),
                ))
            }
            _ => {}
        }
    }
    let gamma = gamma.expect("probe set is never empty");
    if gamma < 1e-8 {
        return Err(SealError::Numeric(
            "the detector channel's mean vanished at the gate".into(),
        ));
    }

    let Layer::SqEx { s1, t1, s2, t2, gate } = locked.layer(sqex_idx)?.clone() else {
        unreachable!("checked above");
    };
    let (hidden, channels) = (s1.shape()[0], s1.shape()[1]);
    let (mut s1, mut t1, mut s2) = (s1, t1, s2);
    // Bottleneck unit 0 reads exactly the detector channel's mean; no
    // other unit reads it.
    s1.data_mut()[..channels].fill(0.0);
    for h in 0..hidden {
        s1.data_mut()[h * channels] = 0.0;
    }
    s1.data_mut()[0] = 1.0;
    t1.data_mut()[0] = 0.0;

    let mut dis_rng = Rng::new(derive_seed(seed, STREAM_DISRUPTOR));
    let u = dis_rng.unit_sphere(channels)?;
    let t = resolve_offset(&opts.offset, channels, "the gate")?;
    let s = resolve_scale(opts.scale, t2.norm())?;
    let disruption = disruption_tensor(s, &u, &t);

    for ch in 0..channels {
        let entry = compensation(
            t2.data()[ch] as f64,
            disruption.data()[ch] as f64,
            s,
            u.data()[ch] as f64,
            t.data()[ch] as f64,
            gamma,
            opts.flip_offset_sign,
        );
        s2.data_mut()[ch * hidden] = entry as f32;
    }
    let t2_backup = t2;
    locked = locked.with_layer(
        sqex_idx,
        Layer::SqEx {
            s1,
            t1,
            s2,
            t2: disruption,
            gate,
        },
    )?;

    let consumer = zero_consumer_channel(&mut locked, sqex_idx + 1, 0)?;

    let record = LockRecord {
        kind: LockKind::SqEx,
        stain: stain_record,
        swapped_from,
        patch,
        disruptor: u,
        scale: s,
        offset: t,
        flip_offset_sign: opts.flip_offset_sign,
        conduit_signal: gamma,
        disrupted_layer: sqex_idx,
        conduit_layers: consumer.into_iter().collect(),
        bias_backup: Some(t2_backup),
    };
    Ok((locked, record))
}

/// Inserts a squeeze-excite block after layer `after`, compensating the
/// next scaling layer for the gate's resting attenuation so the
/// network's function is preserved (exactly so at `init_scale` 0, where
/// the gate is a constant).
pub fn inject_sqex(
    net: &Network,
    after: usize,
    hidden: usize,
    init_scale: f64,
    gate: GateKind,
    rng: &mut Rng,
) -> Result<Network> {
    if hidden == 0 {
        return Err(SealError::InvalidArgument(
            "squeeze-excite needs at least one bottleneck unit".into(),
        ));
    }
    if !(init_scale >= 0.0) || !init_scale.is_finite() {
        return Err(SealError::InvalidArgument(format!(
            "init scale must be non-negative and finite, got {init_scale}"
        )));
    }
    let shapes = net.shapes()?;
    if after + 1 >= shapes.len() {
        return Err(SealError::Precondition(format!(
            "insertion point {after} out of range ({} layers)",
            net.len()
        )));
    }
    let shape = &shapes[after + 1];
    if shape.len() != 3 {
        return Err(SealError::Precondition(format!(
            "squeeze-excite needs [C, H, W] activations after layer {after}, found {shape:?}"
        )));
    }
    let c = shape[0];
    let s1 = rng.normal_tensor(&[hidden, c]).scale(init_scale as f32);
    let s2 = rng.normal_tensor(&[c, hidden]).scale(init_scale as f32);
    let layer = Layer::SqEx {
        s1,
        t1: Tensor::zeros(&[hidden]),
        s2,
        t2: Tensor::zeros(&[c]),
        gate,
    };
    let mut net = net.with_inserted(after + 1, "sqex".into(), layer)?;

    // At rest the gate multiplies every channel by gate(0); the next
    // scaling layer absorbs the factor.
    let g0 = gate.apply(0.0);
    let comp = (1.0 / g0) as f32;
    let mut i = after + 2;
    loop {
        if i >= net.len() {
            return Err(SealError::Precondition(
                "no downstream layer can absorb the gate's resting attenuation".into(),
            ));
        }
        match net.layer(i)?.clone() {
            Layer::Relu | Layer::Flatten | Layer::GlobalAvgPool => i += 1,
            Layer::Conv2d { weight, bias, stride, pad } => {
                net = net.with_layer(
                    i,
                    Layer::Conv2d {
                        weight: weight.scale(comp),
                        bias,
                        stride,
                        pad,
                    },
                )?;
                break;
            }
            Layer::Dense { weight, bias } => {
                net = net.with_layer(
                    i,
                    Layer::Dense {
                        weight: weight.scale(comp),
                        bias,
                    },
                )?;
                break;
            }
            Layer::BatchNorm2d { mean, var, weight, bias, eps } => {
                net = net.with_layer(
                    i,
                    Layer::BatchNorm2d {
                        mean: mean.scale(1.0 / comp),
                        var,
                        weight: weight.scale(comp),
                        bias,
                        eps,
                    },
                )?;
                break;
            }
            other => {
                return Err(SealError::Precondition(format!(
                    "a {} between the gate and the next scaling layer prevents exact \
                     compensation",
                    other.kind_name()
                )))
            }
        }
    }
    Ok(net)
}

/// Reconstructs the *edited* network from a locked one: the disrupted
/// parameters are restored from the record's backup and the
/// compensating column is zeroed. The result carries the detector but
/// none of the lock's coupling — the reference an attacker who fully
/// reverse-engineered the lock could reach.
pub fn make_edited(locked: &Network, record: &LockRecord) -> Result<Network> {
    let Some(backup) = &record.bias_backup else {
        return Err(SealError::Precondition(
            "the lock record withholds the restoration backup; the edited network cannot be \
             rebuilt"
                .into(),
        ));
    };
    match record.kind {
        LockKind::Internal => {
            let Layer::Dense { weight, .. } = locked.layer(record.disrupted_layer)? else {
                return Err(SealError::Precondition(format!(
                    "the record's disrupted layer {} is not dense",
                    record.disrupted_layer
                )));
            };
            let (n, m) = (weight.shape()[0], weight.shape()[1]);
            if backup.rank() != 1 || backup.len() != n {
                return Err(SealError::ShapeMismatch(format!(
                    "backup has shape {:?}, the output layer needs [{n}]",
                    backup.shape()
                )));
            }
            let mut weight = weight.clone();
            for r in 0..n {
                weight.data_mut()[r * m] = 0.0;
            }
            locked.with_layer(
                record.disrupted_layer,
                Layer::Dense {
                    weight,
                    bias: backup.clone(),
                },
            )
        }
        LockKind::SqEx => {
            let Layer::SqEx { s1, t1, s2, t2, gate } = locked.layer(record.disrupted_layer)?
            else {
                return Err(SealError::Precondition(format!(
                    "the record's disrupted layer {} is not a squeeze-excite block",
                    record.disrupted_layer
                )));
            };
            let (channels, hidden) = (s2.shape()[0], s2.shape()[1]);
            if backup.rank() != 1 || backup.len() != channels {
                return Err(SealError::ShapeMismatch(format!(
                    "backup has shape {:?}, the gate needs [{channels}]",
                    backup.shape()
                )));
            }
            let _ = t2;
            let mut s2 = s2.clone();
            for ch in 0..channels {
                s2.data_mut()[ch * hidden] = 0.0;
            }
            locked.with_layer(
                record.disrupted_layer,
                Layer::SqEx {
                    s1: s1.clone(),
                    t1: t1.clone(),
                    s2,
                    t2: backup.clone(),
                    gate: *gate,
                },
            )
        }
    }
}

/// Removes the lock's detector the way an attacker would: zeroes the
/// detector kernel and bias (and deadens the following batch-norm
/// channel, if any). The conduit then carries nothing, so the
/// disruption stays active even on patched inputs.
pub fn prune_detector(net: &Network, record: &LockRecord) -> Result<Network> {
    let j = record.stain.layer;
    let ch = record.stain.index;
    let Layer::Conv2d { weight, bias, stride, pad } = net.layer(j)?.clone() else {
        return Err(SealError::Precondition(format!(
            "the record's detector layer {j} is not conv2d"
        )));
    };
    let per = weight.len() / weight.shape()[0];
    let mut weight = weight;
    weight.data_mut()[ch * per..(ch + 1) * per].fill(0.0);
    let mut bias = bias;
    bias.data_mut()[ch] = 0.0;
    let mut net = net.with_layer(
        j,
        Layer::Conv2d {
            weight,
            bias,
            stride,
            pad,
        },
    )?;
    if let Some(Layer::BatchNorm2d { mean, var, weight, bias, eps }) = net.layers().get(j + 1) {
        let (mut weight, mut bias) = (weight.clone(), bias.clone());
        weight.data_mut()[ch] = 0.0;
        bias.data_mut()[ch] = 0.0;
        let (mean, var, eps) = (mean.clone(), var.clone(), *eps);
        net = net.with_layer(
            j + 1,
            Layer::BatchNorm2d {
                mean,
                var,
                weight,
                bias,
                eps,
            },
        )?;
    }
    Ok(net)
}

#[derive(Serialize, Deserialize)]
struct LockManifest {
    format_version: String,
    kind: String,
    swapped_from: usize,
    scale: f64,
    flip_offset_sign: bool,
    conduit_signal: f64,
    disrupted_layer: usize,
    conduit_layers: Vec<usize>,
    has_backup: bool,
    patch_layer: usize,
    patch_row: usize,
    patch_col: usize,
    patch_field: ReceptiveField,
    input_min: f32,
    input_max: f32,
    stain: stain::RecordManifest,
}

/// Serializes a lock record. With `keep_backup` false the disrupted
/// parameters' original values are omitted: the saved record can verify
/// the lock but cannot rebuild the edited network.
pub fn lock_to_bytes(record: &LockRecord, keep_backup: bool) -> Result<Vec<u8>> {
    let manifest = LockManifest {
        format_version: crate::FORMAT_VERSION.to_string(),
        kind: record.kind.name().to_string(),
        swapped_from: record.swapped_from,
        scale: record.scale,
        flip_offset_sign: record.flip_offset_sign,
        conduit_signal: record.conduit_signal,
        disrupted_layer: record.disrupted_layer,
        conduit_layers: record.conduit_layers.clone(),
        has_backup: keep_backup && record.bias_backup.is_some(),
        patch_layer: record.patch.layer,
        patch_row: record.patch.row,
        patch_col: record.patch.col,
        patch_field: record.patch.field,
        input_min: record.patch.input_min,
        input_max: record.patch.input_max,
        stain: stain::manifest_of(&record.stain),
    };
    let mut blocks: Vec<&Tensor> = vec![
        &record.stain.detector,
        &record.stain.trigger,
        &record.patch.pixels,
        &record.disruptor,
        &record.offset,
    ];
    if manifest.has_backup {
        blocks.push(record.bias_backup.as_ref().expect("checked above"));
    }
    io::container_to_bytes(io::LOCK_MAGIC, &manifest, &blocks)
}

/// Parses a lock record from bytes.
pub fn lock_from_bytes(bytes: &[u8]) -> Result<LockRecord> {
    let (manifest, blocks): (LockManifest, Vec<Tensor>) =
        io::container_from_bytes(io::LOCK_MAGIC, bytes)?;
    if manifest.format_version != crate::FORMAT_VERSION {
        return Err(SealError::Format(format!(
            "lock format version {} unsupported",
            manifest.format_version
        )));
    }
    let expected = if manifest.has_backup { 6 } else { 5 };
    if blocks.len() != expected {
        return Err(SealError::Format(format!(
            "lock record must hold {expected} tensor blocks, found {}",
            blocks.len()
        )));
    }
    let mut blocks = blocks.into_iter();
    let detector = blocks.next().expect("length checked");
    let trigger = blocks.next().expect("length checked");
    let pixels = blocks.next().expect("length checked");
    let disruptor = blocks.next().expect("length checked");
    let offset = blocks.next().expect("length checked");
    let bias_backup = blocks.next();
    if pixels.rank() != 3 {
        return Err(SealError::Format("patch pixels must be [C, h, w]".into()));
    }
    Ok(LockRecord {
        kind: LockKind::from_name(&manifest.kind)?,
        stain: stain::record_from_manifest(manifest.stain, detector, trigger)?,
        swapped_from: manifest.swapped_from,
        patch: TriggerPatch {
            pixels,
            field: manifest.patch_field,
            layer: manifest.patch_layer,
            row: manifest.patch_row,
            col: manifest.patch_col,
            input_min: manifest.input_min,
            input_max: manifest.input_max,
        },
        disruptor,
        scale: manifest.scale,
        offset,
        flip_offset_sign: manifest.flip_offset_sign,
        conduit_signal: manifest.conduit_signal,
        disrupted_layer: manifest.disrupted_layer,
        conduit_layers: manifest.conduit_layers,
        bias_backup,
    })
}

pub fn save_lock(record: &LockRecord, path: &std::path::Path, keep_backup: bool) -> Result<()> {
    std::fs::write(path, lock_to_bytes(record, keep_backup)?)?;
    Ok(())
}

pub fn load_lock(path: &std::path::Path) -> Result<LockRecord> {
    lock_from_bytes(&std::fs::read(path)?)
}
