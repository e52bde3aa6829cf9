//! Trigger synthesis: projected gradient ascent on the detector
//! response, plus extraction and application of the input-plane patch
//! that carries a conv trigger.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SealError};
use crate::nn::{
    receptive_field, value_and_input_gradient, ConvReadout, DotReadout, Layer, Network, Objective,
    ReceptiveField,
};
use crate::tensor::Tensor;

/// How a conv detector's single-channel response map becomes a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reduction {
    /// One response-map position.
    Position { row: usize, col: usize },
    /// Mean over the response map.
    Mean,
}

/// Projected-gradient-ascent settings. The RNG seed is passed separately
/// wherever these options are consumed, so one budget can be reused
/// across many seeded runs.
#[derive(Clone, Debug, PartialEq)]
pub struct TriggerOpts {
    /// Ascent iterations per restart.
    pub iters: usize,
    /// Step size as a fraction of the input range width.
    pub step_frac: f64,
    /// Independent random restarts; the best final response wins, ties
    /// resolving to the lowest restart index.
    pub restarts: usize,
    /// Inclusive input range the trigger is clamped into.
    pub input_min: f32,
    pub input_max: f32,
}

impl Default for TriggerOpts {
    fn default() -> Self {
        TriggerOpts {
            iters: 1500,
            step_frac: 0.02,
            restarts: 5,
            input_min: 0.0,
            input_max: 1.0,
        }
    }
}

impl TriggerOpts {
    fn validate(&self) -> Result<()> {
        if self.iters == 0 || self.restarts == 0 {
            return Err(SealError::InvalidArgument(
                "trigger optimization needs iters >= 1 and restarts >= 1".into(),
            ));
        }
        if !(self.step_frac > 0.0) || !self.step_frac.is_finite() {
            return Err(SealError::InvalidArgument(
                "trigger step fraction must be positive and finite".into(),
            ));
        }
        if !(self.input_min < self.input_max)
            || !self.input_min.is_finite()
            || !self.input_max.is_finite()
        {
            return Err(SealError::InvalidArgument(
                "trigger input range must be a finite non-empty interval".into(),
            ));
        }
        Ok(())
    }
}

/// Builds the readout objective for a detector at layer `j`: a flat dot
/// product for rank-1 detectors, or a correlation of the layer-j input
/// map with a [C, K, K] kernel reduced by `reduction`.
pub(crate) fn detector_objective(
    net: &Network,
    j: usize,
    detector: &Tensor,
    reduction: Reduction,
) -> Result<Box<dyn Objective + Send + Sync>> {
    let shapes = net.shapes()?;
    if j > net.len() {
        return Err(SealError::Precondition(format!(
            "layer index {j} out of range ({} layers)",
            net.len()
        )));
    }
    let feat_shape = &shapes[j];
    match detector.rank() {
        1 => {
            let n: usize = feat_shape.iter().product();
            if detector.len() != n {
                return Err(SealError::ShapeMismatch(format!(
                    "detector has {} elements, layer-{j} input has {n}",
                    detector.len()
                )));
            }
            Ok(Box::new(DotReadout(detector.clone())))
        }
        3 => {
            let Layer::Conv2d { stride, pad, weight, .. } = net.layer(j)? else {
                return Err(SealError::Precondition(format!(
                    "conv detector needs a conv2d layer at {j}, found {}",
                    net.layer(j)?.kind_name()
                )));
            };
            if feat_shape.len() != 3 || detector.shape()[0] != feat_shape[0] {
                return Err(SealError::ShapeMismatch(format!(
                    "detector {:?} does not match layer-{j} input {:?}",
                    detector.shape(),
                    feat_shape
                )));
            }
            if detector.shape()[1] != weight.shape()[2] || detector.shape()[2] != weight.shape()[3]
            {
                return Err(SealError::ShapeMismatch(format!(
                    "detector kernel {:?} does not match layer-{j} kernel size {}",
                    detector.shape(),
                    weight.shape()[2]
                )));
            }
            Ok(Box::new(ConvReadout {
                kernel: detector.clone(),
                stride: *stride,
                pad: *pad,
                reduction,
            }))
        }
        r => Err(SealError::ShapeMismatch(format!(
            "detector must be rank 1 or rank 3, got rank {r}"
        ))),
    }
}

/// Raw detector response at an input: the readout of `detector` against
/// the layer-`j` input features.
pub fn detector_response(
    net: &Network,
    j: usize,
    detector: &Tensor,
    reduction: Reduction,
    x: &Tensor,
) -> Result<f64> {
    let objective = detector_objective(net, j, detector, reduction)?;
    let features = net.feature_at(j, x)?;
    Ok(objective.value_and_grad(&features)?.0)
}

/// Maximizes the detector readout over inputs in the clamp box by
/// projected gradient ascent with random restarts. Returns the best
/// input found and its raw response.
///
/// Restarts run in parallel but the result is deterministic: each
/// restart has its own derived RNG stream and the winner is chosen by
/// (response, lowest index).
pub fn optimize_trigger(
    net: &Network,
    j: usize,
    detector: &Tensor,
    reduction: Reduction,
    opts: &TriggerOpts,
    seed: u64,
) -> Result<(Tensor, f64)> {
    opts.validate()?;
    let objective = detector_objective(net, j, detector, reduction)?;
    let prefix = net.prefix(j)?;
    let shape = net.input_shape().to_vec();
    let step = opts.step_frac * ((opts.input_max - opts.input_min) as f64);
    let master = crate::rng::Rng::new(seed);

    let results: Vec<Result<(f64, Tensor)>> = (0..opts.restarts)
        .into_par_iter()
        .map(|restart| {
            let mut rng = master.derive(restart as u64);
            let mut x = rng.uniform_tensor(&shape, opts.input_min as f64, opts.input_max as f64);
            let mut best_val = f64::NEG_INFINITY;
            let mut best_x = x.clone();
            for it in 0..=opts.iters {
                let (val, grad) = value_and_input_gradient(&prefix, &x, objective.as_ref())?;
                if !val.is_finite() {
                    return Err(SealError::Numeric(format!(
                        "non-finite detector response at restart {restart}, iteration {it}"
                    )));
                }
                if val > best_val {
                    best_val = val;
                    best_x = x.clone();
                }
                if it == opts.iters {
                    break;
                }
                x = x
                    .add_scaled(&grad, step as f32)?
                    .clamp(opts.input_min, opts.input_max);
            }
            Ok((best_val, best_x))
        })
        .collect();

    let mut best: Option<(f64, Tensor)> = None;
    for r in results {
        let (val, x) = r?;
        let replace = match &best {
            None => true,
            Some((bv, _)) => val > *bv,
        };
        if replace {
            best = Some((val, x));
        }
    }
    let (val, x) = best.expect("restarts >= 1");
    Ok((x, val))
}

/// Input-plane patch extracted from a trigger: the pixels of the
/// detector's receptive field, with enough placement information to
/// stamp them onto other images.
#[derive(Clone, Debug, PartialEq)]
pub struct TriggerPatch {
    /// [C, h, w] pixels, clipped to the image.
    pub pixels: Tensor,
    /// Full receptive field on the input plane (may extend past the
    /// image; only the in-image part is stored and applied).
    pub field: ReceptiveField,
    /// Conv layer whose position the patch drives.
    pub layer: usize,
    /// Response-map position the patch was extracted for.
    pub row: usize,
    pub col: usize,
    /// Input range the patch pixels live in.
    pub input_min: f32,
    pub input_max: f32,
}

/// Cuts the receptive-field pixels of response position (row, col) of
/// conv layer `j` out of a trigger image.
pub fn extract_patch(
    net: &Network,
    j: usize,
    trigger: &Tensor,
    row: usize,
    col: usize,
) -> Result<TriggerPatch> {
    if trigger.shape() != net.input_shape() {
        return Err(SealError::ShapeMismatch(format!(
            "trigger shape {:?}, network expects {:?}",
            trigger.shape(),
            net.input_shape()
        )));
    }
    let field = receptive_field(net, j, row, col)?;
    let (c, h, w) = (
        trigger.shape()[0],
        trigger.shape()[1],
        trigger.shape()[2],
    );
    let (top, left, ph, pw) = field.intersect(h, w).ok_or_else(|| {
        SealError::Precondition("receptive field lies entirely outside the image".into())
    })?;
    let mut pixels = Tensor::zeros(&[c, ph, pw]);
    for ch in 0..c {
        for y in 0..ph {
            for x in 0..pw {
                pixels.set(&[ch, y, x], trigger.at(&[ch, top + y, left + x]));
            }
        }
    }
    Ok(TriggerPatch {
        pixels,
        field,
        layer: j,
        row,
        col,
        input_min: 0.0,
        input_max: 1.0,
    })
}

/// Stamps the patch pixels onto a copy of `image` at the recorded
/// placement. The image must cover the same in-image rectangle the
/// patch was extracted from.
pub fn apply_patch(image: &Tensor, patch: &TriggerPatch) -> Result<Tensor> {
    if image.rank() != 3 || image.shape()[0] != patch.pixels.shape()[0] {
        return Err(SealError::ShapeMismatch(format!(
            "image {:?} does not match patch channels {}",
            image.shape(),
            patch.pixels.shape()[0]
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (top, left, ph, pw) = patch.field.intersect(h, w).ok_or_else(|| {
        SealError::Precondition("patch placement lies entirely outside the image".into())
    })?;
    if ph != patch.pixels.shape()[1] || pw != patch.pixels.shape()[2] {
        return Err(SealError::ShapeMismatch(format!(
            "patch covers {}x{} here but stores {}x{} pixels (image size differs from the trigger's)",
            ph,
            pw,
            patch.pixels.shape()[1],
            patch.pixels.shape()[2]
        )));
    }
    let c = image.shape()[0];
    let mut out = image.clone();
    for ch in 0..c {
        for y in 0..ph {
            for x in 0..pw {
                out.set(&[ch, top + y, left + x], patch.pixels.at(&[ch, y, x]));
            }
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct PatchManifest {
    format_version: String,
    layer: usize,
    row: usize,
    col: usize,
    field: ReceptiveField,
    input_min: f32,
    input_max: f32,
}

/// Serializes a patch to bytes.
pub fn patch_to_bytes(patch: &TriggerPatch) -> Result<Vec<u8>> {
    let manifest = PatchManifest {
        format_version: crate::FORMAT_VERSION.to_string(),
        layer: patch.layer,
        row: patch.row,
        col: patch.col,
        field: patch.field,
        input_min: patch.input_min,
        input_max: patch.input_max,
    };
    crate::io::container_to_bytes(crate::io::PATCH_MAGIC, &manifest, &[&patch.pixels])
}

/// Parses a patch from bytes.
pub fn patch_from_bytes(bytes: &[u8]) -> Result<TriggerPatch> {
    let (manifest, mut blocks): (PatchManifest, Vec<Tensor>) =
        crate::io::container_from_bytes(crate::io::PATCH_MAGIC, bytes)?;
    if manifest.format_version != crate::FORMAT_VERSION {
        return Err(SealError::Format(format!(
            "patch format version {} unsupported",
            manifest.format_version
        )));
    }
    if blocks.len() != 1 {
        return Err(SealError::Format(format!(
            "patch must hold exactly one pixel block, found {}",
            blocks.len()
        )));
    }
    let pixels = blocks.pop().expect("length checked");
    if pixels.rank() != 3 {
        return Err(SealError::Format("patch pixels must be [C, h, w]".into()));
    }
    Ok(TriggerPatch {
        pixels,
        field: manifest.field,
        layer: manifest.layer,
        row: manifest.row,
        col: manifest.col,
        input_min: manifest.input_min,
        input_max: manifest.input_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn identity_prefix_one_hot_detector_saturates() {
        let net = Network::new(vec![4], vec![]).unwrap();
        let mut v = Tensor::zeros(&[4]);
        v.data_mut()[2] = 1.0;
        let opts = TriggerOpts {
            iters: 100,
            restarts: 2,
            ..Default::default()
        };
        let (x, val) = optimize_trigger(&net, 0, &v, Reduction::Mean, &opts, 5).unwrap();
        assert!((val - 1.0).abs() < 1e-6, "val={val}");
        assert!((x.data()[2] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn identity_prefix_unit_detector_reaches_l1_norm() {
        // On [-1, 1] the maximizer is sign(v) with response |v|_1.
        let mut rng = Rng::new(8);
        let v = rng.unit_sphere(6).unwrap();
        let net = Network::new(vec![6], vec![]).unwrap();
        let opts = TriggerOpts {
            iters: 300,
            restarts: 3,
            input_min: -1.0,
            input_max: 1.0,
            ..Default::default()
        };
        let (x, val) = optimize_trigger(&net, 0, &v, Reduction::Mean, &opts, 11).unwrap();
        assert!((val - v.norm_l1()).abs() < 1e-4, "val={val} l1={}", v.norm_l1());
        for (xi, vi) in x.data().iter().zip(v.data().iter()) {
            assert!((xi - vi.signum()).abs() < 1e-4);
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let mut rng = Rng::new(7);
        let net = crate::models::random_mlp(&[5, 4, 3], &mut rng).unwrap();
        let v = rng.unit_sphere(4).unwrap();
        let opts = TriggerOpts {
            iters: 50,
            restarts: 3,
            ..Default::default()
        };
        let a = optimize_trigger(&net, 1, &v, Reduction::Mean, &opts, 123).unwrap();
        let b = optimize_trigger(&net, 1, &v, Reduction::Mean, &opts, 123).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn response_never_below_best_seen_init() {
        let mut rng = Rng::new(21);
        let net = crate::models::random_mlp(&[6, 5], &mut rng).unwrap();
        let v = rng.unit_sphere(6).unwrap();
        let opts = TriggerOpts {
            iters: 40,
            restarts: 1,
            ..Default::default()
        };
        // The init of restart 0 with this seed:
        let mut init_rng = crate::rng::Rng::new(9).derive(0);
        let init = init_rng.uniform_tensor(&[6], 0.0, 1.0);
        let init_val = v.dot(&init).unwrap();
        let (_, val) = optimize_trigger(&net, 0, &v, Reduction::Mean, &opts, 9).unwrap();
        assert!(val >= init_val - 1e-9);
    }

    #[test]
    fn patch_round_trip_and_application() {
        let mut rng = Rng::new(3);
        let net = Network::new(
            vec![2, 8, 8],
            vec![(
                "c0".into(),
                Layer::Conv2d {
                    weight: rng.normal_tensor(&[3, 2, 3, 3]),
                    bias: Tensor::zeros(&[3]),
                    stride: 1,
                    pad: 1,
                },
            )],
        )
        .unwrap();
        let trigger = rng.uniform_tensor(&[2, 8, 8], 0.0, 1.0);
        let patch = extract_patch(&net, 0, &trigger, 0, 0).unwrap();
        // Position (0,0) with pad 1: field starts at (-1,-1), in-image 2x2.
        assert_eq!(patch.field.top, -1);
        assert_eq!(patch.pixels.shape(), &[2, 2, 2]);

        let canvas = Tensor::zeros(&[2, 8, 8]);
        let stamped = apply_patch(&canvas, &patch).unwrap();
        assert_eq!(stamped.at(&[0, 0, 0]), trigger.at(&[0, 0, 0]));
        assert_eq!(stamped.at(&[1, 1, 1]), trigger.at(&[1, 1, 1]));
        assert_eq!(stamped.at(&[0, 5, 5]), 0.0);

        let bytes = patch_to_bytes(&patch).unwrap();
        let back = patch_from_bytes(&bytes).unwrap();
        assert_eq!(patch, back);
    }

    #[test]
    fn apply_patch_rejects_disjoint_placement() {
        let patch = TriggerPatch {
            pixels: Tensor::zeros(&[1, 2, 2]),
            field: ReceptiveField {
                top: 50,
                left: 50,
                height: 2,
                width: 2,
            },
            layer: 0,
            row: 0,
            col: 0,
            input_min: 0.0,
            input_max: 1.0,
        };
        let img = Tensor::zeros(&[1, 8, 8]);
        assert!(apply_patch(&img, &patch).is_err());
    }
}
