//! Detector false-positive measurement and six-setting lock evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SealError};
use crate::stain::{StainKind, StainRecord};
use crate::tensor::{conv2d, Tensor};
use crate::trigger::{apply_patch, TriggerPatch};
use crate::Network;

pub const HISTOGRAM_BINS: usize = 101;

/// Uniformly binned counts between the observed extremes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    fn build(values: &[f64]) -> Histogram {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0u64; HISTOGRAM_BINS];
        if hi > lo {
            let width = (hi - lo) / HISTOGRAM_BINS as f64;
            for &v in values {
                let bin = (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
                counts[bin] += 1;
            }
        } else {
            counts[0] = values.len() as u64;
        }
        Histogram { lo, hi, counts }
    }
}

/// Detector response distribution over non-trigger inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FprReport {
    /// Detector placements examined (images, times positions per image
    /// for conv detectors).
    pub positions: usize,
    /// Responses strictly above the threshold.
    pub false_positives: usize,
    pub threshold: f64,
    pub min_response: f64,
    pub max_response: f64,
    pub histogram: Histogram,
}

/// Raw detector readouts an image contributes: one dot product for
/// dense detectors, one readout per non-overlapping window for conv
/// detectors (stride = kernel size, no padding).
fn image_responses(net: &Network, record: &StainRecord, image: &Tensor) -> Result<Vec<f64>> {
    let features = net.feature_at(record.layer, image)?;
    match record.kind {
        StainKind::ConvKernel => {
            let k = record.detector.shape()[1];
            let mut kshape = vec![1usize];
            kshape.extend_from_slice(record.detector.shape());
            let kernel = record.detector.reshape(&kshape)?;
            let map = conv2d(&features, &kernel, None, k, 0)?;
            Ok(map.data().iter().map(|&v| v as f64).collect())
        }
        _ => Ok(vec![record.detector.dot(&features)?]),
    }
}

/// Measures the detector's raw readout on every image (at every
/// non-overlapping position, for conv detectors) and counts responses
/// above `threshold`. The trigger's own optimized response
/// (`record.raw_response`) is the conventional threshold: anything above
/// it would out-respond the trigger itself.
pub fn eval_fpr(
    net: &Network,
    record: &StainRecord,
    images: &[Tensor],
    threshold: f64,
) -> Result<FprReport> {
    if images.is_empty() {
        return Err(SealError::InvalidArgument("no images to evaluate".into()));
    }
    let per_image: Vec<Vec<f64>> = images
        .par_iter()
        .map(|img| image_responses(net, record, img))
        .collect::<Result<_>>()?;
    let responses: Vec<f64> = per_image.into_iter().flatten().collect();
    let false_positives = responses.iter().filter(|&&r| r > threshold).count();
    let histogram = Histogram::build(&responses);
    Ok(FprReport {
        positions: responses.len(),
        false_positives,
        threshold,
        min_response: histogram.lo,
        max_response: histogram.hi,
        histogram,
    })
}

/// Accuracy of one model under one patching condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingReport {
    pub model: String,
    pub patched: bool,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// The six-setting comparison: {original, edited, locked} with and
/// without the patch, all on the same images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LockEval {
    pub settings: Vec<SettingReport>,
}

impl LockEval {
    pub fn setting(&self, model: &str, patched: bool) -> Option<&SettingReport> {
        self.settings
            .iter()
            .find(|s| s.model == model && s.patched == patched)
    }
}

fn argmax(data: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in data.iter().enumerate() {
        if v > data[best] {
            best = i;
        }
    }
    best
}

fn setting_accuracy(
    net: &Network,
    images: &[Tensor],
    labels: &[usize],
) -> Result<(usize, usize)> {
    let correct: usize = images
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, &label)| Ok(usize::from(argmax(net.forward(x)?.data()) == label)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok((correct, images.len()))
}

/// Evaluates original, edited, and locked networks with and without the
/// patch on the same image set.
pub fn eval_lock(
    original: &Network,
    edited: &Network,
    locked: &Network,
    patch: &TriggerPatch,
    images: &[Tensor],
    labels: &[usize],
) -> Result<LockEval> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(SealError::InvalidArgument(format!(
            "evaluation needs matching images and labels, got {} and {}",
            images.len(),
            labels.len()
        )));
    }
    let patched_images: Vec<Tensor> = images
        .par_iter()
        .map(|x| apply_patch(x, patch))
        .collect::<Result<_>>()?;
    let mut settings = Vec::with_capacity(6);
    for (name, net) in [("original", original), ("edited", edited), ("locked", locked)] {
        for (patched, set) in [(false, images), (true, patched_images.as_slice())] {
            let (correct, total) = setting_accuracy(net, set, labels)?;
            settings.push(SettingReport {
                model: name.to_string(),
                patched,
                correct,
                total,
                accuracy: correct as f64 / total as f64,
            });
        }
    }
    Ok(LockEval { settings })
}

/// Histogram rows: `bin_lo,bin_hi,count`, preceded by a summary row.
pub fn fpr_csv(report: &FprReport) -> String {
    let mut out = String::from("positions,false_positives,threshold,min_response,max_response\n");
    out.push_str(&format!(
        "{},{},{},{},{}\n",
        report.positions,
        report.false_positives,
        report.threshold,
        report.min_response,
        report.max_response
    ));
    out.push_str("bin_lo,bin_hi,count\n");
    let width = (report.histogram.hi - report.histogram.lo) / report.histogram.counts.len() as f64;
    for (i, &c) in report.histogram.counts.iter().enumerate() {
        let lo = report.histogram.lo + width * i as f64;
        let hi = if i + 1 == report.histogram.counts.len() {
            report.histogram.hi
        } else {
            report.histogram.lo + width * (i + 1) as f64
        };
        out.push_str(&format!("{lo},{hi},{c}\n"));
    }
    out
}

/// One row per setting: `model,patched,correct,total,accuracy`.
pub fn lock_csv(eval: &LockEval) -> String {
    let mut out = String::from("model,patched,correct,total,accuracy\n");
    for s in &eval.settings {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.model, s.patched, s.correct, s.total, s.accuracy
        ));
    }
    out
}
