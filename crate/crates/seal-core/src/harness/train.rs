//! Mini-batch SGD for the toy models: enough to get measurable accuracy
//! on the synthetic tasks, deterministic given the seed.

use rayon::prelude::*;

use crate::error::{Result, SealError};
use crate::harness::dataset::ShapesDataset;
use crate::nn::{param_gradient, CrossEntropy, Layer, LayerGrads, Network};
use crate::rng::Rng;


#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOpts {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            epochs: 10,
            batch: 16,
            lr: 0.05,
            seed: 0,
        }
    }
}

fn shuffle(order: &mut [usize], rng: &mut Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
}

fn add_grads(mut acc: Vec<LayerGrads>, other: Vec<LayerGrads>) -> Result<Vec<LayerGrads>> {
    for (a, b) in acc.iter_mut().zip(other) {
        *a = match (std::mem::replace(a, LayerGrads::None), b) {
            (LayerGrads::None, LayerGrads::None) => LayerGrads::None,
            (
                LayerGrads::Dense { weight, bias },
                LayerGrads::Dense { weight: w2, bias: b2 },
            ) => LayerGrads::Dense {
                weight: weight.add_scaled(&w2, 1.0)?,
                bias: bias.add_scaled(&b2, 1.0)?,
            },
            (
                LayerGrads::Conv2d { weight, bias },
                LayerGrads::Conv2d { weight: w2, bias: b2 },
            ) => LayerGrads::Conv2d {
                weight: weight.add_scaled(&w2, 1.0)?,
                bias: bias.add_scaled(&b2, 1.0)?,
            },
            (
                LayerGrads::BatchNorm2d { mean, var, weight, bias },
                LayerGrads::BatchNorm2d { mean: m2, var: v2, weight: w2, bias: b2 },
            ) => LayerGrads::BatchNorm2d {
                mean: mean.add_scaled(&m2, 1.0)?,
                var: var.add_scaled(&v2, 1.0)?,
                weight: weight.add_scaled(&w2, 1.0)?,
                bias: bias.add_scaled(&b2, 1.0)?,
            },
            (
                LayerGrads::SqEx { s1, t1, s2, t2 },
                LayerGrads::SqEx { s1: a1, t1: a2, s2: a3, t2: a4 },
            ) => LayerGrads::SqEx {
                s1: s1.add_scaled(&a1, 1.0)?,
                t1: t1.add_scaled(&a2, 1.0)?,
                s2: s2.add_scaled(&a3, 1.0)?,
                t2: t2.add_scaled(&a4, 1.0)?,
            },
            _ => {
                return Err(SealError::ShapeMismatch(
                    "gradient layer kinds disagree".into(),
                ))
            }
        };
    }
    Ok(acc)
}

/// One SGD step: parameters minus `step` times the gradient. Batch-norm
/// running statistics are treated as frozen; only its affine parameters
/// move.
fn apply_step(net: &Network, grads: &[LayerGrads], step: f64) -> Result<Network> {
    let s = -step as f32;
    let mut net = net.clone();
    for (i, g) in grads.iter().enumerate() {
        let layer = net.layer(i)?.clone();
        let updated = match (layer, g) {
            (Layer::Dense { weight, bias }, LayerGrads::Dense { weight: gw, bias: gb }) => {
                Layer::Dense {
                    weight: weight.add_scaled(gw, s)?,
                    bias: bias.add_scaled(gb, s)?,
                }
            }
            (
                Layer::Conv2d { weight, bias, stride, pad },
                LayerGrads::Conv2d { weight: gw, bias: gb },
            ) => Layer::Conv2d {
                weight: weight.add_scaled(gw, s)?,
                bias: bias.add_scaled(gb, s)?,
                stride,
                pad,
            },
            (
                Layer::BatchNorm2d { mean, var, weight, bias, eps },
                LayerGrads::BatchNorm2d { weight: gw, bias: gb, .. },
            ) => Layer::BatchNorm2d {
                mean,
                var,
                weight: weight.add_scaled(gw, s)?,
                bias: bias.add_scaled(gb, s)?,
                eps,
            },
            (
                Layer::SqEx { s1, t1, s2, t2, gate },
                LayerGrads::SqEx { s1: g1, t1: g2, s2: g3, t2: g4 },
            ) => Layer::SqEx {
                s1: s1.add_scaled(g1, s)?,
                t1: t1.add_scaled(g2, s)?,
                s2: s2.add_scaled(g3, s)?,
                t2: t2.add_scaled(g4, s)?,
                gate,
            },
            (layer, LayerGrads::None) => layer,
            _ => {
                return Err(SealError::ShapeMismatch(
                    "gradient layer kinds disagree".into(),
                ))
            }
        };
        net = net.with_layer(i, updated)?;
    }
    Ok(net)
}

/// Trains with mini-batch SGD on cross-entropy and returns the final
/// model with its training accuracy. Per-sample gradients within a
/// batch are summed in index order, so a run is deterministic given the
/// seed regardless of worker count.
pub fn train_small(
    net: &Network,
    data: &ShapesDataset,
    opts: &TrainOpts,
) -> Result<(Network, f64)> {
    if data.is_empty() {
        return Err(SealError::InvalidArgument("training set is empty".into()));
    }
    if opts.batch == 0 {
        return Err(SealError::InvalidArgument("batch size must be positive".into()));
    }
    if !(opts.lr >= 0.0) || !opts.lr.is_finite() {
        return Err(SealError::InvalidArgument(format!(
            "learning rate must be non-negative and finite, got {}",
            opts.lr
        )));
    }
    let mut net = net.clone();
    let mut rng = Rng::new(opts.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..opts.epochs {
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(opts.batch) {
            let per_sample: Vec<Vec<LayerGrads>> = chunk
                .par_iter()
                .map(|&idx| {
                    param_gradient(
                        &net,
                        &data.images[idx],
                        &CrossEntropy {
                            target: data.labels[idx],
                        },
                    )
                })
                .collect::<Result<_>>()?;
            let mut summed: Option<Vec<LayerGrads>> = None;
            for g in per_sample {
                summed = Some(match summed {
                    None => g,
                    Some(acc) => add_grads(acc, g)?,
                });
            }
            let step = opts.lr / chunk.len() as f64;
            net = apply_step(&net, &summed.expect("chunk is non-empty"), step)?;
        }
    }
    let train_acc = accuracy(&net, data)?;
    Ok((net, train_acc))
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

/// Fraction of images whose argmax prediction matches the label.
pub fn accuracy(net: &Network, data: &ShapesDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(SealError::InvalidArgument("evaluation set is empty".into()));
    }
    let correct: usize = data
        .images
        .par_iter()
        .zip(data.labels.par_iter())
        .map(|(x, &label)| Ok(usize::from(argmax(net.forward(x)?.data()) == label)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::{flatten_images, DatasetSpec};
    use crate::models::random_mlp;

    fn bars_flat(seed: u64, count: usize) -> ShapesDataset {
        let spec = DatasetSpec {
            seed,
            count,
            classes: 2,
            ..Default::default()
        };
        let mut d = ShapesDataset::generate(spec).unwrap();
        d.images = flatten_images(&d.images);
        d
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut rng = Rng::new(40);
        let net = random_mlp(&[256, 16, 2], &mut rng).unwrap();
        let data = bars_flat(5, 32);
        let opts = TrainOpts {
            epochs: 2,
            lr: 0.0,
            ..Default::default()
        };
        let (trained, _) = train_small(&net, &data, &opts).unwrap();
        assert_eq!(net, trained);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = Rng::new(41);
        let net = random_mlp(&[256, 16, 2], &mut rng).unwrap();
        let data = bars_flat(6, 48);
        let opts = TrainOpts {
            epochs: 2,
            ..Default::default()
        };
        let (a, acc_a) = train_small(&net, &data, &opts).unwrap();
        let (b, acc_b) = train_small(&net, &data, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(acc_a, acc_b);
    }

    #[test]
    fn mlp_learns_the_two_bar_task() {
        let mut rng = Rng::new(42);
        let net = random_mlp(&[256, 16, 2], &mut rng).unwrap();
        let train = bars_flat(7, 128);
        let test = bars_flat(8, 64);
        let opts = TrainOpts::default();
        let (trained, train_acc) = train_small(&net, &train, &opts).unwrap();
        assert!(train_acc >= 0.95, "train accuracy {train_acc}");
        let test_acc = accuracy(&trained, &test).unwrap();
        assert!(test_acc >= 0.95, "test accuracy {test_acc}");
    }

    #[test]
    fn mismatched_images_and_batch_validation() {
        let mut rng = Rng::new(43);
        let net = random_mlp(&[256, 16, 2], &mut rng).unwrap();
        let data = bars_flat(9, 8);
        let opts = TrainOpts {
            batch: 0,
            ..Default::default()
        };
        assert!(train_small(&net, &data, &opts).is_err());
    }
}
