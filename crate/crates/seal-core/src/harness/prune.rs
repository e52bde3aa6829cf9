//! l1 magnitude pruning, the cheapest attack a detector must survive.

use crate::error::{Result, SealError};
use crate::nn::{Layer, Network};
use crate::stain::{detector_readout, StainRecord};

/// Zeroes conv/dense weights by l1 magnitude. Unstructured: the
/// smallest-|w| `fraction` of all weight entries across the network.
/// Structured: per layer, the rows (dense) or kernels (conv) with the
/// smallest l1 norms. Biases and normalization parameters are left
/// alone in both modes.
pub fn prune_l1(net: &Network, fraction: f64, structured: bool) -> Result<Network> {
    if !(0.0..=1.0).contains(&fraction) || !fraction.is_finite() {
        return Err(SealError::InvalidArgument(format!(
            "pruning fraction must be in [0, 1], got {fraction}"
        )));
    }
    if structured {
        prune_structured(net, fraction)
    } else {
        prune_unstructured(net, fraction)
    }
}

fn weight_of(layer: &Layer) -> Option<&crate::Tensor> {
    match layer {
        Layer::Dense { weight, .. } | Layer::Conv2d { weight, .. } => Some(weight),
        _ => None,
    }
}

fn with_weight(layer: &Layer, weight: crate::Tensor) -> Layer {
    match layer.clone() {
        Layer::Dense { bias, .. } => Layer::Dense { weight, bias },
        Layer::Conv2d { bias, stride, pad, .. } => Layer::Conv2d {
            weight,
            bias,
            stride,
            pad,
        },
        other => other,
    }
}

fn prune_unstructured(net: &Network, fraction: f64) -> Result<Network> {
    let mut entries: Vec<(f32, usize, usize)> = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        if let Some(w) = weight_of(layer) {
            for (e, &v) in w.data().iter().enumerate() {
                entries.push((v.abs(), i, e));
            }
        }
    }
    let victims = (fraction * entries.len() as f64).floor() as usize;
    entries.sort_unstable_by(|a, b| {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });
    let mut net = net.clone();
    for &(_, i, e) in entries.iter().take(victims) {
        let layer = net.layer(i)?.clone();
        let mut w = weight_of(&layer).expect("entry came from a weighted layer").clone();
        w.data_mut()[e] = 0.0;
        net = net.with_layer(i, with_weight(&layer, w))?;
    }
    Ok(net)
}

fn prune_structured(net: &Network, fraction: f64) -> Result<Network> {
    let mut net = net.clone();
    for i in 0..net.len() {
        let layer = net.layer(i)?.clone();
        let Some(w) = weight_of(&layer) else { continue };
        let rows = w.shape()[0];
        let per = w.len() / rows;
        let mut norms: Vec<(f64, usize)> = (0..rows)
            .map(|r| {
                let norm: f64 = w.data()[r * per..(r + 1) * per]
                    .iter()
                    .map(|&v| (v as f64).abs())
                    .sum();
                (norm, r)
            })
            .collect();
        norms.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let victims = (fraction * rows as f64).floor() as usize;
        let mut w = w.clone();
        for &(_, r) in norms.iter().take(victims) {
            w.data_mut()[r * per..(r + 1) * per].fill(0.0);
        }
        net = net.with_layer(i, with_weight(&layer, w))?;
    }
    Ok(net)
}

/// Relative change of the detector's trigger response across an attack:
/// `|after - before| / |before|`. Zero means the detector survived
/// untouched.
pub fn detector_survival(
    before: &Network,
    after: &Network,
    record: &StainRecord,
) -> Result<f64> {
    let r0 = detector_readout(before, record)?;
    let r1 = detector_readout(after, record)?;
    if r0 == 0.0 {
        return Err(SealError::Numeric(
            "reference detector response is zero; relative change is undefined".into(),
        ));
    }
    Ok((r1 - r0).abs() / r0.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{random_mlp, toy_cnn};
    use crate::rng::Rng;
    use crate::stain::{stain_conv, OffResponse};
    use crate::trigger::{Reduction, TriggerOpts};

    #[test]
    fn zero_fraction_is_identity() {
        let mut rng = Rng::new(60);
        let net = toy_cnn(1, 16, 3, &mut rng).unwrap();
        assert_eq!(net, prune_l1(&net, 0.0, false).unwrap());
        assert_eq!(net, prune_l1(&net, 0.0, true).unwrap());
    }

    #[test]
    fn full_fraction_zeroes_every_weight() {
        let mut rng = Rng::new(61);
        let net = random_mlp(&[6, 5, 3], &mut rng).unwrap();
        for structured in [false, true] {
            let pruned = prune_l1(&net, 1.0, structured).unwrap();
            for layer in pruned.layers() {
                if let Some(w) = weight_of(layer) {
                    assert!(w.data().iter().all(|&v| v == 0.0));
                }
            }
            // Biases survive: with all weights zero the output is the
            // final layer's bias alone.
            let Layer::Dense { bias, .. } = pruned.layer(2).unwrap() else {
                panic!("expected dense");
            };
            let x = Rng::new(62).uniform_tensor(&[6], 0.0, 1.0);
            let y = pruned.forward(&x).unwrap();
            assert_eq!(y.data(), bias.data());
        }
    }

    #[test]
    fn unstructured_prunes_the_smallest_magnitudes() {
        let net = crate::Network::new(
            vec![4],
            vec![(
                "fc".into(),
                Layer::Dense {
                    weight: crate::Tensor::new(vec![2, 4], vec![
                        0.1, -4.0, 0.2, 3.0, //
                        -0.3, 2.0, 0.05, -1.0,
                    ])
                    .unwrap(),
                    bias: crate::Tensor::from_vec(vec![1.0, 1.0]),
                },
            )],
        )
        .unwrap();
        let pruned = prune_l1(&net, 0.5, false).unwrap();
        let Layer::Dense { weight, .. } = pruned.layer(0).unwrap() else {
            panic!("expected dense");
        };
        assert_eq!(
            weight.data(),
            &[0.0, -4.0, 0.0, 3.0, 0.0, 2.0, 0.0, -1.0]
        );
    }

    #[test]
    fn structured_prunes_whole_rows_per_layer() {
        let net = crate::Network::new(
            vec![3],
            vec![(
                "fc".into(),
                Layer::Dense {
                    weight: crate::Tensor::new(vec![3, 3], vec![
                        5.0, 5.0, 5.0, //
                        0.1, 0.1, 0.1, //
                        1.0, 1.0, 1.0,
                    ])
                    .unwrap(),
                    bias: crate::Tensor::from_vec(vec![0.0; 3]),
                },
            )],
        )
        .unwrap();
        let pruned = prune_l1(&net, 0.34, true).unwrap();
        let Layer::Dense { weight, .. } = pruned.layer(0).unwrap() else {
            panic!("expected dense");
        };
        assert_eq!(
            weight.data(),
            &[5.0, 5.0, 5.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn stained_detector_shrugs_off_moderate_unstructured_pruning() {
        let mut rng = Rng::new(63);
        let net = toy_cnn(1, 16, 3, &mut rng).unwrap();
        let opts = TriggerOpts {
            iters: 150,
            restarts: 2,
            ..Default::default()
        };
        let (stained, record) = stain_conv(
            &net,
            2,
            None,
            25.0,
            OffResponse::Fixed(-1.0),
            Reduction::Position { row: 4, col: 4 },
            &opts,
            15,
        )
        .unwrap();
        let pruned = prune_l1(&stained, 0.3, false).unwrap();
        let change = detector_survival(&stained, &pruned, &record).unwrap();
        assert!(change <= 0.2, "response changed by {change}");
        assert_eq!(detector_survival(&stained, &stained, &record).unwrap(), 0.0);
    }
}
