//! Backpropagation against central finite differences taken through the
//! f64 reference evaluator. The reference runs entirely in f64, so the
//! difference quotient is clean; the engine stores activations in f32,
//! which leaves a small relative gap the tolerances account for.

mod common;

use common::{
    fd_input_gradient, fd_param_gradient, flatten_grads, random_arch, ref_cross_entropy,
    rel_l2, widen_tensor, RefLayer, RefNet, RefShape,
};
use seal_core::nn::{input_gradient, param_gradient, ConvReadout, CrossEntropy, DotReadout};
use seal_core::trigger::Reduction;
use seal_core::Rng;

// Small enough that no sampled pre-activation sits within one step of
// a ReLU kink; the reference runs in f64, so rounding stays far below
// the tolerance.
const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

#[test]
fn parameter_gradients_match_finite_differences() {
    for flavor in 0..5 {
        for seed in 0..4 {
            let mut rng = Rng::new(3000 + flavor as u64 * 31 + seed);
            let (net, shape) = random_arch(flavor, &mut rng);
            let x = rng.uniform_tensor(&shape, -1.0, 1.0);
            let target = rng.below(3) as usize;

            let engine = flatten_grads(
                &param_gradient(&net, &x, &CrossEntropy { target }).unwrap(),
            );

            let mut refnet = RefNet::from_network(&net);
            let xs = widen_tensor(&x);
            let objective = ref_cross_entropy(target);
            let fd = fd_param_gradient(&mut refnet, &xs, FD_STEP, &objective);

            assert_eq!(fd.len(), engine.len(), "flavor {flavor} seed {seed}");
            let rel = rel_l2(&fd, &engine);
            assert!(
                rel <= REL_TOL,
                "flavor {flavor} seed {seed}: rel gap {rel}"
            );
        }
    }
}

#[test]
fn input_gradients_match_finite_differences() {
    for flavor in 0..5 {
        for seed in 0..4 {
            let mut rng = Rng::new(4000 + flavor as u64 * 31 + seed);
            let (net, shape) = random_arch(flavor, &mut rng);
            let x = rng.uniform_tensor(&shape, -1.0, 1.0);
            let out_len = net.output_shape().unwrap().iter().product::<usize>();
            let readout = rng.normal_tensor(&[out_len]);

            let engine = input_gradient(&net, &x, &DotReadout(readout.clone())).unwrap();

            let refnet = RefNet::from_network(&net);
            let xs = widen_tensor(&x);
            let objective = common::ref_dot(widen_tensor(&readout));
            let fd = fd_input_gradient(&refnet, &xs, FD_STEP, &objective);

            let rel = rel_l2(&fd, &widen_tensor(&engine));
            assert!(
                rel <= REL_TOL,
                "flavor {flavor} seed {seed}: rel gap {rel}"
            );
        }
    }
}

/// The correlation readout drives trigger optimization, so its input
/// gradient gets its own check on conv prefixes, both reductions.
#[test]
fn conv_readout_gradients_match_finite_differences() {
    for seed in 0..8 {
        let mut rng = Rng::new(5000 + seed);
        let (net, shape) = random_arch(1, &mut rng);
        // Conv / ReLU prefix of the flavor-1 stack.
        let prefix = net.prefix(2).unwrap();
        let out_shape = prefix.output_shape().unwrap();
        let (c, h, w) = (out_shape[0], out_shape[1], out_shape[2]);
        let k = 2usize.min(h).min(w);
        let kernel = rng.normal_tensor(&[c, k, k]);
        let (mh, mw) = (h - k + 1, w - k + 1);
        let reduction = if seed % 2 == 0 {
            Reduction::Position {
                row: rng.below(mh as u64) as usize,
                col: rng.below(mw as u64) as usize,
            }
        } else {
            Reduction::Mean
        };
        let readout = ConvReadout {
            kernel: kernel.clone(),
            stride: 1,
            pad: 0,
            reduction: reduction.clone(),
        };

        let x = rng.uniform_tensor(&shape, -1.0, 1.0);
        let engine = input_gradient(&prefix, &x, &readout).unwrap();

        let refnet = RefNet::from_network(&prefix);
        let ref_corr = RefNet {
            layers: vec![RefLayer::Conv2d {
                w: widen_tensor(&kernel),
                b: vec![0.0],
                o: 1,
                c,
                k,
                stride: 1,
                pad: 0,
            }],
            input: RefShape::Map { c, h, w },
        };
        let objective = |features: &[f64]| {
            let map = ref_corr.forward(features);
            match reduction {
                Reduction::Position { row, col } => map[row * mw + col],
                Reduction::Mean => map.iter().sum::<f64>() / map.len() as f64,
            }
        };
        let fd = fd_input_gradient(&refnet, &widen_tensor(&x), FD_STEP, &objective);

        let rel = rel_l2(&fd, &widen_tensor(&engine));
        assert!(rel <= REL_TOL, "seed {seed}: rel gap {rel}");
    }
}
