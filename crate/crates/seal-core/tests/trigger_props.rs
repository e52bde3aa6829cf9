//! Trigger optimizer and patch guarantees: best-so-far bookkeeping,
//! locality of the detector response to the patched region, and patch
//! application behavior.

mod common;

use seal_core::models::toy_cnn;
use seal_core::stain::{stain_conv, OffResponse};
use seal_core::trigger::{
    apply_patch, extract_patch, optimize_trigger, patch_from_bytes, patch_to_bytes, Reduction,
    TriggerOpts,
};
use seal_core::{Rng, Tensor};

/// The optimizer keeps the best iterate, so extending the budget under
/// the same seed can only improve the response: the longer run replays
/// the shorter run's iterates before adding new ones.
#[test]
fn longer_budget_never_loses_response() {
    let mut rng = Rng::new(0xE0);
    let net = toy_cnn(1, 16, 3, &mut rng).unwrap();
    let detector = rng.unit_sphere(8 * 9).unwrap().reshape(&[8, 3, 3]).unwrap();
    for seed in 0..5u64 {
        let mut last = f64::NEG_INFINITY;
        for iters in [50usize, 100, 200] {
            let opts = TriggerOpts {
                iters,
                restarts: 2,
                ..TriggerOpts::default()
            };
            let (trigger, response) = optimize_trigger(
                &net,
                2,
                &detector,
                Reduction::Position { row: 4, col: 4 },
                &opts,
                seed,
            )
            .unwrap();
            assert!(
                response >= last,
                "seed {seed}: response fell from {last} to {response} at {iters} iters"
            );
            assert_eq!(trigger.shape(), &[1, 16, 16]);
            last = response;
        }
    }
}

/// Pixels outside the receptive field cannot reach the response
/// position, so stamping the patch pins the detector readout no matter
/// what the rest of the image holds.
#[test]
fn detector_response_depends_only_on_the_patch() {
    let mut rng = Rng::new(0xE1);
    let net = toy_cnn(1, 16, 3, &mut rng).unwrap();
    let delta = 25.0;
    let (stained, record) = stain_conv(
        &net,
        0,
        None,
        delta,
        OffResponse::Fixed(-1.0),
        Reduction::Position { row: 8, col: 8 },
        &TriggerOpts {
            iters: 200,
            restarts: 2,
            ..TriggerOpts::default()
        },
        41,
    )
    .unwrap();
    let patch = extract_patch(&stained, 0, &record.trigger, 8, 8).unwrap();

    let readout = |x: &Tensor| -> f32 {
        let post = stained.feature_at(1, x).unwrap();
        post.at(&[record.index, 8, 8])
    };
    let reference = readout(&apply_patch(&record.trigger, &patch).unwrap());
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let background = rng.uniform_tensor(&[1, 16, 16], 0.0, 1.0);
        let patched = apply_patch(&background, &patch).unwrap();
        worst = worst.max((readout(&patched) - reference).abs());
    }
    assert!(
        (worst as f64) <= 1e-4 * delta,
        "response varied by {worst} across backgrounds"
    );
}

#[test]
fn patch_application_is_idempotent_and_round_trips() {
    let mut rng = Rng::new(0xE2);
    let net = toy_cnn(1, 16, 3, &mut rng).unwrap();
    let trigger = rng.uniform_tensor(&[1, 16, 16], 0.0, 1.0);
    let patch = extract_patch(&net, 2, &trigger, 4, 4).unwrap();

    let image = rng.uniform_tensor(&[1, 16, 16], 0.0, 1.0);
    let once = apply_patch(&image, &patch).unwrap();
    let twice = apply_patch(&once, &patch).unwrap();
    assert_eq!(once, twice);

    let back = patch_from_bytes(&patch_to_bytes(&patch).unwrap()).unwrap();
    assert_eq!(back.pixels, patch.pixels);
    assert_eq!(back.layer, patch.layer);
    assert_eq!((back.row, back.col), (patch.row, patch.col));
    let again = apply_patch(&image, &back).unwrap();
    assert_eq!(once, again);
}

/// Corner positions produce receptive fields that overlap the padding;
/// the stored pixels are just the in-image part and still apply
/// cleanly.
#[test]
fn padding_overlap_patches_apply() {
    let mut rng = Rng::new(0xE3);
    let net = toy_cnn(1, 16, 3, &mut rng).unwrap();
    let trigger = rng.uniform_tensor(&[1, 16, 16], 0.0, 1.0);
    let patch = extract_patch(&net, 0, &trigger, 0, 0).unwrap();
    assert_eq!(patch.pixels.shape(), &[1, 2, 2], "corner field clips to 2x2");
    let image = rng.uniform_tensor(&[1, 16, 16], 0.0, 1.0);
    let patched = apply_patch(&image, &patch).unwrap();
    for r in 0..2 {
        for c in 0..2 {
            assert_eq!(patched.at(&[0, r, c]), patch.pixels.at(&[0, r, c]));
        }
    }
    assert_eq!(patched.at(&[0, 5, 5]), image.at(&[0, 5, 5]));
}
