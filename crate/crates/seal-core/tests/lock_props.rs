//! Lock mechanics checked structurally: the conduit carries exactly
//! zero off-trigger, the unlock identity holds at the logits, editing
//! is idempotent and touches only the disruptor writes, and detector
//! removal does not lift the disruption.

mod common;

use seal_core::lock::{
    inject_sqex, lock_internal, lock_sqex, make_edited, LockKind, LockOptions, LockRecord,
};
use seal_core::models::toy_cnn;
use seal_core::nn::{GateKind, Layer};
use seal_core::trigger::{apply_patch, TriggerOpts};
use seal_core::{Network, Rng, Tensor};

fn quick_opts() -> LockOptions {
    LockOptions {
        response: 50.0,
        scale: Some(25.0),
        // First-layer triggers over raw pixels need a real budget to
        // dominate the silencing envelope for every detector draw.
        trigger: TriggerOpts {
            iters: 600,
            restarts: 3,
            ..TriggerOpts::default()
        },
        ..LockOptions::default()
    }
}

fn probe_set(seed: u64, count: usize) -> Vec<Tensor> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|_| rng.uniform_tensor(&[1, 16, 16], 0.0, 1.0))
        .collect()
}

fn internal_lock(seed: u64) -> (Network, Network, LockRecord) {
    let mut rng = Rng::new(0xF0);
    let net = toy_cnn(1, 16, 4, &mut rng).unwrap();
    let probes = probe_set(0xF1, 24);
    let (locked, record) = lock_internal(&net, 0, None, &quick_opts(), &probes, seed).unwrap();
    (net, locked, record)
}

fn sqex_lock(seed: u64) -> (Network, Network, LockRecord) {
    let mut rng = Rng::new(0xF2);
    let base = toy_cnn(1, 16, 4, &mut rng).unwrap();
    let mut inject_rng = Rng::new(0xF3);
    let net = inject_sqex(&base, 5, 4, 0.05, GateKind::HardSigmoid, &mut inject_rng).unwrap();
    let probes = probe_set(0xF4, 24);
    let (locked, record) = lock_sqex(&net, 4, None, &quick_opts(), &probes, seed).unwrap();
    (net, locked, record)
}

/// Off-trigger, the detector channel is silenced below zero, so after
/// ReLU the conduit plane is identically zero all the way to the pooled
/// feature the disrupted layer reads: the disruption is total, not
/// approximate.
#[test]
fn internal_conduit_is_exactly_zero_off_trigger() {
    let (_, locked, record) = internal_lock(43);
    // GAP output feeds the logits layer.
    let gap_index = record.disrupted_layer;
    let mut rng = Rng::new(0xF5);
    for _ in 0..1000 {
        let x = rng.uniform_tensor(&[1, 16, 16], 0.0, 1.0);
        let pooled = locked.feature_at(gap_index, &x).unwrap();
        assert_eq!(pooled.data()[0], 0.0, "conduit leaked off-trigger");
    }
    // The disrupted bias is literally the stored s·u + t.
    let Layer::Dense { bias, .. } = locked.layer(record.disrupted_layer).unwrap() else {
        panic!("disrupted layer is the dense logits layer");
    };
    for i in 0..bias.len() {
        let expected = (record.scale * record.disruptor.data()[i] as f64
            + record.offset.data()[i] as f64) as f32;
        assert_eq!(bias.data()[i], expected, "logit {i}");
    }
}

#[test]
fn sqex_gate_readout_is_exactly_zero_off_trigger() {
    let (_, locked, record) = sqex_lock(47);
    let sqex_index = record.disrupted_layer;
    let mut rng = Rng::new(0xF6);
    for _ in 0..1000 {
        let x = rng.uniform_tensor(&[1, 16, 16], 0.0, 1.0);
        let features = locked.feature_at(sqex_index, &x).unwrap();
        let mu = features.channel_mean().unwrap();
        assert_eq!(mu.data()[0], 0.0, "detector mean leaked off-trigger");
    }
    let Layer::SqEx { t2, .. } = locked.layer(sqex_index).unwrap() else {
        panic!("disrupted layer is the squeeze-excite block");
    };
    for i in 0..t2.len() {
        let expected = (record.scale * record.disruptor.data()[i] as f64
            + record.offset.data()[i] as f64) as f32;
        assert_eq!(t2.data()[i], expected, "gate offset {i}");
    }
}

#[test]
fn unlock_identity_holds_at_the_logits() {
    for (label, (_, locked, record)) in [
        ("internal", internal_lock(53)),
        ("sq_ex", sqex_lock(59)),
    ] {
        let edited = make_edited(&locked, &record).unwrap();
        let mut rng = Rng::new(0xF7);
        for _ in 0..50 {
            let background = rng.uniform_tensor(&[1, 16, 16], 0.0, 1.0);
            let x = apply_patch(&background, &record.patch).unwrap();
            let a = locked.forward(&x).unwrap();
            let b = edited.forward(&x).unwrap();
            let gap = a
                .data()
                .iter()
                .zip(b.data().iter())
                .map(|(p, q)| (p - q).abs())
                .fold(0.0f32, f32::max);
            assert!((gap as f64) <= 1e-4, "{label}: patched logits gap {gap}");
        }
    }
}

/// Editing reverts the disruptor and nothing else, and editing an
/// already-edited network changes nothing.
#[test]
fn make_edited_is_idempotent_and_minimal() {
    for (label, (_, locked, record)) in [
        ("internal", internal_lock(61)),
        ("sq_ex", sqex_lock(67)),
    ] {
        let edited = make_edited(&locked, &record).unwrap();
        let twice = make_edited(&edited, &record).unwrap();
        assert_eq!(edited, twice, "{label}: editing must be idempotent");

        for j in 0..locked.len() {
            let same = locked.layer(j).unwrap() == edited.layer(j).unwrap();
            if j == record.disrupted_layer {
                assert!(!same, "{label}: disrupted layer {j} must change");
            } else {
                assert!(same, "{label}: layer {j} must stay untouched");
            }
        }

        match record.kind {
            LockKind::Internal => {
                let (Layer::Dense { weight: wl, bias: bl }, Layer::Dense { weight: we, bias: be }) = (
                    locked.layer(record.disrupted_layer).unwrap(),
                    edited.layer(record.disrupted_layer).unwrap(),
                ) else {
                    panic!("internal disruption lives in the dense logits layer");
                };
                assert_ne!(bl, be);
                let cols = wl.shape()[1];
                for r in 0..wl.shape()[0] {
                    for c in 1..cols {
                        assert_eq!(
                            wl.data()[r * cols + c],
                            we.data()[r * cols + c],
                            "only the conduit column may differ"
                        );
                    }
                    assert_eq!(we.data()[r * cols], 0.0, "edited conduit column is zeroed");
                }
            }
            LockKind::SqEx => {
                let (
                    Layer::SqEx { s2: s2l, t2: t2l, s1: s1l, t1: t1l, .. },
                    Layer::SqEx { s2: s2e, t2: t2e, s1: s1e, t1: t1e, .. },
                ) = (
                    locked.layer(record.disrupted_layer).unwrap(),
                    edited.layer(record.disrupted_layer).unwrap(),
                ) else {
                    panic!("sq-ex disruption lives in the squeeze-excite block");
                };
                assert_eq!(s1l, s1e);
                assert_eq!(t1l, t1e);
                assert_ne!(t2l, t2e);
                let hidden = s2l.shape()[1];
                for r in 0..s2l.shape()[0] {
                    for c in 1..hidden {
                        assert_eq!(
                            s2l.data()[r * hidden + c],
                            s2e.data()[r * hidden + c],
                            "only the conduit column may differ"
                        );
                    }
                    assert_eq!(s2e.data()[r * hidden], 0.0);
                }
            }
        }
    }
}

#[test]
fn backupless_records_verify_but_cannot_edit() {
    let (_, locked, record) = internal_lock(71);
    let stripped = seal_core::lock::lock_from_bytes(
        &seal_core::lock::lock_to_bytes(&record, false).unwrap(),
    )
    .unwrap();
    assert!(stripped.bias_backup.is_none());
    assert_eq!(stripped.conduit_signal, record.conduit_signal);
    let err = make_edited(&locked, &stripped).unwrap_err();
    assert!(matches!(err, seal_core::SealError::Precondition(_)), "{err:?}");
}
