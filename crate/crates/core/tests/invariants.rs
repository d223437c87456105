mod common;

use cuedepth::gating::gate_cue;
use cuedepth::model::GateMode;
use cuedepth::tensor::Tensor;
use proptest::prelude::*;

proptest! {
    #[test]
    fn zero_log_variance_gate_is_identity(data in prop::collection::vec(-1e6f64..1e6, 12)) {
        let c = Tensor::new(&[2, 2, 3], data).unwrap();
        prop_assert_eq!(gate_cue(&c, &Tensor::zeros(&[2, 2, 1])).unwrap(), c);
    }

    #[test]
    fn gating_shrinks_with_log_variance(v in -10.0f64..10.0, s in 0.0f64..5.0, extra in 0.01f64..5.0) {
        let c = Tensor::full(&[1, 1, 1], v);
        let a = gate_cue(&c, &Tensor::full(&[1, 1, 1], s)).unwrap().item();
        let b = gate_cue(&c, &Tensor::full(&[1, 1, 1], s + extra)).unwrap().item();
        prop_assert!(b.abs() <= a.abs());
    }

    #[test]
    fn shuffle_keeps_slot_multiset(slots in 1usize..40, dim in 1usize..6, fraction in 0.0f64..=1.0, seed in any::<u64>()) {
        prop_assert!(common::shuffle_keeps_multiset(slots, dim, fraction, seed));
    }

    #[test]
    fn si_loss_ignores_global_scale(
        pred in prop::collection::vec(0.1f64..50.0, 16),
        gt in prop::collection::vec(0.1f64..50.0, 16),
        scale in 0.01f64..100.0,
    ) {
        let p = Tensor::new(&[4, 4, 1], pred).unwrap();
        let g = Tensor::new(&[4, 4, 1], gt).unwrap();
        prop_assert!(common::si_scale_gap(&p, &g, scale) < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn memory_writes_stay_inside_convex_hull(seed in any::<u64>(), writes in 1usize..6) {
        let model = common::memory_model(seed % 7, GateMode::Learned);
        prop_assert!(common::convex_stream_holds(&model, seed, writes));
    }
}

#[test]
fn frozen_gate_gets_no_gradient() {
    for seed in 0..5 {
        let frozen = common::gate_weight_gradient(GateMode::Frozen, seed);
        assert!(frozen.iter().all(|&g| g == 0.0), "{frozen:?}");
        let learned = common::gate_weight_gradient(GateMode::Learned, seed);
        assert!(learned.iter().any(|&g| g != 0.0));
    }
}

#[test]
fn precision_weighting_beats_each_cue() {
    let (a, b, fused) = common::fusion_testbed(128, 3);
    assert!(fused < a && fused < b, "{a} {b} {fused}");
}
