//! The unrolled meta-gradient against the symbolic and finite-difference oracles.

mod common;

use common::{fixed_batches, flat, kaiming, shuffled_batches, small_mlp, synthetic};
use prospr_core::oracle::{
    compare, fd_meta_gradient, relative_error, symbolic_quadratic_oracle, unrolled_loss, EntrySelection, FdConfig,
    ScalarQuadratic,
};
use prospr_core::pruning::{
    first_order_meta_gradient, meta_gradient, prospr_scores, snip_scores, Granularity, MaskSpec,
};
use prospr_core::{grad_magnitude_report, Error, RetainPolicy};
use proptest::prelude::*;

fn quadratic_backward(x: f64, y: f64, w_init: f64, lr: f64, steps: usize) -> f64 {
    let state = ScalarQuadratic::state(w_init);
    let spec = MaskSpec::for_model(&state, Granularity::PerWeight);
    let grads = meta_gradient(&ScalarQuadratic { x, y }, &state, &spec, &ScalarQuadratic::batches(steps), lr, RetainPolicy::Keep)
        .unwrap();
    flat(grads.into_tensors())[0]
}

#[test]
fn quadratic_fixture_agrees_across_oracles() {
    // w0 = 1, w1 = 0.8, (w1·2 − 1)·2·(1 − 0.4)·1 = 0.72
    let symbolic = symbolic_quadratic_oracle(2.0, 1.0, 1.0, 1.0, 0.1, 1);
    assert!((symbolic - 0.72).abs() < 1e-15);
    let backward = quadratic_backward(2.0, 1.0, 1.0, 0.1, 1);
    assert!(relative_error(backward, symbolic, 0.0) <= 1e-12);

    let state = ScalarQuadratic::state(1.0);
    let spec = MaskSpec::for_model(&state, Granularity::PerWeight);
    let cfg = FdConfig { entries: EntrySelection::All, ..FdConfig::default() };
    let fd = fd_meta_gradient(&ScalarQuadratic { x: 2.0, y: 1.0 }, &state, &spec, &ScalarQuadratic::batches(1), 0.1, &cfg)
        .unwrap();
    assert!(relative_error(fd[0].value, symbolic, 0.0) <= 1e-8, "{fd:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unrolled_backward_matches_closed_form(
        x in 0.2f64..1.5,
        y in -2.0f64..2.0,
        w_init in 0.1f64..2.0,
        lr in 0.0f64..0.4,
        steps in 0usize..6,
    ) {
        let exact = symbolic_quadratic_oracle(x, y, w_init, 1.0, lr, steps);
        let backward = quadratic_backward(x, y, w_init, lr, steps);
        prop_assert!(relative_error(backward, exact, 1e-300) <= 1e-12, "{backward} vs {exact}");
    }
}

#[test]
fn release_policy_refuses_unrolled_differentiation() {
    let state = ScalarQuadratic::state(1.0);
    let spec = MaskSpec::for_model(&state, Granularity::PerWeight);
    let obj = ScalarQuadratic { x: 1.0, y: 0.0 };
    let err = meta_gradient(&obj, &state, &spec, &ScalarQuadratic::batches(2), 0.1, RetainPolicy::Release).unwrap_err();
    assert!(matches!(err, Error::GraphTruncated { .. }), "{err}");
    assert!(err.to_string().contains("RetainPolicy::Keep"));
    assert!(meta_gradient(&obj, &state, &spec, &ScalarQuadratic::batches(0), 0.1, RetainPolicy::Release).is_ok());
}

#[test]
fn small_mlp_matches_finite_differences_on_every_entry() {
    let data = synthetic(3, 10, 4, 2);
    let net = small_mlp(4, 5, 3);
    let state = kaiming(&net, 7);
    let spec = MaskSpec::for_model(&state, Granularity::PerWeight);
    let batches = shuffled_batches(&data, 8, 3, 1);
    let analytic = flat(meta_gradient(&net, &state, &spec, &batches, 0.1, RetainPolicy::Keep).unwrap().into_tensors());
    let cfg = FdConfig { step: 1e-3, entries: EntrySelection::All, ..FdConfig::default() };
    let fd = fd_meta_gradient(&net, &state, &spec, &batches, 0.1, &cfg).unwrap();
    assert_eq!(fd.len(), spec.total_entries());
    let report = compare(&analytic, &fd, 1e-4);
    assert!(report.passed, "max {:e}", report.max_relative_error);
}

#[test]
fn unrolled_loss_at_all_ones_matches_plain_training() {
    let data = synthetic(2, 8, 3, 4);
    let net = small_mlp(3, 4, 2);
    let state = kaiming(&net, 1);
    let spec = MaskSpec::for_model(&state, Granularity::PerWeight);
    let batches = fixed_batches(&data, 6, 2, 0);
    let ones = vec![1.0; spec.total_entries()];
    let a = unrolled_loss(&net, &state, &spec, &ones, &batches, 0.05).unwrap();
    let b = unrolled_loss(&net, &state, &spec, &ones, &batches, 0.05).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    let err = unrolled_loss(&net, &state, &spec, &ones[1..], &batches, 0.05).unwrap_err();
    assert!(matches!(err, Error::MaskMismatch(_)));
}

#[test]
fn first_order_is_exact_without_inner_learning_rate() {
    let data = synthetic(3, 6, 4, 9);
    let net = small_mlp(4, 6, 3);
    let state = kaiming(&net, 3);
    let batches = shuffled_batches(&data, 6, 3, 2);
    for granularity in [Granularity::PerWeight, Granularity::PerChannel] {
        let spec = MaskSpec::for_model(&state, granularity);
        let exact = flat(meta_gradient(&net, &state, &spec, &batches, 0.0, RetainPolicy::Keep).unwrap().into_tensors());
        let approx = flat(first_order_meta_gradient(&net, &state, &spec, &batches, 0.0).unwrap().into_tensors());
        for (a, b) in exact.iter().zip(&approx) {
            assert!(relative_error(*a, *b, 1e-300) <= 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn channel_meta_gradient_is_the_sum_over_its_weights() {
    let data = synthetic(3, 8, 5, 5);
    let net = small_mlp(5, 6, 3);
    let state = kaiming(&net, 4);
    let batches = shuffled_batches(&data, 8, 3, 3);
    let per_weight = meta_gradient(&net, &state, &MaskSpec::for_model(&state, Granularity::PerWeight), &batches, 0.1, RetainPolicy::Keep)
        .unwrap()
        .into_tensors();
    let per_channel = meta_gradient(&net, &state, &MaskSpec::for_model(&state, Granularity::PerChannel), &batches, 0.1, RetainPolicy::Keep)
        .unwrap()
        .into_tensors();
    for (w, c) in per_weight.iter().zip(&per_channel) {
        let rows = c.len();
        for (r, chunk) in w.data().chunks(w.len() / rows).enumerate() {
            let sum: f64 = chunk.iter().sum();
            assert!(relative_error(sum, c.data()[r], 1e-300) <= 1e-8, "row {r}: {sum} vs {}", c.data()[r]);
        }
    }
}

#[test]
fn meta_gradient_norms_are_positive_on_every_layer() {
    let data = synthetic(3, 10, 4, 8);
    let net = small_mlp(4, 8, 3);
    let state = kaiming(&net, 2);
    let spec = MaskSpec::for_model(&state, Granularity::PerWeight);
    let grads = meta_gradient(&net, &state, &spec, &shuffled_batches(&data, 10, 4, 0), 0.1, RetainPolicy::Keep).unwrap();
    let report = grad_magnitude_report(&grads);
    assert_eq!(report.keys().cloned().collect::<Vec<_>>(), vec!["layer01.weight", "layer03.weight"]);
    assert!(report.values().all(|&n| n > 0.0), "{report:?}");
}

#[test]
fn zero_steps_reproduces_snip_scores() {
    let data = synthetic(4, 10, 6, 1);
    let net = small_mlp(6, 7, 4);
    let state = kaiming(&net, 6);
    let spec = MaskSpec::for_model(&state, Granularity::PerWeight);
    let batch = fixed_batches(&data, 12, 1, 4);
    let prospr = prospr_scores(&net, &state, &spec, &batch, 0.1).unwrap();
    let snip = snip_scores(&net, &state, &spec, &batch[0]).unwrap();
    assert_eq!(prospr.steps, 0);
    for (a, b) in prospr.scores.iter().zip(&snip.scores) {
        assert!(relative_error(*a, *b, 1e-300) <= 1e-10);
    }
}

#[test]
fn scores_are_bit_reproducible() {
    let data = synthetic(3, 10, 4, 3);
    let net = small_mlp(4, 6, 3);
    let state = kaiming(&net, 5);
    let spec = MaskSpec::for_model(&state, Granularity::PerWeight);
    let batches = fixed_batches(&data, 9, 4, 2);
    let a = prospr_scores(&net, &state, &spec, &batches, 0.1).unwrap();
    let b = prospr_scores(&net, &state, &spec, &batches, 0.1).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.raw), bits(&b.raw));
    assert_eq!(a.batches_consumed, 4);
    assert_eq!(a.steps, 3);
}
