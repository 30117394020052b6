mod common;

use std::path::Path;

use common::{flat, kaiming, shuffled_batches, small_mlp, synthetic};
use prospr_core::autodiff::{Graph, RetainPolicy, Var};
use prospr_core::data::{load_mnist, make_synthetic, Dataset, SamplerMode, Split};
use prospr_core::nn::{init_params, InitScheme, ModelState, Network, Objective};
use prospr_core::pipeline::{prune, PruneConfig};
use prospr_core::pruning::{
    first_order_meta_gradient, magnitude_scores, normalize, prospr_scores, snip_scores, top_k_mask, Granularity,
    Mask, MaskSpec,
};
use prospr_core::trainer::{evaluate, train_pruned, TrainConfig};
use prospr_core::Tensor;
use proptest::prelude::*;

fn all_ones(state: &ModelState) -> Mask {
    Mask::all_ones(MaskSpec::for_model(state, Granularity::PerWeight))
}

fn quick(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { epochs, batch_size: 32, lr_drop_epochs: vec![], seed, ..TrainConfig::default() }
}

proptest! {
    #[test]
    fn normalized_scores_sum_to_one(raw in proptest::collection::vec(-1e3f64..1e3, 1..200)) {
        prop_assume!(raw.iter().any(|g| *g != 0.0));
        let (s, total) = normalize(&raw).unwrap();
        prop_assert!(s.iter().all(|&v| v >= 0.0));
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!((total - raw.iter().map(|g| g.abs()).sum::<f64>()).abs() <= 1e-12 * total);
    }

    #[test]
    fn selection_is_scale_invariant(
        raw in proptest::collection::vec(1e-6f64..1.0, 28),
        scale in 1e-3f64..1e3,
        density in 0.05f64..1.0,
    ) {
        let net = small_mlp(3, 4, 4);
        let spec = MaskSpec::for_model(&kaiming(&net, 0), Granularity::PerWeight);
        let scaled: Vec<f64> = raw.iter().map(|g| g * scale).collect();
        let a = top_k_mask(&normalize(&raw).unwrap().0, &spec, density).unwrap();
        let b = top_k_mask(&normalize(&scaled).unwrap().0, &spec, density).unwrap();
        prop_assert_eq!(a.bits(), b.bits());
    }
}

#[test]
fn mnist_scores_are_normalized() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k");
    let train = load_mnist(&dir, Split::Train).unwrap();
    let net = Network::mnist_mlp();
    let state = init_params(&net, 11, &InitScheme::KaimingUniform).unwrap();
    let spec = MaskSpec::for_model(&state, Granularity::PerWeight);
    let report = prospr_scores(&net, &state, &spec, &shuffled_batches(&train, 128, 4, 11), 0.1).unwrap();
    assert!(!report.magnitude_fallback);
    assert!((report.scores.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
}

#[test]
fn magnitude_keeps_the_two_largest() {
    let net = Network::mlp("m", &[3], &[1]);
    let mut state = kaiming(&net, 0);
    state.params[0].value = Tensor::new(vec![1, 3], vec![3.0, -4.0, 1.0]).unwrap();
    let spec = MaskSpec::for_model(&state, Granularity::PerWeight);
    let mask = top_k_mask(&magnitude_scores(&state, &spec).unwrap().scores, &spec, 2.0 / 3.0).unwrap();
    assert_eq!(mask.bits(), [true, true, false]);
}

/// Plain SGD on `batches[..M]`, then the gradient at `w_M` on the last batch.
fn final_gradient(net: &Network, state: &ModelState, batches: &[prospr_core::data::Batch], lr: f64) -> Vec<Tensor> {
    let mut values = state.tensors();
    for (i, batch) in batches.iter().enumerate() {
        let mut g = Graph::new(RetainPolicy::Release);
        let params: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = net.loss(&mut g, &params, batch).unwrap();
        let grads = g.backward(loss, &params).unwrap().into_tensors();
        if i + 1 == batches.len() {
            return grads;
        }
        values = values.iter().zip(&grads).map(|(w, d)| w.zip_map(d, |w, d| w - lr * d)).collect();
    }
    unreachable!()
}

#[test]
fn first_order_sign_follows_final_gradient_times_init() {
    let data = synthetic(3, 20, 5, 2);
    let net = small_mlp(5, 8, 3);
    let state = kaiming(&net, 2);
    let spec = MaskSpec::for_model(&state, Granularity::PerWeight);
    let batches = shuffled_batches(&data, 16, 3, 2);
    let fo = first_order_meta_gradient(&net, &state, &spec, &batches, 0.2).unwrap().into_tensors();
    let grads = final_gradient(&net, &state, &batches, 0.2);
    for (grp, g) in spec.groups.iter().zip(&fo) {
        let d = &grads[grp.param_index];
        let w = &state.params[grp.param_index].value;
        for ((&gj, &dj), &wj) in g.data().iter().zip(d.data()).zip(w.data()) {
            assert_eq!(gj.signum(), (dj * wj).signum());
            assert!((gj - dj * wj).abs() <= 1e-12 * gj.abs().max(1e-300));
        }
    }
}

#[test]
fn first_order_with_frozen_weights_is_snip() {
    let data = synthetic(3, 20, 5, 4);
    let net = small_mlp(5, 8, 3);
    let state = kaiming(&net, 4);
    let spec = MaskSpec::for_model(&state, Granularity::PerWeight);
    let batches = shuffled_batches(&data, 16, 2, 4);
    let fo = flat(first_order_meta_gradient(&net, &state, &spec, &batches, 0.0).unwrap().into_tensors());
    let snip = snip_scores(&net, &state, &spec, &batches[1]).unwrap();
    for (a, b) in fo.iter().zip(&snip.raw) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-12), "{a} vs {b}");
    }
}

#[test]
fn snip_is_permutation_equivariant() {
    let data = synthetic(3, 10, 4, 6);
    let net = small_mlp(4, 5, 3);
    let state = kaiming(&net, 6);
    let spec = MaskSpec::for_model(&state, Granularity::PerWeight);
    let batch = shuffled_batches(&data, 30, 1, 6).remove(0);
    let perm = [3usize, 0, 4, 1, 2];

    // permute hidden units: rows of W0 and b0, columns of W1
    let mut permuted = state.clone();
    let (w0, b0, w1) = (&state.params[0].value, &state.params[1].value, &state.params[2].value);
    let row = |t: &Tensor, r: usize, len: usize| t.data()[r * len..(r + 1) * len].to_vec();
    permuted.params[0].value = Tensor::new(vec![5, 4], perm.iter().flat_map(|&p| row(w0, p, 4)).collect()).unwrap();
    permuted.params[1].value = Tensor::new(vec![5], perm.iter().map(|&p| b0.data()[p]).collect()).unwrap();
    permuted.params[2].value =
        Tensor::new(vec![3, 5], (0..3).flat_map(|o| perm.iter().map(move |&p| (o, p))).map(|(o, p)| w1.data()[o * 5 + p]).collect())
            .unwrap();

    let a = snip_scores(&net, &state, &spec, &batch).unwrap().scores;
    let b = snip_scores(&net, &permuted, &spec, &batch).unwrap().scores;
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * x.abs().max(1e-12);
    for (i, &p) in perm.iter().enumerate() {
        for j in 0..4 {
            assert!(close(b[i * 4 + j], a[p * 4 + j]));
        }
        for o in 0..3 {
            assert!(close(b[20 + o * 5 + i], a[20 + o * 5 + p]));
        }
    }
}

/// Train and test halves drawn from one cluster layout.
fn split_synthetic(classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> (Dataset, Dataset) {
    let all = make_synthetic(classes, 2 * per_class, dim, separation, seed).unwrap();
    let half = all.len() / 2;
    let part = |lo: usize, hi: usize, split| {
        let inputs = Tensor::new(vec![hi - lo, dim], all.inputs().data()[lo * dim..hi * dim].to_vec()).unwrap();
        Dataset::new(inputs, all.labels()[lo..hi].to_vec(), classes, split).unwrap()
    };
    (part(0, half, Split::Train), part(half, all.len(), Split::Test))
}

#[test]
fn indistinguishable_categories_train_to_chance() {
    let (train, test) = split_synthetic(4, 200, 3, 0.0, 1);
    let net = small_mlp(3, 16, 4);
    let state = kaiming(&net, 1);
    let (_, metrics) = train_pruned(&net, &state, &all_ones(&state), &train, &test, &quick(5, 1)).unwrap();
    assert!((metrics.final_accuracy - 0.25).abs() <= 0.1, "{}", metrics.final_accuracy);
}

#[test]
fn well_separated_clusters_are_linearly_solvable() {
    let (train, test) = split_synthetic(4, 100, 2, 10.0, 2);
    let net = Network::mlp("linear", &[2], &[4]);
    let state = kaiming(&net, 2);
    let (_, metrics) = train_pruned(&net, &state, &all_ones(&state), &train, &test, &quick(5, 2)).unwrap();
    assert!(metrics.final_accuracy >= 0.95, "{}", metrics.final_accuracy);
}

#[test]
fn dense_mask_one_epoch_on_easy_data() {
    let (train, test) = split_synthetic(3, 100, 4, 10.0, 3);
    let net = small_mlp(4, 16, 3);
    let state = kaiming(&net, 3);
    let (_, metrics) = train_pruned(&net, &state, &all_ones(&state), &train, &test, &quick(1, 3)).unwrap();
    assert!(metrics.final_accuracy >= 0.9, "{}", metrics.final_accuracy);
    assert_eq!(metrics.epochs.len(), 1);
}

#[test]
fn evaluation_examples() {
    // logits equal to the inputs: one-hot rows are classified perfectly
    let net = Network::mlp("id", &[3], &[3]);
    let mut state = kaiming(&net, 0);
    state.params[0].value = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let eye = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let toy = Dataset::new(eye, vec![0, 1, 2], 3, Split::Test).unwrap();
    assert_eq!(evaluate(&net, &state, &toy).unwrap(), 1.0);

    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k");
    let test = load_mnist(&dir, Split::Test).unwrap();
    let net = Network::mnist_mlp();
    let accs: Vec<f64> = (0..5)
        .map(|s| evaluate(&net, &init_params(&net, s, &InitScheme::KaimingUniform).unwrap(), &test).unwrap())
        .collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.1).abs() <= 0.05, "{accs:?}");

    let empty = Dataset::new(Tensor::zeros(&[1, 3]), vec![], 3, Split::Test);
    assert!(empty.is_err());
}

#[test]
fn full_pipeline_is_bit_deterministic() {
    let (train, test) = split_synthetic(3, 60, 5, 3.0, 9);
    let net = small_mlp(5, 12, 3);
    let run = || {
        let state = kaiming(&net, 9);
        let cfg = PruneConfig { density: 0.3, meta_batch_size: 24, sampler: SamplerMode::ClassBalanced, seed: 9, ..PruneConfig::default() };
        let mask = prune(&net, &state, &train, &cfg).unwrap().mask;
        let (trained, metrics) = train_pruned(&net, &state, &mask, &train, &test, &quick(3, 9)).unwrap();
        (trained.tensors(), metrics.final_accuracy.to_bits())
    };
    assert_eq!(run(), run());
}
