#![allow(dead_code)]

use prospr_core::data::{make_synthetic, Batch, Dataset, Sampler, SamplerConfig, SamplerMode};
use prospr_core::nn::{init_params, InitScheme, ModelState, Network};
use prospr_core::oracle::relative_error;
use prospr_core::{Graph, RetainPolicy, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Like [`random_tensor`] but bounded away from zero, for ReLU inputs.
pub fn off_kink_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    random_tensor(rng, shape).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

/// Scalar `Σ y ⊙ weights`, reducing any op output to a loss.
pub fn weighted_sum(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    g.sum_to(p, &[])
}

/// Central differences of a scalar function of several tensors, with
/// `h = base · max(1, |x|)`.
pub fn numeric_gradient(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], base: f64) -> Vec<Tensor> {
    inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut grad = t.clone();
            for j in 0..t.len() {
                let x = t.data()[j];
                let h = base * x.abs().max(1.0);
                let mut probe = inputs.to_vec();
                probe[i].data_mut()[j] = x + h;
                let plus = f(&probe);
                probe[i].data_mut()[j] = x - h;
                let minus = f(&probe);
                grad.data_mut()[j] = (plus - minus) / (2.0 * h);
            }
            grad
        })
        .collect()
}

/// Largest entrywise relative error, with `floor` as the smallest denominator.
pub fn max_rel_err(a: &[Tensor], b: &[Tensor], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.shape(), y.shape());
            x.data().iter().zip(y.data()).map(|(&p, &q)| relative_error(p, q, floor)).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// First- and second-order gradient checks of `op` at `inputs`.
///
/// First order: backward of `Σ op(x) ⊙ r` against central differences.
/// Second order: backward of `Σ_i ∇_i ⊙ r_i`, where `∇_i` comes from the
/// differentiable gradient, against central differences of that scalar.
pub fn check_op(
    op: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = {
        let mut g = Graph::new(RetainPolicy::Keep);
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let y = op(&mut g, &vars).unwrap();
        g.value(y).unwrap().shape().to_vec()
    };
    let r = random_tensor(&mut rng, &probe);
    let r2: Vec<Tensor> = inputs.iter().map(|t| random_tensor(&mut rng, t.shape())).collect();

    let first = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new(RetainPolicy::Keep);
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let y = op(&mut g, &vars).unwrap();
        let l = weighted_sum(&mut g, y, &r).unwrap();
        g.value(l).unwrap().item()
    };
    let second = |xs: &[Tensor]| -> (f64, Vec<Tensor>) {
        let mut g = Graph::new(RetainPolicy::Keep);
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let y = op(&mut g, &vars).unwrap();
        let l = weighted_sum(&mut g, y, &r).unwrap();
        let grads = g.grad(l, &vars).unwrap();
        let mut total = None;
        for (d, w) in grads.into_iter().zip(&r2) {
            let s = weighted_sum(&mut g, d, w).unwrap();
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s).unwrap(),
            });
        }
        let total = total.unwrap();
        let value = g.value(total).unwrap().item();
        let hess = g.backward(total, &vars).unwrap().into_tensors();
        (value, hess)
    };

    let analytic = {
        let mut g = Graph::new(RetainPolicy::Keep);
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let y = op(&mut g, &vars).unwrap();
        let l = weighted_sum(&mut g, y, &r).unwrap();
        g.backward(l, &vars).unwrap().into_tensors()
    };
    let numeric = numeric_gradient(&first, inputs, 1e-5);
    let e1 = max_rel_err(&analytic, &numeric, 1e-6);

    let (_, hess) = second(inputs);
    let numeric2 = numeric_gradient(&|xs| second(xs).0, inputs, 1e-5);
    let e2 = max_rel_err(&hess, &numeric2, 1e-6);
    (e1, e2)
}

pub fn small_mlp(inputs: usize, hidden: usize, classes: usize) -> Network {
    Network::mlp("tiny", &[inputs], &[hidden, classes])
}

pub fn synthetic(classes: usize, per_class: usize, dim: usize, seed: u64) -> Dataset {
    make_synthetic(classes, per_class, dim, 3.0, seed).unwrap()
}

pub fn kaiming(net: &Network, seed: u64) -> ModelState {
    init_params(net, seed, &InitScheme::KaimingUniform).unwrap()
}

pub fn fixed_batches(data: &Dataset, batch_size: usize, count: usize, seed: u64) -> Vec<Batch> {
    let mut s = Sampler::new(data, SamplerConfig { batch_size, mode: SamplerMode::FixedSingleBatch, seed }).unwrap();
    s.take(count)
}

pub fn shuffled_batches(data: &Dataset, batch_size: usize, count: usize, seed: u64) -> Vec<Batch> {
    let mut s = Sampler::new(data, SamplerConfig { batch_size, mode: SamplerMode::Shuffled, seed }).unwrap();
    s.take(count)
}

pub fn flat(t: Vec<Tensor>) -> Vec<f64> {
    t.into_iter().flat_map(Tensor::into_data).collect()
}
