use ndarray::{Array2, ArrayView2};
use proptest::prelude::*;
use rand::Rng;
use tandemflow::descriptors::DescriptorDims;
use tandemflow::nn::{gradients, loss_depart, loss_pmf, Head, Loss, MlpModel};
use tandemflow::rng::stream;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream(seed, 77);
    Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>() * 2.0 - 1.0)
}

fn random_pmfs(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut m = random_matrix(rows, cols, seed).mapv(|x| x.abs() + 0.01);
    for mut r in m.rows_mut() {
        let s = r.sum();
        r /= s;
    }
    m
}

fn loss_at(model: &MlpModel, x: ArrayView2<f64>, y: ArrayView2<f64>, loss: &Loss) -> f64 {
    loss.value(model.forward_batch(x).unwrap().view(), y)
}

/// Largest relative discrepancy between backprop and central differences.
fn max_rel_error(model: &MlpModel, x: ArrayView2<f64>, y: ArrayView2<f64>, loss: &Loss) -> f64 {
    let h = 1e-5;
    let (_, g) = gradients(model, x, y, loss).unwrap();
    let mut worst: f64 = 0.0;
    let mut m = model.clone();
    let mut check = |analytic: f64, fd: f64| {
        let denom = analytic.abs().max(fd.abs()).max(1e-6);
        worst = worst.max((analytic - fd).abs() / denom);
    };
    for l in 0..model.weights.len() {
        for idx in 0..model.weights[l].len() {
            let (r, c) = (idx / model.weights[l].ncols(), idx % model.weights[l].ncols());
            let orig = m.weights[l][[r, c]];
            m.weights[l][[r, c]] = orig + h;
            let up = loss_at(&m, x, y, loss);
            m.weights[l][[r, c]] = orig - h;
            let down = loss_at(&m, x, y, loss);
            m.weights[l][[r, c]] = orig;
            check(g.weights[l][[r, c]], (up - down) / (2.0 * h));
        }
        for i in 0..model.biases[l].len() {
            let orig = m.biases[l][i];
            m.biases[l][i] = orig + h;
            let up = loss_at(&m, x, y, loss);
            m.biases[l][i] = orig - h;
            let down = loss_at(&m, x, y, loss);
            m.biases[l][i] = orig;
            check(g.biases[l][i], (up - down) / (2.0 * h));
        }
    }
    worst
}

fn toy_model(hidden_layers: usize, d_in: usize, d_out: usize, head: Head, seed: u64) -> MlpModel {
    let mut dims = vec![d_in];
    dims.extend(std::iter::repeat(6).take(hidden_layers));
    dims.push(d_out);
    let mut m = MlpModel::init(&dims, head, &mut stream(seed, 0)).unwrap();
    for b in &mut m.biases {
        b.mapv_inplace(|_| 0.05);
    }
    m
}

#[test]
fn gradient_check_both_heads_all_depths() {
    for layers in 1..=10 {
        let x = random_matrix(5, 4, layers as u64);
        let m = toy_model(layers, 4, 5, Head::Identity, layers as u64);
        let y = random_matrix(5, 5, 100 + layers as u64);
        let loss = Loss::Depart { n_moments: 2, alpha: 0.3, sum: false };
        let e = max_rel_error(&m, x.view(), y.view(), &loss);
        assert!(e < 1e-4, "depart, {layers} layers: {e}");

        let m = toy_model(layers, 4, 6, Head::Softmax, 50 + layers as u64);
        let y = random_pmfs(5, 6, 200 + layers as u64);
        let e = max_rel_error(&m, x.view(), y.view(), &Loss::Pmf);
        assert!(e < 1e-4, "pmf, {layers} layers: {e}");
    }
}

#[test]
fn gradient_check_sum_mode() {
    let x = random_matrix(4, 3, 1);
    let m = toy_model(3, 3, 7, Head::Identity, 9);
    let y = random_matrix(4, 7, 2);
    let e = max_rel_error(&m, x.view(), y.view(), &Loss::Depart { n_moments: 3, alpha: 0.7, sum: true });
    assert!(e < 1e-4, "{e}");
}

proptest! {
    #[test]
    fn softmax_outputs_are_distributions(seed in 0u64..1000, scale in 0.0f64..50.0, layers in 1usize..5) {
        let mut m = toy_model(layers, 3, 9, Head::Softmax, seed);
        for w in &mut m.weights { w.mapv_inplace(|v| v * scale); }
        let x = random_matrix(3, 3, seed + 1) * scale;
        let y = m.forward_batch(x.view()).unwrap();
        for r in y.rows() {
            prop_assert!(r.iter().all(|&p| p >= 0.0));
            prop_assert!((r.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn losses_vanish_on_identity(seed in 0u64..1000, rows in 1usize..6) {
        let dims = DescriptorDims::new(3, 1, 2).unwrap();
        let a = random_matrix(rows, dims.len(), seed);
        prop_assert_eq!(loss_depart(a.view(), a.view(), 0.5, dims), 0.0);
        let p = random_pmfs(rows, 10, seed);
        prop_assert_eq!(loss_pmf(p.view(), p.view()), 0.0);
        let q = random_pmfs(rows, 10, seed + 1);
        prop_assert!(loss_pmf(p.view(), q.view()) >= 0.0);
        let b = random_matrix(rows, dims.len(), seed + 1);
        prop_assert!(loss_depart(a.view(), b.view(), 0.5, dims) >= 0.0);
    }

    #[test]
    fn forward_depends_only_on_input(seed in 0u64..1000) {
        let m = toy_model(2, 4, 3, Head::Identity, seed);
        let x = random_matrix(1, 4, seed) * 0.0;
        let z = Array2::<f64>::zeros((1, 4));
        prop_assert_eq!(m.forward_batch(x.view()).unwrap(), m.forward_batch(z.view()).unwrap());
    }
}

#[test]
fn pmf_loss_is_permutation_symmetric() {
    let p = ndarray::array![[0.1, 0.5, 0.4]];
    let q = ndarray::array![[0.2, 0.4, 0.4]];
    let ps = ndarray::array![[0.5, 0.1, 0.4]];
    let qs = ndarray::array![[0.4, 0.2, 0.4]];
    assert!((loss_pmf(p.view(), q.view()) - loss_pmf(ps.view(), qs.view())).abs() < 1e-15);
}
