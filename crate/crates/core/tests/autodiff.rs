use gia_core::autodiff::check::{check_all_primitives, check_zoo_model};
use gia_core::autodiff::Graph;
use gia_core::autodiff::kernels;
use gia_core::model::{build_model, loss_and_grads, per_sample_grads, zoo, ActivationKind, Init};
use gia_core::rng;
use gia_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

const TOL: f64 = 1e-4;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn every_primitive_matches_central_differences() {
    let reports = check_all_primitives(3, 7, 1e-5).unwrap();
    assert!(reports.len() >= 20, "only {} primitives checked", reports.len());
    for (name, rep) in reports {
        assert!(rep.coordinates > 0, "{name}: nothing probed");
        assert!(rep.max_rel_error < TOL, "{name}: {}", rep.max_rel_error);
    }
}

#[test]
fn every_zoo_model_matches_central_differences() {
    for arch in zoo::Arch::ALL {
        for act in ActivationKind::ALL {
            let rep = check_zoo_model(arch, act, 2, 3, 1e-5, 10).unwrap();
            assert!(rep.max_rel_error < TOL, "{} {}: {}", arch.name(), act.name(), rep.max_rel_error);
        }
    }
}

/// Literal sum over pixels with a right and a lower neighbour.
fn tv_oracle(x: &Tensor) -> f64 {
    let s = x.shape();
    let at = |b: usize, c: usize, i: usize, j: usize| x.data()[((b * s[1] + c) * s[2] + i) * s[3] + j];
    let mut total = 0.0;
    for b in 0..s[0] {
        for c in 0..s[1] {
            for i in 0..s[2] - 1 {
                for j in 0..s[3] - 1 {
                    let dh = at(b, c, i, j + 1) - at(b, c, i, j);
                    let dv = at(b, c, i + 1, j) - at(b, c, i, j);
                    total += (dh * dh + dv * dv + kernels::TV_EPS).sqrt();
                }
            }
        }
    }
    total
}

#[test]
fn total_variation_matches_brute_force() {
    let x = random(&[2, 3, 5, 4], 1);
    assert!((kernels::total_variation(&x) - tv_oracle(&x)).abs() < 1e-12);
    let mut g = Graph::new();
    let n = g.variable(x.clone());
    let tv = g.total_variation(n).unwrap();
    assert!((g.value(tv).item() - tv_oracle(&x)).abs() < 1e-12);
    let grads = g.backward(tv).unwrap().get(n);
    let h = 1e-6;
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        let fd = (tv_oracle(&p) - tv_oracle(&m)) / (2.0 * h);
        assert!((fd - grads.data()[i]).abs() < 1e-6, "coordinate {i}: {fd} vs {}", grads.data()[i]);
    }
}

#[test]
fn constant_image_has_only_epsilon_variation() {
    let x = Tensor::full(&[2, 1, 4, 4], 0.3);
    assert!((kernels::total_variation(&x) - 18.0 * kernels::TV_EPS.sqrt()).abs() < 1e-15);
}

#[test]
fn vertical_edge_costs_one() {
    let x = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    assert!((kernels::total_variation(&x) - (1.0 + kernels::TV_EPS).sqrt()).abs() < 1e-15);
}

#[test]
fn cross_entropy_gradient_matches_softmax_minus_onehot() {
    let z = random(&[3, 4], 5);
    let labels = [0, 3, 1];
    let mut g = Graph::new();
    let n = g.variable(z.clone());
    let loss = g.softmax_cross_entropy(n, &labels).unwrap();
    let grad = g.backward(loss).unwrap().get(n);
    for (r, &y) in labels.iter().enumerate() {
        let row = &z.data()[r * 4..r * 4 + 4];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        for c in 0..4 {
            let want = (e[c] / s - f64::from(u8::from(c == y))) / 3.0;
            assert!((grad.data()[r * 4 + c] - want).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_sum_gradient_is_column_sums(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
        let a = random(&[m, k], seed);
        let b = random(&[k, n], seed + 1);
        let mut g = Graph::new();
        let an = g.variable(a);
        let bn = g.constant(b.clone());
        let p = g.matmul(an, bn).unwrap();
        let s = g.sum(p).unwrap();
        let ga = g.backward(s).unwrap().get(an);
        for i in 0..m {
            for j in 0..k {
                let want: f64 = b.data()[j * n..(j + 1) * n].iter().sum();
                prop_assert!((ga.data()[i * k + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_per_sample_gradients(seed in 0u64..500, b in 2usize..5) {
        let spec = zoo::mlp2([1, 3, 3], 5, 4, ActivationKind::Tanh);
        let params = build_model(&spec, Init::KaimingUniform, seed).unwrap();
        let x = random(&[b, 1, 3, 3], seed + 9);
        let labels: Vec<usize> = (0..b).map(|i| (i + seed as usize) % 4).collect();
        let (_, full) = loss_and_grads(&spec, &params, &x, &labels).unwrap();
        let each = per_sample_grads(&spec, &params, &x, &labels).unwrap();
        let mut mean = each[0].scale(0.0);
        for e in &each {
            mean = mean.zip_map(e, |a, v| a + v / b as f64).unwrap();
        }
        prop_assert!(full.max_abs_diff(&mean) < 1e-12);
    }

    #[test]
    fn gradients_are_deterministic(seed in 0u64..500) {
        let spec = zoo::cnn_s([2, 4, 4], 3, ActivationKind::Relu);
        let params = build_model(&spec, Init::KaimingUniform, seed).unwrap();
        let x = random(&[2, 2, 4, 4], seed);
        let a = loss_and_grads(&spec, &params, &x, &[0, 1]).unwrap();
        let b = loss_and_grads(&spec, &params, &x, &[0, 1]).unwrap();
        prop_assert_eq!(a.0.to_bits(), b.0.to_bits());
        prop_assert_eq!(a.1.flatten(), b.1.flatten());
    }

    #[test]
    fn mismatched_matmul_is_a_shape_error(m in 1usize..4, k in 1usize..4, j in 1usize..4) {
        prop_assume!(k != j);
        let mut g = Graph::new();
        let a = g.variable(Tensor::zeros(&[m, k]));
        let b = g.variable(Tensor::zeros(&[j, 2]));
        prop_assert!(matches!(g.matmul(a, b), Err(gia_core::Error::Shape(_))));
    }
}
