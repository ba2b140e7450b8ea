use gia_core::fl::{
    client_gradient, epoch_batches, fedavg_round, fedsgd_round, parse_cifar10, sample_batch, synth_dataset, ClientConfig,
    UpdateKind, CIFAR_RECORD,
};
use gia_core::model::{build_model, loss_and_grads, zoo, ActivationKind, Init};
use proptest::prelude::*;

#[test]
fn single_step_fedavg_is_a_scaled_gradient() {
    let data = synth_dataset(6, 1, 4, 4, 3, 2).unwrap();
    let spec = zoo::mlp2([1, 4, 4], 8, 3, ActivationKind::Relu);
    let params = build_model(&spec, Init::KaimingUniform, 2).unwrap();
    let cfg = ClientConfig { batch_size: 6, epochs: 1, lr: 0.1, seed: 4 };
    let (u, trace) = fedavg_round(&spec, &params, &data, &cfg).unwrap();
    assert_eq!(u.kind, UpdateKind::FedAvgDelta);
    assert_eq!(trace.steps.len(), 1);
    // one full-batch step: the sample order does not change the mean gradient
    let (_, g) = loss_and_grads(&spec, &params, &data.norm.normalize(&data.images), &data.labels).unwrap();
    assert!(u.tensors.max_abs_diff(&g.scale(-0.1)) < 1e-12);
}

#[test]
fn two_steps_replay_by_hand() {
    let data = synth_dataset(4, 1, 4, 4, 2, 3).unwrap();
    let spec = zoo::mlp2([1, 4, 4], 6, 2, ActivationKind::Tanh);
    let p0 = build_model(&spec, Init::KaimingUniform, 3).unwrap();
    let cfg = ClientConfig { batch_size: 2, epochs: 1, lr: 0.2, seed: 9 };
    let (u, trace) = fedavg_round(&spec, &p0, &data, &cfg).unwrap();
    let x = data.norm.normalize(&data.images);
    let mut p = p0.clone();
    for idx in &trace.steps {
        let (_, g) = loss_and_grads(&spec, &p, &x.select_rows(idx).unwrap(), &idx.iter().map(|&i| data.labels[i]).collect::<Vec<_>>()).unwrap();
        p = p.zip_map(&g, |a, b| a - 0.2 * b).unwrap();
    }
    assert!(u.tensors.max_abs_diff(&p.zip_map(&p0, |a, b| a - b).unwrap()) < 1e-14);
}

#[test]
fn fedsgd_round_reports_the_sampled_batch() {
    let data = synth_dataset(20, 3, 8, 8, 10, 5).unwrap();
    let spec = zoo::cnn_s([3, 8, 8], 10, ActivationKind::Relu);
    let params = build_model(&spec, Init::KaimingUniform, 5).unwrap();
    let (u, truth) = fedsgd_round(&spec, &params, &data, 4, 5).unwrap();
    assert_eq!(u.batch_size, 4);
    let direct = client_gradient(&spec, &params, &truth.x, &truth.labels).unwrap();
    assert_eq!(u.tensors.flatten(), direct.tensors.flatten());
    let (again, _) = fedsgd_round(&spec, &params, &data, 4, 5).unwrap();
    assert_eq!(u.tensors.flatten(), again.tensors.flatten());
}

#[test]
fn invalid_client_settings_are_rejected() {
    let data = synth_dataset(4, 1, 4, 4, 2, 0).unwrap();
    let spec = zoo::mlp2([1, 4, 4], 4, 2, ActivationKind::Relu);
    let params = build_model(&spec, Init::KaimingUniform, 0).unwrap();
    for cfg in [
        ClientConfig { batch_size: 0, epochs: 1, lr: 0.1, seed: 0 },
        ClientConfig { batch_size: 1, epochs: 0, lr: 0.1, seed: 0 },
        ClientConfig { batch_size: 5, epochs: 1, lr: 0.1, seed: 0 },
        ClientConfig { batch_size: 1, epochs: 1, lr: f64::NAN, seed: 0 },
    ] {
        assert!(fedavg_round(&spec, &params, &data, &cfg).is_err(), "{cfg:?}");
    }
}

fn cifar_bytes(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        out.push(l);
        out.extend((0..3072).map(|p| ((p + i) % 256) as u8));
    }
    out
}

#[test]
fn cifar_records_decode_channel_major() {
    let bytes = cifar_bytes(&[3, 9, 0]);
    let d = parse_cifar10(&bytes, None).unwrap();
    assert_eq!(d.labels, vec![3, 9, 0]);
    assert_eq!(d.images.shape(), &[3, 3, 32, 32]);
    // record 1, channel 1 (green), row 0, column 5 is byte 1 + 1024 + 5 of the record
    let v = d.images.data()[3072 + 1024 + 5];
    assert!((v - ((1024 + 5 + 1) % 256) as f64 / 255.0).abs() < 1e-15);
    let sub = parse_cifar10(&bytes, Some(&[2])).unwrap();
    assert_eq!(sub.labels, vec![0]);
}

#[test]
fn malformed_cifar_is_rejected() {
    let mut bytes = cifar_bytes(&[1]);
    assert!(parse_cifar10(&bytes[..CIFAR_RECORD - 1], None).is_err());
    assert!(parse_cifar10(&bytes, Some(&[1])).is_err());
    bytes[0] = 10;
    assert!(parse_cifar10(&bytes, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampled_batches_are_distinct_and_in_range(n in 1usize..200, frac in 0.0f64..1.0, seed: u64, round in 0u64..10) {
        let b = 1 + ((n - 1) as f64 * frac) as usize;
        let idx = sample_batch(n, b, seed, round).unwrap();
        prop_assert_eq!(idx.len(), b);
        let mut s = idx.clone();
        s.sort_unstable();
        s.dedup();
        prop_assert_eq!(s.len(), b);
        prop_assert!(idx.iter().all(|&i| i < n));
        prop_assert_eq!(idx, sample_batch(n, b, seed, round).unwrap());
        prop_assert!(sample_batch(n, n + 1, seed, round).is_err());
    }

    #[test]
    fn epochs_visit_every_sample_once(n in 1usize..60, b in 1usize..16, e in 1usize..4, seed: u64) {
        let cfg = ClientConfig { batch_size: b, epochs: e, lr: 0.1, seed };
        let steps = epoch_batches(n, &cfg);
        prop_assert_eq!(steps.len(), cfg.steps(n));
        prop_assert_eq!(steps.len(), e * n.div_ceil(b));
        let per_epoch = n.div_ceil(b);
        for chunk in steps.chunks(per_epoch) {
            let mut seen: Vec<usize> = chunk.concat();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn synthetic_data_is_seeded_and_in_unit_range(seed in 0u64..1000, n in 1usize..12) {
        let a = synth_dataset(n, 2, 6, 6, 5, seed).unwrap();
        let b = synth_dataset(n, 2, 6, 6, 5, seed).unwrap();
        prop_assert_eq!(a.images.data(), b.images.data());
        prop_assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let back = a.norm.denormalize(&a.norm.normalize(&a.images));
        prop_assert!(back.max_abs_diff(&a.images) < 1e-12);
    }
}
