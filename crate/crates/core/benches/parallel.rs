use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gia_core::attack::opt::{op_gia_attack, OpGiaConfig};
use gia_core::attack::Schedule;
use gia_core::exec::Exec;
use gia_core::fl::{client_gradient, synth_dataset};
use gia_core::model::{build_model, zoo, ActivationKind, Init};

const MODES: [(&str, Exec); 2] = [("parallel", Exec::Parallel), ("sequential", Exec::Sequential)];

fn per_sample_gradients(c: &mut Criterion) {
    let spec = zoo::cnn_s([3, 8, 8], 10, ActivationKind::Relu);
    let params = build_model(&spec, Init::KaimingUniform, 0).unwrap();
    let data = synth_dataset(64, 3, 8, 8, 10, 0).unwrap();
    let mut g = c.benchmark_group("per_sample_gradients");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new(name, 64), |b| {
            b.iter(|| {
                exec.map_range(64, |i| {
                    let (x, y) = data.select(&[i]).unwrap();
                    client_gradient(&spec, &params, &data.norm.normalize(&x), &y).unwrap().tensors.norm()
                })
            })
        });
    }
    g.finish();
}

fn attack_cases(c: &mut Criterion) {
    let spec = zoo::mlp2([1, 8, 8], 32, 10, ActivationKind::Relu);
    let params = build_model(&spec, Init::KaimingUniform, 0).unwrap();
    let data = synth_dataset(16, 1, 8, 8, 10, 0).unwrap();
    let mut g = c.benchmark_group("attack_cases");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new(name, 8), |b| {
            b.iter(|| {
                exec.map_range(8, |i| {
                    let (x, y) = data.select(&[i]).unwrap();
                    let u = client_gradient(&spec, &params, &data.norm.normalize(&x), &y).unwrap();
                    let cfg = OpGiaConfig { schedule: Schedule::new(50, 0.1), seed: i as u64, ..OpGiaConfig::default() };
                    op_gia_attack(&u, &spec, &params, &cfg, Some(&y), &data.norm).unwrap().objective
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, per_sample_gradients, attack_cases);
criterion_main!(benches);
