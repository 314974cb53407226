use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lcap_core::aggregation::{AggregatorConfig, Strategy};
use lcap_core::data::{Batch, Task, TaskShape};
use lcap_core::exec::{self, Mode};
use lcap_core::model::{ModelConfig, Seq2Seq};
use lcap_core::tensor::matmul_kernel;
use lcap_core::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(Mode, &str); 2] = [(Mode::Sequential, "sequential"), (Mode::Parallel, "parallel")];

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 256] {
        let a: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for (mode, name) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |bench, _| {
                exec::set_mode(mode);
                bench.iter(|| black_box(matmul_kernel(&a, &b, n, n, n)));
            });
        }
    }
    group.finish();
    exec::set_mode(Mode::Parallel);
}

fn training_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_backward");
    group.sample_size(20);
    let shape = TaskShape {
        vocab: 16,
        min_len: 3,
        max_len: 8,
    };
    let batch = Batch::sample(Task::SwapTranslate, &shape, 16, &mut ChaCha8Rng::seed_from_u64(1));
    for strategy in [Strategy::None, Strategy::DynamicRouting, Strategy::EmRouting] {
        let cfg = ModelConfig {
            aggregator: AggregatorConfig::with_strategy(strategy),
            ..ModelConfig::default()
        };
        let (model, mut store) = Seq2Seq::new(&cfg, 0).unwrap();
        for (mode, name) in MODES {
            group.bench_function(BenchmarkId::new(name, strategy.name()), |bench| {
                exec::set_mode(mode);
                bench.iter(|| {
                    let mut g = Graph::new();
                    let out = model.forward(&mut g, &store, &batch).unwrap();
                    let loss = model.loss(&mut g, out.logits, &batch).unwrap();
                    g.backward_into(loss, &mut store).unwrap();
                    black_box(g.value(loss).item())
                });
            });
        }
    }
    group.finish();
    exec::set_mode(Mode::Parallel);
}

criterion_group!(benches, matmul, training_step);
criterion_main!(benches);
