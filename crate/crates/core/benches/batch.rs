use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use evgraph::model::{Model, ModelConfig};
use evgraph::par::Exec;
use evgraph::train::{toy_dataset, ToySpec};

fn batch_classify(c: &mut Criterion) {
    let data = toy_dataset(&ToySpec::default(), 64, 5).unwrap();
    let streams: Vec<_> = data.into_iter().map(|s| s.events).collect();
    let mut group = c.benchmark_group("classify_batch");
    for preset in ["tiny", "small"] {
        let m = Model::init(ModelConfig::preset(preset, 2).unwrap(), 1).unwrap();
        for exec in [Exec::Sequential, Exec::Parallel] {
            group.bench_with_input(BenchmarkId::new(format!("{exec:?}"), preset), &exec, |b, &exec| {
                b.iter(|| exec.map(&streams, |ev| m.classify(ev).unwrap().predicted))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, batch_classify);
criterion_main!(benches);
