use criterion::{criterion_group, criterion_main, Criterion};
use teamring_core::cluster::ClusterSpec;
use teamring_core::perf::ModelSpec;
use teamring_core::scheduler::{grid_search, Profiler};
use teamring_core::tensor::MaskKind;

fn search_bench(crit: &mut Criterion) {
    let model = ModelSpec {
        layers: 32,
        hidden: 4096,
        heads: 32,
        dtype_bytes: 2,
        param_memory_bytes: 0,
    };
    let cluster = ClusterSpec {
        num_nodes: 8,
        devices_per_node: 8,
        inter_bw: 2.5e10,
        ..ClusterSpec::single_node(64)
    };
    crit.bench_function("grid_search/analytic/p64", |b| {
        b.iter(|| {
            grid_search(64, &cluster, &model, 1, 65536, MaskKind::Causal, Profiler::Analytic)
                .unwrap()
        })
    });
    crit.bench_function("grid_search/measured/p64", |b| {
        b.iter(|| {
            grid_search(64, &cluster, &model, 1, 65536, MaskKind::Causal, Profiler::Measured)
                .unwrap()
        })
    });
}

criterion_group!(benches, search_bench);
criterion_main!(benches);
