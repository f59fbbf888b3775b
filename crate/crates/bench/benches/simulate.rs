use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use teamring_core::cluster::ClusterSpec;
use teamring_core::exec::{run_backward, run_forward, ExecOptions, SimInputs};
use teamring_core::tensor::{DenseMatrix, MaskKind};
use teamring_core::topology::{ParallelConfig, Placement};

fn forward_bench(crit: &mut Criterion) {
    let mut group = crit.benchmark_group("forward");
    for &(p, c) in &[(4usize, 1usize), (16, 2), (16, 4)] {
        let config = ParallelConfig::new(p, c, Placement::CollectIntra).unwrap();
        let cluster = ClusterSpec::single_node(p);
        let inputs = SimInputs::random(1, 256, 16, 3);
        group.bench_with_input(BenchmarkId::new("n256", format!("p{}c{}", p, c)), &config, |b, cfg| {
            b.iter(|| {
                run_forward(cfg, &cluster, &inputs, MaskKind::Causal, &ExecOptions::default())
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn backward_bench(crit: &mut Criterion) {
    let config = ParallelConfig::new(16, 2, Placement::CollectIntra).unwrap();
    let cluster = ClusterSpec::single_node(16);
    let inputs = SimInputs::random(1, 256, 16, 5);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(6);
    let g = vec![DenseMatrix::random(256, 16, &mut rng)];
    crit.bench_function("backward/n256/p16c2", |b| {
        b.iter(|| {
            run_backward(&config, &cluster, &inputs, &g, MaskKind::Causal, &ExecOptions::default())
                .unwrap()
        })
    });
}

criterion_group!(benches, forward_bench, backward_bench);
criterion_main!(benches);
