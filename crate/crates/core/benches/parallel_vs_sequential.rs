use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use peampc::controller::Algorithm;
use peampc::harness::{run_closed_loop, ExperimentConfig, Profile};
use peampc::parallel;

/// Independent short closed-loop runs, the unit of work of a Monte-Carlo batch.
fn closed_loop_batch(c: &mut Criterion) {
    let mut cfg = ExperimentConfig::example(Profile::Desk);
    cfg.run_length = 8;
    cfg.report_times = vec![8];
    let problem = cfg.problem().expect("example problem");
    let runs: Vec<usize> = (0..8).collect();

    let mut group = c.benchmark_group("closed_loop_batch");
    group.sample_size(10);
    for algorithm in [Algorithm::Plain, Algorithm::NoisyFeedback] {
        let work = |&run: &usize| run_closed_loop(&problem, &cfg, algorithm, run).expect("run").metrics.cost;
        group.bench_with_input(BenchmarkId::new("parallel", algorithm.label()), &runs, |b, runs| {
            b.iter(|| parallel::map(runs, work))
        });
        group.bench_with_input(BenchmarkId::new("sequential", algorithm.label()), &runs, |b, runs| {
            b.iter(|| parallel::map_sequential(runs, work))
        });
    }
    group.finish();
}

criterion_group!(benches, closed_loop_batch);
criterion_main!(benches);
