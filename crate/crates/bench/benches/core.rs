use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use pathprune::arch_space::{count_paths, BlockSpec, SearchSpace, SpaceView};
use pathprune::cost_model::{make_buckets, BucketSampler};
use pathprune::evo_search::{evolve, EvoConfig};
use pathprune::path_filter::{FilterConfig, PathFilter};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn filter_forward(c: &mut Criterion) {
    let s = SearchSpace::ofa_default();
    let buckets = make_buckets(&s, 5).unwrap();
    let view = SpaceView::full(&s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let paths: Vec<_> = (0..64).map(|_| view.sample(&mut rng)).collect();
    for d in [32, 128] {
        let f = PathFilter::new(&s, &buckets, FilterConfig { d_model: d, ffn_dim: d, head_hidden: d, ..Default::default() }).unwrap();
        c.bench_function(&format!("filter_forward_64_paths_d{d}"), |b| b.iter(|| f.score_paths(black_box(&paths)).unwrap()));
    }
}

fn counting(c: &mut Criterion) {
    let s = SearchSpace::ofa_default();
    c.bench_function("count_paths_default", |b| b.iter(|| count_paths(black_box(&s), None).unwrap()));
    let rule = SearchSpace::ofa_compound_rule();
    c.bench_function("count_paths_coupled", |b| b.iter(|| count_paths(black_box(&s), Some(&rule)).unwrap()));
}

fn bucket_sampling(c: &mut Criterion) {
    let s = SearchSpace::ofa_default();
    let view = SpaceView::full(&s).unwrap();
    let buckets = make_buckets(&s, 5).unwrap();
    c.bench_function("bucket_sampler_build", |b| b.iter(|| BucketSampler::new(black_box(&view), &buckets).unwrap()));
    let sampler = BucketSampler::new(&view, &buckets).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    c.bench_function("bucket_sampler_draw_top_bucket", |b| b.iter(|| sampler.sample(4, &mut rng).unwrap()));
}

fn evolution(c: &mut Criterion) {
    let blk = BlockSpec::new(&[0, 1, 2], &[0.8, 1.0], &[0.2, 0.25, 0.35]);
    let s = SearchSpace::new(vec![blk.clone(), blk], 224, vec![64, 128], 3).unwrap();
    let buckets = make_buckets(&s, 5).unwrap();
    let view = SpaceView::full(&s).unwrap();
    let f = PathFilter::new(&s, &buckets, FilterConfig { d_model: 32, ffn_dim: 32, head_hidden: 32, ..Default::default() }).unwrap();
    let cfg = EvoConfig { generations: 100, ..Default::default() };
    let mut group = c.benchmark_group("evolve");
    group.sample_size(10);
    group.bench_function("evolve_100_generations_d32", |b| b.iter(|| evolve(&f, black_box(&view), &cfg).unwrap()));
    group.finish();
}

criterion_group!(benches, filter_forward, counting, bucket_sampling, evolution);
criterion_main!(benches);
