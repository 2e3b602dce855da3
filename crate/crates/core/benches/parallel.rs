//! Parallel core against a one-thread pool. Build with `--no-default-features`
//! to time the sequential fallback under the same benchmark names.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fitmatch::efm::{run_efm1, EfmOptions};
use fitmatch::eval::random_instance;
use fitmatch::gap::MatchContext;
use fitmatch::geometry::ScoreParams;
use fitmatch::labeling::{sample_proposals, ProposalPool};
use fitmatch::lsgap::ls_gap;
use fitmatch::oracle::brute_force_gap;
use fitmatch::scene::{generate_scene, SceneSpec};

#[cfg(feature = "rayon")]
fn modes() -> Vec<(&'static str, rayon::ThreadPool)> {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let all = rayon::ThreadPoolBuilder::new().build().unwrap();
    vec![("one-thread", one), ("pool", all)]
}

#[cfg(feature = "rayon")]
fn run<R>(mode: &(&'static str, rayon::ThreadPool), f: impl FnOnce() -> R + Send) -> R
where
    R: Send,
{
    mode.1.install(f)
}

#[cfg(not(feature = "rayon"))]
fn modes() -> Vec<(&'static str, ())> {
    vec![("sequential", ())]
}

#[cfg(not(feature = "rayon"))]
fn run<R>(_: &(&'static str, ()), f: impl FnOnce() -> R) -> R {
    f()
}

fn scene() -> (MatchContext, Vec<(usize, usize)>) {
    let spec = SceneSpec { plane_count: 3, features_per_plane: 80, noise_sigma: 0.5, rng_seed: 1, ..SceneSpec::default() };
    let (l, r, gt) = generate_scene(&spec).unwrap();
    let ctx = MatchContext::new(&l, &r, ScoreParams::default()).unwrap();
    (ctx, gt.pairs.iter().map(|&(p, q, _)| (p, q)).collect())
}

fn bench(c: &mut Criterion) {
    let (ctx, pairs) = scene();
    let pool: ProposalPool = sample_proposals(&ctx, &pairs, 16, 3).unwrap();
    let lsgap_inst = random_instance(60, 8, 2_000_000, 0.5, 5).unwrap();
    let brute_inst = random_instance(8, 3, 2_000_000, 0.5, 5).unwrap();

    let mut g = c.benchmark_group("parallel");
    g.sample_size(10);
    for mode in modes() {
        g.bench_with_input(BenchmarkId::new("ls_gap_60x8", mode.0), &mode, |b, m| {
            b.iter(|| run(m, || ls_gap(&lsgap_inst, 1_000_000).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("brute_force_8", mode.0), &mode, |b, m| {
            b.iter(|| run(m, || brute_force_gap(&brute_inst).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("instance_16_models", mode.0), &mode, |b, m| {
            b.iter(|| run(m, || ctx.instance(&pool.models, true)))
        });
        g.bench_with_input(BenchmarkId::new("efm1_scene", mode.0), &mode, |b, m| {
            b.iter(|| run(m, || run_efm1(&ctx, &EfmOptions { max_iter: 3, ..EfmOptions::default() }).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
