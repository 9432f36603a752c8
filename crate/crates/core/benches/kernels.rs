use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lsattn_core::attention::{
    attend_streaming, mhsa_forward_with, Kernel, LsLayout, MaskSpec, MultiHeadWeights,
};
use lsattn_core::{matmul, par, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// Each group runs the same work twice: default mode and forced sequential.
// Without the `parallel` feature both arms take the sequential path.

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("sequential", true)]
}

fn run<R>(seq: bool, f: impl FnOnce() -> R) -> R {
    if seq {
        par::sequential(f)
    } else {
        f()
    }
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("matmul");
    for n in [64usize, 256] {
        let a = Matrix::randn(n, n, 1.0, &mut rng);
        let b = Matrix::randn(n, n, 1.0, &mut rng);
        for (name, seq) in modes() {
            g.bench_with_input(BenchmarkId::new(name, n), &n, |bch, _| {
                bch.iter(|| run(seq, || matmul(&a, &b).unwrap()))
            });
        }
    }
    g.finish();
}

fn bench_streaming(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = c.benchmark_group("attend_streaming");
    g.sample_size(20);
    for (label, mask) in [
        ("global", MaskSpec::GlobalCausal),
        ("local50", MaskSpec::LocalCausal { span: 50 }),
    ] {
        let n = 1024;
        let q = Matrix::randn(n, 32, 1.0, &mut rng);
        let k = Matrix::randn(n, 32, 1.0, &mut rng);
        let v = Matrix::randn(n, 32, 1.0, &mut rng);
        for (name, seq) in modes() {
            g.bench_function(BenchmarkId::new(name, label), |bch| {
                bch.iter(|| {
                    run(seq, || {
                        attend_streaming(&q, &k, &v, &mask, 32f64.sqrt()).unwrap()
                    })
                })
            });
        }
    }
    g.finish();
}

fn bench_mhsa(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = c.benchmark_group("mhsa_forward");
    g.sample_size(10);
    let n = 512;
    let w = MultiHeadWeights::random(192, 6, 32, 32, 0.05, &mut rng);
    let x = Matrix::randn(n, 192, 1.0, &mut rng);
    for (label, layout) in [
        ("vanilla", LsLayout::vanilla(6)),
        ("ls", LsLayout::ls(5, 1, 50)),
    ] {
        for (name, seq) in modes() {
            g.bench_function(BenchmarkId::new(name, label), |bch| {
                bch.iter(|| {
                    run(seq, || {
                        mhsa_forward_with(&x, &w, &layout, 32f64.sqrt(), Kernel::Streaming).unwrap()
                    })
                })
            });
        }
    }
    g.finish();
}

criterion_group!(benches, bench_matmul, bench_streaming, bench_mhsa);
criterion_main!(benches);
