//! Benchmarks for the hot numeric kernels: dilated masked convolution,
//! full network forward passes, the likelihood, and the guided filter.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dbsn_core::autodiff::Graph;
use dbsn_core::dbsn::{center_mask, dbsn_forward, DbsnConfig, DbsnParams};
use dbsn_core::guided::guided_filter;
use dbsn_core::pixelshuffle::{ps_down, ps_up};
use dbsn_core::spd::{tri_len, SymMat};
use dbsn_core::tensor::Tensor;

fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(vec![32, 32, 32], &mut rng);
    let w = random_tensor(vec![32, 32, 3, 3], &mut rng);
    let mask = center_mask(3);

    c.bench_function("conv2d 32ch 3x3 dil2 32x32 forward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xi = g.constant(x.clone());
            let wi = g.constant(w.clone());
            g.conv2d(xi, wi, 2, None).unwrap()
        })
    });

    c.bench_function("conv2d masked forward+backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xi = g.param(x.clone());
            let wi = g.param(w.clone());
            let y = g.conv2d(xi, wi, 2, Some(&mask)).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
        })
    });
}

fn bench_dbsn(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let config = DbsnConfig::default();
    let params = DbsnParams::init(config, &mut rng).unwrap();
    let y = random_tensor(vec![1, 32, 32], &mut rng).map(|v| v.abs().min(1.0));
    let mut group = c.benchmark_group("dbsn");
    group.sample_size(10);
    group.bench_function("default forward 32x32", |b| {
        b.iter(|| dbsn_forward(&params, &y).unwrap())
    });
    group.finish();
}

fn bench_nll(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ch = 3usize;
    let planes = tri_len(ch);
    let y = random_tensor(vec![ch, 32, 32], &mut rng);
    let mu = random_tensor(vec![ch, 32, 32], &mut rng);
    let raw_n = random_tensor(vec![planes, 32, 32], &mut rng);
    let raw_mu = random_tensor(vec![planes, 32, 32], &mut rng);
    let valid = vec![true; 32 * 32];
    c.bench_function("gaussian nll C=3 32x32 forward+backward", |b| {
        b.iter_batched(
            || (),
            |_| {
                let mut g = Graph::new();
                let mu_id = g.param(mu.clone());
                let rn = g.param(raw_n.clone());
                let rmu = g.param(raw_mu.clone());
                let sn = g.spd_head(rn, ch).unwrap();
                let smu = g.spd_head(rmu, ch).unwrap();
                let loss = g.gaussian_nll(&y, mu_id, sn, smu, &valid).unwrap();
                g.backward(loss).unwrap();
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_spd(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mats: Vec<SymMat> = (0..1000)
        .map(|_| {
            let mut m = SymMat::zeros(3);
            for i in 0..3 {
                for j in 0..=i {
                    m.set(i, j, rng.gen_range(-0.5..0.5));
                }
            }
            for i in 0..3 {
                m.set(i, i, m.get(i, i) + 2.0);
            }
            m
        })
        .collect();
    c.bench_function("spd 3x3 inverse x1000", |b| {
        b.iter(|| {
            for m in &mats {
                criterion::black_box(m.inverse().unwrap());
            }
        })
    });
}

fn bench_guided(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_tensor(vec![1, 256, 256], &mut rng).map(|v| v.abs().min(1.0));
    c.bench_function("guided filter r=1 256x256", |b| {
        b.iter(|| guided_filter(&p, &p, 1, 0.01).unwrap())
    });
}

fn bench_pixelshuffle(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let y = random_tensor(vec![3, 256, 256], &mut rng);
    c.bench_function("pixel-shuffle roundtrip 3x256x256", |b| {
        b.iter(|| {
            let set = ps_down(&y).unwrap();
            ps_up(&set).unwrap()
        })
    });
}

criterion_group!(
    benches,
    bench_conv,
    bench_dbsn,
    bench_nll,
    bench_spd,
    bench_guided,
    bench_pixelshuffle
);
criterion_main!(benches);
