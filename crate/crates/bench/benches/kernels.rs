use cdnet_bench::wave;
use cdnet_core::dataset::generate_synthetic_pair;
use cdnet_core::relation_aware::attention;
use cdnet_core::train::{pair_loss, Sgd};
use cdnet_core::{ChangeDetector, Difficulty, Graph, NetworkConfig, ParamStore};
use criterion::{black_box, criterion_group, criterion_main, Criterion};

fn conv(c: &mut Criterion) {
    let x = wave(&[32, 64, 64], 0.0);
    let w = wave(&[32, 32, 3, 3], 1.0);
    let b = wave(&[32], 2.0);
    c.bench_function("conv2d_3x3_32ch_64px_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut g = Graph::<f32>::new();
            let (xv, wv, bv) = (g.leaf(&x), g.leaf(&w), g.leaf(&b));
            let y = g.conv2d(xv, wv, Some(bv), 1, 1).unwrap();
            let s = g.sum(y);
            black_box(g.backward(s).unwrap());
        })
    });
}

fn attn(c: &mut Criterion) {
    let q = wave(&[256, 64], 0.0);
    let k = wave(&[256, 64], 1.0);
    let v = wave(&[256, 64], 2.0);
    c.bench_function("attention_256x64_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut g = Graph::<f32>::new();
            let (qv, kv, vv) = (g.leaf(&q), g.leaf(&k), g.leaf(&v));
            let o = attention(&mut g, qv, kv, vv, None).unwrap();
            let s = g.sum(o);
            black_box(g.backward(s).unwrap());
        })
    });
}

fn model(c: &mut Criterion) {
    let mut store = ParamStore::<f32>::new();
    let net = ChangeDetector::new(&NetworkConfig::default(), &mut store, 0).unwrap();
    let pair = generate_synthetic_pair(3, 64, Difficulty::Easy);
    let mut group = c.benchmark_group("model_64px");
    group.sample_size(20);
    group.bench_function("predict", |bench| {
        bench.iter(|| black_box(net.predict(&store, &pair.t1, &pair.t2).unwrap()))
    });
    group.bench_function("train_step", |bench| {
        let mut sgd = Sgd::new(0.9, 1e-4);
        bench.iter(|| {
            let mut g = Graph::with_params(&store);
            let (loss, _) = pair_loss(&mut g, &net, &pair).unwrap();
            let grads = g.backward(loss).unwrap();
            drop(g);
            grads.accumulate_into(&mut store).unwrap();
            sgd.step(&mut store, 1e-3);
        })
    });
    group.finish();
}

criterion_group!(benches, conv, attn, model);
criterion_main!(benches);
