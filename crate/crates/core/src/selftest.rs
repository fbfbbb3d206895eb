//! Worked examples with known answers, run as one named check each.

use std::path::Path;

use image::{GrayImage, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment, flip_horizontal};
use crate::backbone::Backbone;
use crate::config::{AugmentConfig, Difficulty, NetworkConfig, RunConfig, Toggles};
use crate::cross_transformer::{ctb, ClassifierHead, CtbProjections, CTB_EPS};
use crate::dataset::{generate_synthetic_pair, read_pair, tile_dataset, write_pair};
use crate::gradcheck::{check, random_projection, random_tensor, FdOptions};
use crate::metrics::{confusion, f1_from, render_confusion_map, scores, ConfusionStats, FP_COLOR, TN_COLOR, TP_COLOR};
use crate::model::ChangeDetector;
use crate::nn::{Conv2d, Init};
use crate::oracle::{self, Map};
use crate::relation_aware::{attention, fuse, AttentionProjections, RelationAwareLevel};
use crate::scale_aware::{channel_gate, difference, reweight};
use crate::tensor::{Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use crate::train::{prepare_data, train, Sgd};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Outcome = std::result::Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(got: &[f64], want: &[f64], tol: f64) -> Outcome {
    ensure(got.len() == want.len(), || format!("length {} vs {}", got.len(), want.len()))?;
    for (i, (a, b)) in got.iter().zip(want).enumerate() {
        ensure((a - b).abs() <= tol, || format!("entry {i}: {a} vs {b}"))?;
    }
    Ok(())
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).expect("literal tensor")
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn map(x: &Tensor<f64>) -> Map {
    let s = x.shape();
    Map::new(s[0], s[1], s[2], x.data().to_vec())
}

fn param(store: &ParamStore<f64>, id: ParamId) -> Vec<f64> {
    store.get(id).tensor.data().to_vec()
}

fn set_param(store: &mut ParamStore<f64>, id: ParamId, f: impl Fn(usize) -> f64) {
    store.get_mut(id).tensor.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
}

fn identity(c: usize) -> impl Fn(usize) -> f64 {
    move |i| f64::from(u8::from(i / c == i % c))
}

fn tiny_model(t: Toggles) -> NetworkConfig {
    let mut c = NetworkConfig {
        width_factor: 1.0 / 16.0,
        ..NetworkConfig::default()
    };
    c.set_toggles(t);
    c
}

// ---- tensor ops -----------------------------------------------------------

fn matmul_examples() -> Outcome {
    let mut g = Graph::<f64>::new();
    let i2 = g.input(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let a = g.input(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.input(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let ia = g.matmul(i2, a).map_err(e)?;
    close(g.value(ia), &[1.0, 2.0, 3.0, 4.0], 0.0)?;
    let ab = g.matmul(a, b).map_err(e)?;
    close(g.value(ab), &[19.0, 22.0, 43.0, 50.0], 0.0)?;
    let z = g.input(&Tensor::zeros(vec![2, 3]));
    let any = g.input(&random_tensor(&[3, 4], -5.0, 5.0, &mut rng(1)));
    let zz = g.matmul(z, any).map_err(e)?;
    ensure(g.shape(zz) == [2, 4] && g.value(zz).iter().all(|&v| v == 0.0), || "annihilator".into())
}

fn softmax_examples() -> Outcome {
    let mut g = Graph::<f64>::new();
    let x = g.input(&t(&[1, 3], &[0.0; 3]));
    let s = g.softmax_rows(x).map_err(e)?;
    close(g.value(s), &[1.0 / 3.0; 3], 1e-15)?;
    let y = g.input(&t(&[1, 2], &[0.0, 3f64.ln()]));
    let s = g.softmax_rows(y).map_err(e)?;
    close(g.value(s), &[0.25, 0.75], 1e-15)?;
    let r = random_tensor(&[3, 4], -3.0, 3.0, &mut rng(2));
    let shifted = Tensor::new(vec![3, 4], r.data().iter().map(|v| v + 17.5).collect()).map_err(e)?;
    let (a, b) = (g.input(&r), g.input(&shifted));
    let (sa, sb) = (g.softmax_rows(a).map_err(e)?, g.softmax_rows(b).map_err(e)?);
    close(g.value(sa), g.value(sb), 1e-14)
}

fn conv_examples() -> Outcome {
    let mut g = Graph::<f64>::new();
    let x = random_tensor(&[3, 4, 5], -1.0, 1.0, &mut rng(3));
    let vx = g.input(&x);
    let w = g.input(&Tensor::from_fn(vec![3, 3, 1, 1], identity(3)));
    let y = g.conv2d(vx, w, None, 1, 0).map_err(e)?;
    close(g.value(y), x.data(), 0.0)?;

    let ones = g.input(&Tensor::full(vec![1, 3, 3], 1.0));
    let k = g.input(&Tensor::full(vec![1, 1, 3, 3], 1.0));
    let y = g.conv2d(ones, k, None, 1, 1).map_err(e)?;
    ensure(g.value(y)[4] == 9.0 && g.value(y)[0] == 4.0, || format!("centre/corner {:?}", g.value(y)))?;

    let zero = g.input(&Tensor::zeros(vec![2, 3, 3]));
    let w = g.input(&random_tensor(&[2, 2, 3, 3], -1.0, 1.0, &mut rng(4)));
    let b = g.input(&t(&[2], &[0.5, -1.5]));
    let y = g.conv2d(zero, w, Some(b), 1, 1).map_err(e)?;
    let want: Vec<f64> = (0..18).map(|i| if i < 9 { 0.5 } else { -1.5 }).collect();
    close(g.value(y), &want, 0.0)
}

fn resize_examples() -> Outcome {
    let mut g = Graph::<f64>::new();
    let x = random_tensor(&[2, 3, 5], -1.0, 1.0, &mut rng(5));
    let vx = g.input(&x);
    let same = g.resize(vx, (3, 5)).map_err(e)?;
    close(g.value(same), x.data(), 0.0)?;
    let c = g.input(&Tensor::full(vec![1, 3, 3], 0.7));
    for size in [(1, 1), (5, 7), (9, 2)] {
        let r = g.resize(c, size).map_err(e)?;
        ensure(g.value(r).iter().all(|&v| v == 0.7), || format!("constant lost at {size:?}"))?;
    }
    let small = g.input(&t(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]));
    let up = g.resize(small, (4, 4)).map_err(e)?;
    // Half-pixel centres put the four sample rows/cols at source 0, ¼, ¾, 1.
    let f = [0.0, 0.25, 0.75, 1.0];
    let hand: Vec<f64> = (0..16).map(|i| f[i % 4] + 2.0 * f[i / 4]).collect();
    close(g.value(up), &hand, 1e-15)?;
    close(g.value(up), &oracle::bilinear(&Map::new(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]), 4, 4).data, 1e-15)
}

fn pooling_examples() -> Outcome {
    let mut g = Graph::<f64>::new();
    let c = g.input(&Tensor::full(vec![3, 2, 4], -1.25));
    let p = g.global_avg_pool(c).map_err(e)?;
    ensure(g.shape(p) == [3], || "shape".into())?;
    close(g.value(p), &[-1.25; 3], 0.0)?;
    let x = g.input(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = g.global_avg_pool(x).map_err(e)?;
    close(g.value(p), &[2.5], 0.0)
}

fn autodiff_examples() -> Outcome {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&random_tensor(&[2, 3], -1.0, 1.0, &mut rng(6)));
    let s = g.sum(x);
    let grads = g.backward(s).map_err(e)?;
    close(grads.wrt(x).ok_or("no grad")?, &[1.0; 6], 0.0)?;

    let mut g = Graph::<f64>::new();
    let a = g.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.leaf(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let m = g.matmul(a, b).map_err(e)?;
    let s = g.sum(m);
    let grads = g.backward(s).map_err(e)?;
    // ones·Bᵀ: each row holds the row sums of B.
    close(grads.wrt(a).ok_or("no grad")?, &[11.0, 15.0, 11.0, 15.0], 0.0)?;
    close(grads.wrt(b).ok_or("no grad")?, &[4.0, 4.0, 6.0, 6.0], 0.0)?;

    let store = ParamStore::new();
    let inputs = vec![
        random_tensor(&[2, 4, 4], -1.0, 1.0, &mut rng(7)),
        random_tensor(&[3, 2, 3, 3], -1.0, 1.0, &mut rng(8)),
    ];
    let report = check(
        &store,
        &inputs,
        |g, v| {
            let c = g.conv2d(v[0], v[1], None, 1, 1)?;
            let r = g.resize(c, (3, 5))?;
            let s = g.sigmoid(r);
            let tok = g.reshape(s, [3, 15])?;
            let sm = g.softmax_rows(tok)?;
            random_projection(g, sm, 9)
        },
        &FdOptions::default(),
    )
    .map_err(e)?;
    ensure(report.rel_err < 1e-4, || format!("composite rel err {:e}", report.rel_err))
}

fn checkpoint_example() -> Outcome {
    let mut store = ParamStore::<f32>::new();
    ChangeDetector::new(&tiny_model(Toggles::all()), &mut store, 3).map_err(e)?;
    let bytes = Checkpoint::from_store(&store).with_meta("k", "v").to_bytes();
    let back = Checkpoint::from_bytes(&bytes).map_err(e)?;
    ensure(back.to_bytes() == bytes, || "bytes differ".into())?;
    let restored: ParamStore<f32> = back.to_store().map_err(e)?;
    for ((_, a), (_, b)) in store.iter().zip(restored.iter()) {
        let same = a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same && a.name == b.name, || format!("{} differs", a.name))?;
    }
    Ok(())
}

// ---- backbone -------------------------------------------------------------

fn backbone_examples() -> Outcome {
    let mut store = ParamStore::<f64>::new();
    let cfg = NetworkConfig::default();
    let bb = Backbone::new(&mut Init::new(&mut store, 1), &cfg).map_err(e)?;
    let mut g = Graph::with_params(&store);
    let img = random_tensor(&[3, 64, 64], 0.0, 1.0, &mut rng(10));
    let (x, y) = (g.input(&img), g.input(&img));
    let px = bb.extract(&mut g, x).map_err(e)?;
    let py = bb.extract(&mut g, y).map_err(e)?;
    let want = [[8, 16, 16], [16, 8, 8], [32, 8, 8], [64, 8, 8]];
    for n in 0..4 {
        ensure(g.shape(px[n]) == want[n], || format!("level {n}: {:?}", g.shape(px[n])))?;
        ensure(g.value(px[n]) == g.value(py[n]), || format!("level {n} differs for X = Y"))?;
    }
    let z = g.input(&Tensor::zeros(vec![3, 64, 64]));
    let pz = bb.extract(&mut g, z).map_err(e)?;
    for (n, &v) in pz.iter().enumerate() {
        let (s, d) = (g.shape(v).to_vec(), g.value(v));
        let plane = s[1] * s[2];
        for c in 0..s[0] {
            let p = &d[c * plane..(c + 1) * plane];
            ensure(p.iter().all(|&q| q == p[0]), || format!("level {n} channel {c} not constant"))?;
        }
    }
    Ok(())
}

// ---- relation-aware -------------------------------------------------------

fn attention_examples() -> Outcome {
    let mut r = rng(11);
    let mut g = Graph::<f64>::new();
    let q = g.input(&random_tensor(&[3, 2], -1.0, 1.0, &mut r));
    let k = g.input(&random_tensor(&[3, 2], -1.0, 1.0, &mut r));
    let zero = g.input(&Tensor::zeros(vec![3, 2]));
    let a = attention(&mut g, q, k, zero, None).map_err(e)?;
    ensure(g.value(a).iter().all(|&v| v == 0.0), || "zero values".into())?;

    let v1 = random_tensor(&[1, 3], -1.0, 1.0, &mut r);
    let (q1, k1, vv) = (
        g.input(&random_tensor(&[1, 3], -9.0, 9.0, &mut r)),
        g.input(&random_tensor(&[1, 3], -9.0, 9.0, &mut r)),
        g.input(&v1),
    );
    let a = attention(&mut g, q1, k1, vv, None).map_err(e)?;
    close(g.value(a), v1.data(), 0.0)?;

    let ts: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor(&[2, 2], -1.0, 1.0, &mut r)).collect();
    let vs: Vec<Var> = ts.iter().map(|x| g.input(x)).collect();
    let a = attention(&mut g, vs[0], vs[1], vs[2], None).map_err(e)?;
    close(g.value(a), &oracle::attention(ts[0].data(), ts[1].data(), ts[2].data(), 2, 2, 1.0), 1e-12)
}

fn fuse_examples() -> Outcome {
    let mut store = ParamStore::<f64>::new();
    let proj = AttentionProjections::new(&mut Init::new(&mut store, 12), "p", 2).map_err(e)?;
    let mut r = rng(13);
    let fi = random_tensor(&[4, 2], -1.0, 1.0, &mut r);
    let fj = random_tensor(&[4, 2], -1.0, 1.0, &mut r);
    {
        let mut g = Graph::with_params(&store);
        let vi = g.input(&fi);
        let same = fuse(&mut g, vi, vi, &proj, &proj, None).map_err(e)?;
        let q = proj.query(&mut g, vi).map_err(e)?;
        let k = proj.key(&mut g, vi).map_err(e)?;
        let v = proj.value(&mut g, vi).map_err(e)?;
        let a = attention(&mut g, q, k, v, None).map_err(e)?;
        let want: Vec<f64> = fi.data().iter().zip(g.value(a)).map(|(x, y)| x + 2.0 * y).collect();
        close(g.value(same), &want, 1e-14)?;

        let vj = g.input(&fj);
        let f = fuse(&mut g, vi, vj, &proj, &proj, None).map_err(e)?;
        let p = oracle::Projections {
            w_q: param(&store, proj.w_q),
            w_k: param(&store, proj.w_k),
            w_v: param(&store, proj.w_v),
        };
        close(g.value(f), &oracle::fuse(fi.data(), fj.data(), &p, 4, 2, 1.0), 1e-12)?;
    }
    set_param(&mut store, proj.w_v, |_| 0.0);
    let mut g = Graph::with_params(&store);
    let (vi, vj) = (g.input(&fi), g.input(&fj));
    let f = fuse(&mut g, vi, vj, &proj, &proj, None).map_err(e)?;
    close(g.value(f), fi.data(), 0.0)
}

fn relation_level_examples() -> Outcome {
    let mut store = ParamStore::<f64>::new();
    let level = RelationAwareLevel::new(&mut Init::new(&mut store, 14), "ra", 2, false).map_err(e)?;
    let mut r = rng(15);
    let a = random_tensor(&[2, 2, 2], -1.0, 1.0, &mut r);
    let b = random_tensor(&[2, 2, 2], -1.0, 1.0, &mut r);
    let mut g = Graph::with_params(&store);
    let (va, vb) = (g.input(&a), g.input(&b));
    let (ea, eb) = level.forward(&mut g, va, va).map_err(e)?;
    ensure(g.value(ea) == g.value(eb), || "X = Y gave different outputs".into())?;
    let (xa, xb) = level.forward(&mut g, va, vb).map_err(e)?;
    let (ya, yb) = level.forward(&mut g, vb, va).map_err(e)?;
    ensure(g.value(xa) == g.value(yb) && g.value(xb) == g.value(ya), || "swap mismatch".into())?;

    let weights = |b: &crate::relation_aware::FuseBlock| oracle::FuseBlockWeights {
        proj: oracle::Projections {
            w_q: param(&store, b.proj.w_q),
            w_k: param(&store, b.proj.w_k),
            w_v: param(&store, b.proj.w_v),
        },
        conv_w: param(&store, b.conv.weight),
        conv_b: param(&store, b.conv.bias.expect("fuse conv has bias")),
        gamma: param(&store, b.norm.gamma),
        beta: param(&store, b.norm.beta),
        groups: b.norm.groups,
    };
    let (ox, oy) = oracle::relation_aware(
        &map(&a),
        &map(&b),
        &weights(&level.cross),
        &weights(&level.cross_self),
        1.0,
        crate::tensor::NORM_EPS,
    );
    close(g.value(xa), &ox.data, 1e-10)?;
    close(g.value(xb), &oy.data, 1e-10)
}

// ---- scale-aware ----------------------------------------------------------

fn difference_examples() -> Outcome {
    let mut g = Graph::<f64>::new();
    let r = random_tensor(&[2, 3, 3], -1.0, 1.0, &mut rng(16));
    let s = random_tensor(&[2, 3, 3], -1.0, 1.0, &mut rng(17));
    let (vr, vs) = (g.input(&r), g.input(&s));
    let z = difference(&mut g, vr, vr).map_err(e)?;
    ensure(g.value(z).iter().all(|&v| v == 0.0), || "equal inputs".into())?;
    let ab = difference(&mut g, vr, vs).map_err(e)?;
    let ba = difference(&mut g, vs, vr).map_err(e)?;
    ensure(g.value(ab) == g.value(ba), || "not symmetric".into())?;
    let a = g.input(&t(&[2], &[1.0, -2.0]));
    let b = g.input(&t(&[2], &[-1.0, 1.0]));
    let d = difference(&mut g, a, b).map_err(e)?;
    close(g.value(d), &[2.0, 3.0], 0.0)
}

fn gate_examples() -> Outcome {
    let mut store = ParamStore::<f64>::new();
    let conv = Conv2d::new(&mut Init::new(&mut store, 18), "gate", (3, 3), 1, 1, true).map_err(e)?;
    {
        let mut g = Graph::with_params(&store);
        let z = g.input(&Tensor::zeros(vec![3, 2, 2]));
        let u = channel_gate(&mut g, &conv, z).map_err(e)?;
        close(g.value(u), &[0.5; 3], 0.0)?;
        let big = g.input(&random_tensor(&[3, 4, 4], -50.0, 50.0, &mut rng(19)));
        let u = channel_gate(&mut g, &conv, big).map_err(e)?;
        ensure(g.value(u).iter().all(|&v| v > 0.0 && v < 1.0), || "range".into())?;
    }
    set_param(&mut store, conv.weight, identity(3));
    let mut g = Graph::with_params(&store);
    let consts = [0.3, -1.2, 2.0];
    let x = g.input(&Tensor::from_fn(vec![3, 2, 2], |i| consts[i / 4]));
    let u = channel_gate(&mut g, &conv, x).map_err(e)?;
    close(g.value(u), &consts.map(oracle::sigmoid), 1e-15)
}

fn reweight_examples() -> Outcome {
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(&mut store, 20);
    let same = Conv2d::new(&mut init, "same", (2, 2), 1, 1, false).map_err(e)?;
    let up = Conv2d::new(&mut init, "up", (2, 2), 1, 1, false).map_err(e)?;
    let gate = Conv2d::new(&mut init, "gate", (2, 2), 1, 1, true).map_err(e)?;
    set_param(&mut store, same.weight, identity(2));
    let mut g = Graph::with_params(&store);
    let d = random_tensor(&[2, 2, 2], 0.0, 1.0, &mut rng(21));
    let vd = g.input(&d);
    let half = g.input(&t(&[2], &[0.5, 0.5]));
    let y = reweight(&mut g, &same, vd, (2, 2), Some(half)).map_err(e)?;
    let want: Vec<f64> = d.data().iter().map(|v| v / 2.0).collect();
    close(g.value(y), &want, 0.0)?;

    let zero = g.input(&Tensor::zeros(vec![2, 2, 2]));
    let u = g.input(&random_tensor(&[2], 0.0, 1.0, &mut rng(22)));
    let y = reweight(&mut g, &up, zero, (4, 4), Some(u)).map_err(e)?;
    ensure(g.value(y).iter().all(|&v| v == 0.0), || "zero input".into())?;

    let anchor = random_tensor(&[2, 4, 4], 0.0, 1.0, &mut rng(23));
    let va = g.input(&anchor);
    let u = channel_gate(&mut g, &gate, va).map_err(e)?;
    let y = reweight(&mut g, &up, vd, (4, 4), Some(u)).map_err(e)?;
    let wu = oracle::channel_gate(&map(&anchor), &param(&store, gate.weight), &param(&store, gate.bias.expect("bias")));
    let want = oracle::reweight(&map(&d), &param(&store, up.weight), 2, (4, 4), Some(&wu));
    close(g.value(y), &want.data, 1e-12)
}

// ---- cross-transformer ----------------------------------------------------

fn ctb_examples() -> Outcome {
    let mut store = ParamStore::<f64>::new();
    let proj = CtbProjections::new(&mut Init::new(&mut store, 24), "ctb", 2).map_err(e)?;
    let mut r = rng(25);
    let maps: Vec<Tensor<f64>> = (0..4).map(|_| random_tensor(&[2, 1, 1], -1.0, 1.0, &mut r)).collect();
    {
        let mut g = Graph::with_params(&store);
        let v: Vec<Var> = maps.iter().map(|m| g.input(m)).collect();
        let out = ctb(&mut g, [v[0], v[1], v[2], v[3]], &proj).map_err(e)?;
        let w = oracle::CtbWeights {
            w_q: param(&store, proj.w_q.weight),
            w_k: std::array::from_fn(|m| param(&store, proj.w_k[m].weight)),
            w_v: std::array::from_fn(|m| param(&store, proj.w_v[m].weight)),
        };
        let inputs: [Map; 4] = std::array::from_fn(|m| map(&maps[m]));
        let want = oracle::ctb(&inputs, &w, CTB_EPS);
        let amp = want.betas.iter().map(|b| b.abs()).fold(1.0, f64::max);
        close(g.value(out.fused), &want.fused.data, 1e-12 * amp)?;
    }
    {
        // Shared key projection and identical inputs.
        let k0 = param(&store, proj.w_k[0].weight);
        for m in 1..4 {
            set_param(&mut store, proj.w_k[m].weight, |i| k0[i]);
        }
        let v0 = param(&store, proj.w_v[0].weight);
        for m in 1..4 {
            set_param(&mut store, proj.w_v[m].weight, |i| v0[i]);
        }
        let mut g = Graph::with_params(&store);
        let d = g.input(&random_tensor(&[2, 2, 2], 0.1, 1.0, &mut r));
        let out = ctb(&mut g, [d; 4], &proj).map_err(e)?;
        for b in out.betas {
            close(g.value(b), &[0.25], 1e-6)?;
        }
        let v = proj.w_v[0].forward(&mut g, d).map_err(e)?;
        let want = g.add(d, v).map_err(e)?;
        close(g.value(out.fused), g.value(want), 1e-6)?;
    }
    for m in 0..4 {
        set_param(&mut store, proj.w_v[m].weight, |_| 0.0);
    }
    let mut g = Graph::with_params(&store);
    let v: Vec<Var> = maps.iter().map(|m| g.input(m)).collect();
    let out = ctb(&mut g, [v[0], v[1], v[2], v[3]], &proj).map_err(e)?;
    close(g.value(out.fused), maps[0].data(), 0.0)
}

fn head_examples() -> Outcome {
    let widths = [2, 2, 3, 3];
    let mut store = ParamStore::<f64>::new();
    let head = ClassifierHead::new(&mut Init::new(&mut store, 26), widths).map_err(e)?;
    let mut g = Graph::with_params(&store);
    let sizes = [4, 2, 2, 2];
    let zeros: Vec<Var> = (0..4).map(|n| g.input(&Tensor::zeros(vec![widths[n], sizes[n], sizes[n]]))).collect();
    let p = head.forward(&mut g, [zeros[0], zeros[1], zeros[2], zeros[3]], (8, 8)).map_err(e)?;
    ensure(g.value(p).iter().all(|&v| v == 0.5), || "zero input is not 0.5".into())?;

    let mut r = rng(27);
    let maps: Vec<Tensor<f64>> = (0..4).map(|n| random_tensor(&[widths[n], sizes[n], sizes[n]], -2.0, 2.0, &mut r)).collect();
    let v: Vec<Var> = maps.iter().map(|m| g.input(m)).collect();
    let p = head.forward(&mut g, [v[0], v[1], v[2], v[3]], (8, 8)).map_err(e)?;
    let d = g.value(p);
    ensure((0..64).all(|i| (d[i] + d[64 + i] - 1.0).abs() < 1e-6), || "not normalised".into())?;
    let fused: [Map; 4] = std::array::from_fn(|n| map(&maps[n]));
    let want = oracle::classifier_head(
        &fused,
        &param(&store, head.conv.weight),
        &param(&store, head.conv.bias.expect("bias")),
        (8, 8),
    );
    close(d, &want.data, 1e-12)
}

// ---- full model and training ----------------------------------------------

fn model_examples() -> Outcome {
    let mut r = rng(28);
    let x = random_tensor(&[3, 32, 32], 0.0, 1.0, &mut r);
    let y = random_tensor(&[3, 32, 32], 0.0, 1.0, &mut r);
    let mut probs = Vec::new();
    for toggles in [Toggles::none(), Toggles::all()] {
        let mut store = ParamStore::<f64>::new();
        let model = ChangeDetector::new(&tiny_model(toggles), &mut store, 5).map_err(e)?;
        let mut g = Graph::with_params(&store);
        let (vx, vy) = (g.input(&x), g.input(&y));
        let tr = model.forward(&mut g, vx, vy).map_err(e)?;
        let p = g.value(tr.prob);
        ensure(g.shape(tr.prob) == [2, 32, 32], || "shape".into())?;
        ensure((0..1024).all(|i| (p[i] + p[1024 + i] - 1.0).abs() < 1e-6), || "distribution".into())?;
        probs.push(p.to_vec());

        let vx2 = g.input(&x);
        let same = model.forward(&mut g, vx, vx2).map_err(e)?;
        for d in same.diffs {
            ensure(g.value(d).iter().all(|&v| v == 0.0), || "D ≠ 0 for X = Y".into())?;
        }
        let sp = g.value(same.prob);
        ensure(sp[..1024].iter().all(|&v| v == sp[0]), || "P not constant for X = Y".into())?;
    }
    ensure(probs[0] != probs[1], || "toggles had no effect".into())?;

    for toggles in Toggles::ablation_grid() {
        let mut store = ParamStore::<f64>::new();
        let model = ChangeDetector::new(&tiny_model(toggles), &mut store, 5).map_err(e)?;
        let mut g = Graph::with_params(&store);
        let (vx, vy) = (g.input(&x), g.input(&y));
        let tr = model.forward(&mut g, vx, vy).map_err(e)?;
        let enhanced = tr.enhanced_x != tr.features_x;
        ensure(
            enhanced == toggles.relation_aware
                && tr.gates.is_some() == toggles.scale_aware
                && tr.ctb.is_some() == toggles.cross_transformer,
            || format!("wiring of {} does not match", toggles.label()),
        )?;
    }
    Ok(())
}

fn loss_examples() -> Outcome {
    let label = Tensor::from_fn(vec![4, 4], |i| f64::from(u8::from(i % 3 == 0)));
    let with_p = |f: &dyn Fn(f64) -> f64| {
        let mut data: Vec<f64> = label.data().iter().map(|&y| 1.0 - f(y)).collect();
        data.extend(label.data().iter().map(|&y| f(y)));
        Tensor::new(vec![2, 4, 4], data).expect("shape")
    };
    let mut g = Graph::<f64>::new();
    let perfect = g.input(&with_p(&|y| y));
    let l = g.binary_cross_entropy(perfect, &label).map_err(e)?;
    ensure(g.scalar_value(l) <= 1.6e-6 && g.scalar_value(l) >= 0.0, || format!("perfect {}", g.scalar_value(l)))?;
    let half = g.input(&with_p(&|_| 0.5));
    let l = g.binary_cross_entropy(half, &label).map_err(e)?;
    close(&[g.scalar_value(l)], &[std::f64::consts::LN_2], 1e-12)?;
    let wrong = g.input(&with_p(&|y| 1.0 - y));
    let l = g.binary_cross_entropy(wrong, &label).map_err(e)?;
    close(&[g.scalar_value(l)], &[-(1e-7f64).ln()], 1e-5)?;
    let bad = Tensor::from_fn(vec![4, 4], |i| if i == 5 { 0.5 } else { 0.0 });
    ensure(g.binary_cross_entropy(half, &bad).is_err(), || "non-binary label accepted".into())
}

fn optimizer_examples() -> Outcome {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::scalar(1.0)).map_err(e)?;
    store.get_mut(id).tensor.accumulate_grad(&[1.0]).map_err(e)?;
    Sgd::new(0.0, 0.0).step(&mut store, 0.1);
    close(store.get(id).tensor.data(), &[0.9], 1e-15)?;
    store.get_mut(id).tensor.data_mut()[0] = 1.0;
    store.get_mut(id).tensor.accumulate_grad(&[1.0]).map_err(e)?;
    Sgd::new(0.0, 5e-4).step(&mut store, 0.1);
    close(store.get(id).tensor.data(), &[1.0 - 0.1 * (1.0 + 5e-4)], 1e-15)?;

    let mut cfg = RunConfig::default();
    cfg.model.width_factor = 1.0 / 16.0;
    cfg.train.learning_rate = 0.0;
    cfg.train.epochs = 1;
    cfg.train.batch_size = 2;
    cfg.data.synthetic_size = 32;
    cfg.data.synthetic_train = 2;
    let data = prepare_data(&cfg).map_err(e)?;
    let mut fresh = ParamStore::<f32>::new();
    ChangeDetector::new(&cfg.model, &mut fresh, cfg.seed).map_err(e)?;
    let out = train(&cfg, &data.train, &[], None, |_| {}).map_err(e)?;
    for ((_, a), (_, b)) in fresh.iter().zip(out.last.iter()) {
        let same = a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, || format!("{} moved with zero learning rate", a.name))?;
    }
    Ok(())
}

fn augment_examples() -> Outcome {
    let p = generate_synthetic_pair(29, 32, Difficulty::Easy);
    let id = augment(&p, &AugmentConfig::disabled(), 1).map_err(e)?;
    ensure(id == p, || "disabled augmentation changed the pair".into())?;
    let twice = flip_horizontal(&flip_horizontal(&p.t1).map_err(e)?).map_err(e)?;
    ensure(twice == p.t1, || "flip is not an involution".into())?;
    let cfg = AugmentConfig::default();
    let a = augment(&p, &cfg, 30).map_err(e)?;
    let b = augment(&p, &cfg, 30).map_err(e)?;
    ensure(a == b, || "replay differs".into())
}

// ---- data -----------------------------------------------------------------

fn synthetic_examples() -> Outcome {
    let a = generate_synthetic_pair(31, 64, Difficulty::Easy);
    ensure(a == generate_synthetic_pair(31, 64, Difficulty::Easy), || "not deterministic".into())?;
    let none = generate_synthetic_pair(32, 64, Difficulty::None);
    ensure(none.t1 == none.t2 && none.label.data().iter().all(|&v| v == 0.0), || "none difficulty".into())?;
    for seed in 0..10 {
        let p = generate_synthetic_pair(seed, 64, Difficulty::Easy);
        let count = p.label.data().iter().filter(|&&v| v == 1.0).count();
        let frac = count as f64 / 4096.0;
        ensure((0.05..=0.30).contains(&frac), || format!("seed {seed}: change fraction {frac}"))?;
    }
    Ok(())
}

fn write_fixture(root: &Path, name: &str, size: u32) -> Outcome {
    for sub in ["A", "B", "label"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(e)?;
        let path = dir.join(name);
        if sub == "label" {
            GrayImage::new(size, size).save(&path).map_err(e)?;
        } else {
            RgbImage::new(size, size).save(&path).map_err(e)?;
        }
    }
    Ok(())
}

fn tiling_examples(scratch: &Path) -> Outcome {
    for (size, want) in [(1024, 16), (512, 4), (300, 1)] {
        let root = scratch.join(format!("tiles{size}"));
        write_fixture(&root.join("train"), "img.png", size)?;
        let split = tile_dataset(&root, 256).map_err(e)?;
        ensure(split.train.len() == want, || format!("{size}² gave {} patches", split.train.len()))?;
    }
    Ok(())
}

fn round_trip_example(scratch: &Path) -> Outcome {
    let pair = generate_synthetic_pair(33, 64, Difficulty::Hard);
    let root = scratch.join("roundtrip");
    write_pair(&root, &pair).map_err(e)?;
    let back = read_pair(&root, &pair.id).map_err(e)?;
    ensure(back == pair, || "reloaded pair differs".into())
}

// ---- metrics --------------------------------------------------------------

fn metric_examples() -> Outcome {
    let ones = vec![1u8; 10];
    ensure(confusion(&ones, &ones).map_err(e)? == ConfusionStats::new(10, 0, 0, 0), || "perfect".into())?;
    let gt: Vec<u8> = (0..10).map(|i| u8::from(i % 2 == 0)).collect();
    let inv: Vec<u8> = gt.iter().map(|v| 1 - v).collect();
    let s = confusion(&inv, &gt).map_err(e)?;
    ensure(s.tp == 0 && s.tn == 0, || "complement".into())?;
    let pred = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
    let gt = [1, 1, 1, 0, 1, 0, 0, 0, 0, 0];
    let s = confusion(&pred, &gt).map_err(e)?;
    ensure(s == ConfusionStats::new(3, 1, 1, 5), || format!("hand case {s:?}"))?;
    let sc = scores(&s).map_err(e)?;
    close(&[sc.precision, sc.recall, sc.f1, sc.iou, sc.oa], &[0.75, 0.75, 0.75, 0.6, 0.8], 1e-12)?;
    let p = scores(&ConfusionStats::new(5, 0, 0, 5)).map_err(e)?;
    close(&[p.precision, p.recall, p.f1, p.iou, p.oa], &[1.0; 5], 0.0)?;
    ensure(format!("{:.2}", f1_from(91.97, 91.85)) == "91.91", || "published F1".into())?;

    let img = render_confusion_map(&gt, &gt, (2, 5)).map_err(e)?;
    ensure(img.pixels().all(|p| p.0 == TP_COLOR || p.0 == TN_COLOR), || "perfect render".into())?;
    let red = render_confusion_map(&[1; 4], &[0; 4], (2, 2)).map_err(e)?;
    ensure(red.pixels().all(|p| p.0 == FP_COLOR), || "all-FP render".into())?;
    let hand = render_confusion_map(&pred, &gt, (2, 5)).map_err(e)?;
    let expected = [[255, 255, 255], [255, 255, 255], [255, 255, 255], [255, 0, 0], [0, 255, 0]];
    for (i, want) in expected.iter().enumerate() {
        ensure(hand.get_pixel(i as u32, 0).0 == *want, || format!("pixel {i}"))?;
    }
    ensure(hand.pixels().skip(5).all(|p| p.0 == [0, 0, 0]), || "second row".into())
}

/// Runs every check. `scratch` receives the on-disk fixtures.
pub fn run(scratch: &Path) -> Vec<CheckResult> {
    let checks: Vec<(&'static str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("tensor.matmul", Box::new(matmul_examples)),
        ("tensor.softmax", Box::new(softmax_examples)),
        ("tensor.conv2d", Box::new(conv_examples)),
        ("tensor.resize", Box::new(resize_examples)),
        ("tensor.global_avg_pool", Box::new(pooling_examples)),
        ("tensor.backward", Box::new(autodiff_examples)),
        ("tensor.checkpoint", Box::new(checkpoint_example)),
        ("backbone.extract", Box::new(backbone_examples)),
        ("relation.attention", Box::new(attention_examples)),
        ("relation.fuse", Box::new(fuse_examples)),
        ("relation.level", Box::new(relation_level_examples)),
        ("scale.difference", Box::new(difference_examples)),
        ("scale.channel_gate", Box::new(gate_examples)),
        ("scale.reweight", Box::new(reweight_examples)),
        ("cross.ctb", Box::new(ctb_examples)),
        ("cross.classifier_head", Box::new(head_examples)),
        ("train.forward", Box::new(model_examples)),
        ("train.loss", Box::new(loss_examples)),
        ("train.optimizer", Box::new(optimizer_examples)),
        ("train.augment", Box::new(augment_examples)),
        ("data.synthetic", Box::new(synthetic_examples)),
        ("data.tiling", Box::new(move || tiling_examples(scratch))),
        ("data.round_trip", Box::new(move || round_trip_example(scratch))),
        ("metrics", Box::new(metric_examples)),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let outcome = f();
            CheckResult {
                name,
                passed: outcome.is_ok(),
                detail: outcome.err().unwrap_or_default(),
            }
        })
        .collect()
}
