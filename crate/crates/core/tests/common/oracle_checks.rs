//! Tape ops and modules against the plain-loop references. Each check panics
//! on the first mismatch.

use cdnet_core::cross_transformer::{ctb, ClassifierHead, CtbProjections, CTB_EPS};
use cdnet_core::gradcheck::random_tensor;
use cdnet_core::nn::{group_count, Conv2d, Init};
use cdnet_core::oracle::{self, Map};
use cdnet_core::relation_aware::{attention, fuse, AttentionProjections, FuseBlock, RelationAwareLevel};
use cdnet_core::scale_aware::{channel_gate, reweight};
use cdnet_core::tensor::NORM_EPS;
use cdnet_core::{Graph, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-10;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    random_tensor(shape, -1.0, 1.0, rng)
}

fn map(t: &Tensor<f64>) -> Map {
    let s = t.shape();
    Map::new(s[0], s[1], s[2], t.data().to_vec())
}

fn param(store: &ParamStore<f64>, id: ParamId) -> Vec<f64> {
    store.get(id).tensor.data().to_vec()
}

fn assert_close(got: &[f64], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (i, (a, b)) in got.iter().zip(want).enumerate() {
        assert!((a - b).abs() <= tol, "{what}[{i}]: {a} vs {b}");
    }
}

/// Randomises every parameter so zero-initialised biases and unit gains are
/// exercised too.
fn scramble(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
}

pub fn matmul_and_transpose() {
    let mut r = rng(1);
    for _ in 0..20 {
        let (m, k, n) = (r.gen_range(1..6), r.gen_range(1..6), r.gen_range(1..6));
        let a = rand_t(&[m, k], &mut r);
        let b = rand_t(&[k, n], &mut r);
        let mut g = Graph::<f64>::new();
        let (va, vb) = (g.input(&a), g.input(&b));
        let c = g.matmul(va, vb).unwrap();
        assert_close(g.value(c), &oracle::matmul(a.data(), b.data(), m, k, n), TOL, "matmul");
        let t = g.transpose(va).unwrap();
        assert_close(g.value(t), &oracle::transpose(a.data(), m, k), 0.0, "transpose");
    }
}

pub fn softmax_rows_match_and_normalise() {
    let mut r = rng(2);
    for _ in 0..20 {
        let (rows, cols) = (r.gen_range(1..6), r.gen_range(1..6));
        let x = random_tensor(&[rows, cols], -20.0, 20.0, &mut r);
        let mut g = Graph::<f64>::new();
        let v = g.input(&x);
        let s = g.softmax_rows(v).unwrap();
        assert_close(g.value(s), &oracle::softmax_rows(x.data(), cols), TOL, "softmax");
        for row in g.value(s).chunks(cols) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

pub fn conv2d_matches_direct_loops() {
    let mut r = rng(3);
    for case in 0..30 {
        let k = [1, 3, 5][case % 3];
        let stride = 1 + case % 2;
        let (ci, co) = (r.gen_range(1..4), r.gen_range(1..4));
        let (h, w) = (r.gen_range(k..9), r.gen_range(k..9));
        let x = rand_t(&[ci, h, w], &mut r);
        let wt = rand_t(&[co, ci, k, k], &mut r);
        let b = rand_t(&[co], &mut r);
        let mut g = Graph::<f64>::new();
        let (vx, vw, vb) = (g.input(&x), g.input(&wt), g.input(&b));
        let y = g.conv2d(vx, vw, Some(vb), stride, k / 2).unwrap();
        let want = oracle::conv2d(&map(&x), wt.data(), Some(b.data()), co, k, stride, k / 2);
        assert_eq!(g.shape(y), &[co, want.h, want.w]);
        assert_close(g.value(y), &want.data, TOL, "conv2d");
    }
}

pub fn bilinear_matches_four_weight_form() {
    let mut r = rng(4);
    for _ in 0..30 {
        let (c, h, w) = (r.gen_range(1..3), r.gen_range(1..7), r.gen_range(1..7));
        let (oh, ow) = (r.gen_range(1..12), r.gen_range(1..12));
        let x = rand_t(&[c, h, w], &mut r);
        let mut g = Graph::<f64>::new();
        let v = g.input(&x);
        let y = g.resize(v, (oh, ow)).unwrap();
        assert_close(g.value(y), &oracle::bilinear(&map(&x), oh, ow).data, 1e-12, "resize");
    }
}

pub fn pooling_and_group_norm() {
    let mut r = rng(5);
    for c in [1, 3, 6, 8, 12, 16] {
        let x = rand_t(&[c, 3, 4], &mut r);
        let gamma = rand_t(&[c], &mut r);
        let beta = rand_t(&[c], &mut r);
        let mut g = Graph::<f64>::new();
        let (vx, vg, vb) = (g.input(&x), g.input(&gamma), g.input(&beta));
        let p = g.global_avg_pool(vx).unwrap();
        assert_close(g.value(p), &oracle::global_avg_pool(&map(&x)), 1e-12, "gap");
        let groups = group_count(c);
        let n = g.group_norm(vx, vg, vb, groups).unwrap();
        let want = oracle::group_norm(&map(&x), gamma.data(), beta.data(), groups, NORM_EPS);
        assert_close(g.value(n), &want.data, TOL, "group_norm");
    }
}

pub fn attention_and_fuse_on_tiny_instances() {
    let mut r = rng(6);
    for inst in 0..100u64 {
        let (t, c) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let scale = if inst % 2 == 0 { 1.0 } else { 1.0 / (c as f64).sqrt() };
        let mut store = ParamStore::<f64>::new();
        let proj = AttentionProjections::new(&mut Init::new(&mut store, inst), "p", c).unwrap();
        let fi = rand_t(&[t, c], &mut r);
        let fj = rand_t(&[t, c], &mut r);
        let mut g = Graph::with_params(&store);
        let (vi, vj) = (g.input(&fi), g.input(&fj));
        let s = (inst % 2 == 1).then_some(scale);
        let a = attention(&mut g, vi, vj, vj, s).unwrap();
        let want = oracle::attention(fi.data(), fj.data(), fj.data(), t, c, scale);
        assert_close(g.value(a), &want, TOL, "attention");

        let f = fuse(&mut g, vi, vj, &proj, &proj, s).unwrap();
        let p = oracle::Projections {
            w_q: param(&store, proj.w_q),
            w_k: param(&store, proj.w_k),
            w_v: param(&store, proj.w_v),
        };
        assert_close(g.value(f), &oracle::fuse(fi.data(), fj.data(), &p, t, c, scale), TOL, "fuse");
    }
}

fn block_weights(store: &ParamStore<f64>, b: &FuseBlock) -> oracle::FuseBlockWeights {
    oracle::FuseBlockWeights {
        proj: oracle::Projections {
            w_q: param(store, b.proj.w_q),
            w_k: param(store, b.proj.w_k),
            w_v: param(store, b.proj.w_v),
        },
        conv_w: param(store, b.conv.weight),
        conv_b: param(store, b.conv.bias.unwrap()),
        gamma: param(store, b.norm.gamma),
        beta: param(store, b.norm.beta),
        groups: b.norm.groups,
    }
}

pub fn relation_aware_level_matches_composition() {
    let mut r = rng(7);
    for inst in 0..100u64 {
        let c = r.gen_range(1..=4);
        let (h, w) = [(1, 1), (1, 2), (2, 1), (2, 2), (1, 4), (4, 1)][inst as usize % 6];
        let scaled = inst % 3 == 0;
        let mut store = ParamStore::<f64>::new();
        let level = RelationAwareLevel::new(&mut Init::new(&mut store, inst), "ra", c, scaled).unwrap();
        scramble(&mut store, &mut r);
        let fx = rand_t(&[c, h, w], &mut r);
        let fy = rand_t(&[c, h, w], &mut r);
        let mut g = Graph::with_params(&store);
        let (vx, vy) = (g.input(&fx), g.input(&fy));
        let (ex, ey) = level.forward(&mut g, vx, vy).unwrap();
        let scale = if scaled { 1.0 / (c as f64).sqrt() } else { 1.0 };
        let (wx, wy) = oracle::relation_aware(
            &map(&fx),
            &map(&fy),
            &block_weights(&store, &level.cross),
            &block_weights(&store, &level.cross_self),
            scale,
            NORM_EPS,
        );
        assert_close(g.value(ex), &wx.data, TOL, "relation x");
        assert_close(g.value(ey), &wy.data, TOL, "relation y");
    }
}

pub fn scale_aware_gate_and_reweight() {
    let mut r = rng(8);
    for inst in 0..50u64 {
        let (cn, cm) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let (hn, hm) = [(4, 2), (2, 2), (2, 4), (4, 1)][inst as usize % 4];
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(&mut store, inst);
        let gate = Conv2d::new(&mut init, "gate", (cn, cn), 1, 1, true).unwrap();
        let proj = Conv2d::new(&mut init, "proj", (cm, cn), 1, 1, false).unwrap();
        scramble(&mut store, &mut r);
        let dn = random_tensor(&[cn, hn, hn], 0.0, 1.0, &mut r);
        let dm = random_tensor(&[cm, hm, hm], 0.0, 1.0, &mut r);
        let mut g = Graph::with_params(&store);
        let (vn, vm) = (g.input(&dn), g.input(&dm));
        let u = channel_gate(&mut g, &gate, vn).unwrap();
        let gw = param(&store, gate.weight);
        let want_u = oracle::channel_gate(&map(&dn), &gw, &param(&store, gate.bias.unwrap()));
        assert_close(g.value(u), &want_u, TOL, "gate");
        assert!(g.value(u).iter().all(|&x| x > 0.0 && x < 1.0));
        let y = reweight(&mut g, &proj, vm, (hn, hn), Some(u)).unwrap();
        let want = oracle::reweight(&map(&dm), &param(&store, proj.weight), cn, (hn, hn), Some(&want_u));
        assert_close(g.value(y), &want.data, TOL, "reweight");
    }
}

fn ctb_weights(store: &ParamStore<f64>, p: &CtbProjections) -> oracle::CtbWeights {
    oracle::CtbWeights {
        w_q: param(store, p.w_q.weight),
        w_k: std::array::from_fn(|m| param(store, p.w_k[m].weight)),
        w_v: std::array::from_fn(|m| param(store, p.w_v[m].weight)),
    }
}

pub fn ctb_matches_scalar_arithmetic() {
    let mut r = rng(9);
    let mut checked = 0;
    for inst in 0..100u64 {
        let c = r.gen_range(1..=4);
        let hw = r.gen_range(1..=2);
        let mut store = ParamStore::<f64>::new();
        let proj = CtbProjections::new(&mut Init::new(&mut store, inst), "ctb", c).unwrap();
        let maps: Vec<Tensor<f64>> = (0..4).map(|_| rand_t(&[c, hw, hw], &mut r)).collect();
        let mut g = Graph::with_params(&store);
        let v: Vec<_> = maps.iter().map(|m| g.input(m)).collect();
        let out = ctb(&mut g, [v[0], v[1], v[2], v[3]], &proj).unwrap();
        let inputs: [Map; 4] = std::array::from_fn(|m| map(&maps[m]));
        let want = oracle::ctb(&inputs, &ctb_weights(&store, &proj), CTB_EPS);
        assert_eq!(out.fallback, want.fallback);
        // The ratio amplifies rounding by |β|; compare relative to it.
        let amp = want.betas.iter().map(|b| b.abs()).fold(1.0, f64::max);
        for m in 0..4 {
            assert!((g.value(out.betas[m])[0] - want.betas[m]).abs() <= TOL * amp, "beta {m}");
        }
        assert_close(g.value(out.fused), &want.fused.data, TOL * amp, "ctb fused");
        if !want.fallback {
            // Σβ = Σs / (Σs + ε) exactly.
            let total: f64 = want.scores.iter().sum();
            let sum: f64 = (0..4).map(|m| g.value(out.betas[m])[0]).sum();
            assert!((sum - total / (total + CTB_EPS)).abs() < 1e-12 * amp);
        }
        checked += 1;
    }
    assert_eq!(checked, 100);
}

pub fn classifier_head_matches_composition() {
    let mut r = rng(10);
    for inst in 0..20u64 {
        let widths = [r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=3)];
        let mut store = ParamStore::<f64>::new();
        let head = ClassifierHead::new(&mut Init::new(&mut store, inst), widths).unwrap();
        scramble(&mut store, &mut r);
        let sizes = [4, 2, 2, 2];
        let maps: Vec<Tensor<f64>> = (0..4).map(|n| rand_t(&[widths[n], sizes[n], sizes[n]], &mut r)).collect();
        let mut g = Graph::with_params(&store);
        let v: Vec<_> = maps.iter().map(|m| g.input(m)).collect();
        let p = head.forward(&mut g, [v[0], v[1], v[2], v[3]], (8, 8)).unwrap();
        let fused: [Map; 4] = std::array::from_fn(|n| map(&maps[n]));
        let want = oracle::classifier_head(
            &fused,
            &param(&store, head.conv.weight),
            &param(&store, head.conv.bias.unwrap()),
            (8, 8),
        );
        assert_close(g.value(p), &want.data, TOL, "head");
    }
}

pub fn bce_matches_closed_form() {
    let mut r = rng(11);
    for _ in 0..20 {
        let p1 = random_tensor(&[3, 3], 0.0, 1.0, &mut r);
        let mut data = p1.data().iter().map(|v| 1.0 - v).collect::<Vec<_>>();
        data.extend_from_slice(p1.data());
        let p = Tensor::new(vec![2, 3, 3], data).unwrap();
        let label = Tensor::from_fn(vec![3, 3], |_| f64::from(u8::from(r.gen_bool(0.5))));
        let mut g = Graph::<f64>::new();
        let vp = g.input(&p);
        let l = g.binary_cross_entropy(vp, &label).unwrap();
        let want = oracle::bce(p1.data(), label.data(), 1e-7);
        assert!((g.scalar_value(l) - want).abs() < 1e-12);
    }
}
