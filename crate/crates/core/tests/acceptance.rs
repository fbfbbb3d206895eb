//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test --release -p cdnet-core --test acceptance` runs everything;
//! append `-- 3 5` to run a subset by number.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use cdnet_core::config::{AugmentConfig, Toggles};
use cdnet_core::cross_transformer::CTB_EPS;
use cdnet_core::dataset::{tile_dataset, write_pair};
use cdnet_core::gradcheck::random_tensor;
use cdnet_core::gradsuite;
use cdnet_core::metrics::{f1_from, scores};
use cdnet_core::nn::to_tokens;
use cdnet_core::relation_aware::RelationAwareLevel;
use cdnet_core::train::{evaluate, parse_log, prepare_data, train, BEST_CHECKPOINT, TRAIN_LOG};
use cdnet_core::{
    ChangeDetector, ChangePair, Checkpoint, ConfusionStats, Graph, NetworkConfig, ParamStore, RunConfig, Tensor,
    Var,
};
use common::oracle_checks;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---- 1 -------------------------------------------------------------------

fn gradient_suite() -> Check {
    let start = Instant::now();
    let results = gradsuite::run(20, None, |_| {}).map_err(err)?;
    let elapsed = start.elapsed();
    ensure(results.len() == gradsuite::case_names().len(), || "not every case ran".into())?;
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .ok_or("no cases")?;
    let failing: Vec<_> = results.iter().filter(|r| !(r.max_rel_err < 1e-4)).map(|r| r.name).collect();
    ensure(failing.is_empty(), || format!("rel err ≥ 1e-4 in {failing:?}"))?;
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} cases x 20 seeds, worst {} {:.2e}, {:.1}s",
        results.len(),
        worst.name,
        worst.max_rel_err,
        elapsed.as_secs_f64()
    ))
}

// ---- 2 -------------------------------------------------------------------

fn siamese_collapse() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let grid = Toggles::ablation_grid();
    for seed in 0..50u64 {
        let mut cfg = NetworkConfig::default();
        cfg.set_toggles(grid[seed as usize % grid.len()]);
        let mut store = ParamStore::<f64>::new();
        let model = ChangeDetector::new(&cfg, &mut store, seed).map_err(err)?;
        let x = random_tensor(&[3, 32, 32], 0.0, 1.0, &mut r);
        let mut g = Graph::with_params(&store);
        let (vx, vy) = (g.input(&x), g.input(&x));
        let trace = model.forward(&mut g, vx, vy).map_err(err)?;
        for (n, d) in trace.diffs.iter().enumerate() {
            ensure(g.value(*d).iter().all(|&v| v == 0.0), || format!("init {seed}: D_{} not zero", n + 1))?;
        }
        let p = g.tensor(trace.prob);
        let plane = p.shape()[1] * p.shape()[2];
        for ch in p.data().chunks(plane) {
            ensure(ch.iter().all(|&v| v == ch[0]), || format!("init {seed}: P not constant"))?;
        }
    }
    Ok("50 inits over all toggle combinations: D exactly 0, P constant".into())
}

// ---- 3 -------------------------------------------------------------------

fn attention_oracles() -> Check {
    oracle_checks::attention_and_fuse_on_tiny_instances();
    oracle_checks::relation_aware_level_matches_composition();
    oracle_checks::ctb_matches_scalar_arithmetic();
    oracle_checks::softmax_rows_match_and_normalise();
    oracle_checks::scale_aware_gate_and_reweight();
    oracle_checks::classifier_head_matches_composition();
    Ok("relation-aware and CTB match loop oracles on 100 instances each at 1e-10".into())
}

// ---- 4 -------------------------------------------------------------------

#[derive(Default)]
struct NormStats {
    softmax: f64,
    prob: f64,
    beta: f64,
    fallbacks: usize,
    betas_checked: usize,
    gate_min: f64,
    gate_max: f64,
    rows: usize,
}

fn row_sum_dev(values: &[f64], width: usize) -> f64 {
    values
        .chunks(width)
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Recomputes every attention weight matrix of one level at the inputs the
/// model saw.
fn attention_rows(g: &mut Graph<'_, f64>, level: &RelationAwareLevel, fx: Var, fy: Var, st: &mut NormStats) {
    let c = g.shape(fx)[0];
    let scale = if level.scaled { 1.0 / (c as f64).sqrt() } else { 1.0 };
    let cx = level.cross.forward(g, fx, fy, level.scaled.then_some(scale)).unwrap();
    let cy = level.cross.forward(g, fy, fx, level.scaled.then_some(scale)).unwrap();
    for (block, pairs) in [(&level.cross, [(fx, fy), (fy, fx)]), (&level.cross_self, [(cx, fx), (cy, fy)])] {
        for (i, j) in pairs {
            let (ti, tj) = (to_tokens(g, i).unwrap(), to_tokens(g, j).unwrap());
            let q = block.proj.query(g, ti).unwrap();
            for src in [ti, tj] {
                let k = block.proj.key(g, src).unwrap();
                let kt = g.transpose(k).unwrap();
                let logits = g.matmul(q, kt).unwrap();
                let logits = g.scale(logits, scale);
                let w = g.softmax_rows(logits).unwrap();
                let t = g.shape(w)[1];
                st.softmax = st.softmax.max(row_sum_dev(g.value(w), t));
                st.rows += g.shape(w)[0];
            }
        }
    }
}

fn normalisation() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut st = NormStats {
        gate_min: f64::INFINITY,
        gate_max: f64::NEG_INFINITY,
        ..Default::default()
    };
    for seed in 0..10u64 {
        let mut cfg = NetworkConfig::default();
        cfg.attention_scaling = seed % 2 == 1;
        let mut store = ParamStore::<f64>::new();
        let model = ChangeDetector::new(&cfg, &mut store, 100 + seed).map_err(err)?;
        let x = random_tensor(&[3, 64, 64], 0.0, 1.0, &mut r);
        let y = random_tensor(&[3, 64, 64], 0.0, 1.0, &mut r);
        let mut g = Graph::with_params(&store);
        let (vx, vy) = (g.input(&x), g.input(&y));
        let trace = model.forward(&mut g, vx, vy).map_err(err)?;

        let p = g.tensor(trace.prob);
        let plane = p.shape()[1] * p.shape()[2];
        let d = p.data();
        for i in 0..plane {
            st.prob = st.prob.max((d[i] + d[plane + i] - 1.0).abs());
        }
        for u in trace.gates.iter().flatten() {
            for &v in g.value(*u) {
                st.gate_min = st.gate_min.min(v);
                st.gate_max = st.gate_max.max(v);
            }
        }
        for out in trace.ctb.iter().flatten() {
            if out.fallback {
                st.fallbacks += 1;
                continue;
            }
            let sum: f64 = out.betas.iter().map(|b| g.value(*b)[0]).sum();
            st.beta = st.beta.max((sum - 1.0).abs());
            st.betas_checked += 1;
        }
        let ra = model.relation.as_ref().ok_or("full model has no relation-aware module")?;
        for n in 0..4 {
            attention_rows(&mut g, &ra.levels[n], trace.features_x[n], trace.features_y[n], &mut st);
        }
    }
    ensure(st.softmax <= 1e-6, || format!("softmax row sum off by {:e}", st.softmax))?;
    ensure(st.prob <= 1e-6, || format!("P sum off by {:e}", st.prob))?;
    ensure(st.beta <= 1e-6, || format!("β sum off by {:e}", st.beta))?;
    ensure(st.gate_min > 0.0 && st.gate_max < 1.0, || {
        format!("U outside (0,1): [{}, {}]", st.gate_min, st.gate_max)
    })?;
    Ok(format!(
        "10 passes: softmax dev {:.1e} over {} rows, P dev {:.1e}, β dev {:.1e} over {} blocks ({} fallbacks), U in [{:.3}, {:.3}] (ε = {CTB_EPS:e})",
        st.softmax, st.rows, st.prob, st.beta, st.betas_checked, st.fallbacks, st.gate_min, st.gate_max
    ))
}

// ---- 5 -------------------------------------------------------------------

fn metric_oracle() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut tested = 0;
    while tested < 1000 {
        let s = ConfusionStats::new(
            r.gen_range(0..5000),
            r.gen_range(0..5000),
            r.gen_range(0..5000),
            r.gen_range(0..50000),
        );
        let (tp, fp, fn_, tn) = (s.tp as f64, s.fp as f64, s.fn_ as f64, s.tn as f64);
        if tp == 0.0 || s.total() == 0 {
            continue;
        }
        let sc = scores(&s).map_err(err)?;
        let want = [
            tp / (tp + fp),
            tp / (tp + fn_),
            2.0 * tp / (2.0 * tp + fp + fn_),
            tp / (tp + fp + fn_),
            (tp + tn) / (tp + fp + fn_ + tn),
        ];
        let got = [sc.precision, sc.recall, sc.f1, sc.iou, sc.oa];
        for (k, (a, b)) in got.iter().zip(&want).enumerate() {
            ensure((a - b).abs() <= 1e-12, || format!("{s:?}: score {k} {a} vs {b}"))?;
        }
        ensure(sc.iou <= sc.f1, || format!("{s:?}: IoU > F1"))?;
        tested += 1;
    }
    let f1 = format!("{:.2}", f1_from(91.97, 91.85));
    ensure(f1 == "91.91", || format!("F1 from 91.97/91.85 gave {f1}"))?;
    Ok(format!("{tested} random tables at 1e-12, IoU ≤ F1, F1(91.97, 91.85) = {f1}"))
}

// ---- 6 -------------------------------------------------------------------

fn overfit() -> Check {
    let mut cfg = RunConfig::default();
    cfg.augment = AugmentConfig::disabled();
    cfg.data.synthetic_val = 0;
    cfg.data.synthetic_test = 0;
    ensure(cfg.model.width_factor == 0.125 && cfg.train.epochs == 200, || "unexpected defaults".into())?;
    let start = Instant::now();
    let data = prepare_data(&cfg).map_err(err)?;
    ensure(data.train.len() == 8 && data.train[0].size() == (64, 64), || "expected 8 pairs of 64x64".into())?;
    let out = train(&cfg, &data.train, &[], None, |_| {}).map_err(err)?;
    let e = evaluate(&out.model, &out.last, &data.train).map_err(err)?;
    let elapsed = start.elapsed();
    let detail = format!(
        "train F1 {:.4}, final loss {:.4}, {:.0}s",
        e.f1(),
        e.loss,
        elapsed.as_secs_f64()
    );
    ensure(e.f1() >= 0.95 && e.loss < 0.05 && elapsed < Duration::from_secs(900), || detail.clone())?;
    Ok(detail)
}

// ---- 7 -------------------------------------------------------------------

fn ablation() -> Check {
    let mut base = RunConfig::default();
    base.data.synthetic_train = 48;
    base.data.synthetic_val = 8;
    base.data.synthetic_test = 8;
    base.train.epochs = 60;
    base.train.decay_every = 40;
    let data = prepare_data(&base).map_err(err)?;
    let mut f1 = Vec::new();
    for t in Toggles::ablation_grid() {
        let mut cfg = base.clone();
        cfg.model.set_toggles(t);
        let out = train(&cfg, &data.train, &data.val, None, |_| {}).map_err(|e| format!("{}: {e}", t.label()))?;
        let e = evaluate(&out.model, &out.best, &data.test).map_err(err)?;
        f1.push((t, e.f1()));
    }
    let table = f1
        .iter()
        .map(|(t, v)| format!("{} {:.4}", t.label(), v))
        .collect::<Vec<_>>()
        .join(", ");
    let full = f1.iter().find(|(t, _)| t.relation_aware && t.scale_aware && t.cross_transformer).unwrap().1;
    let beaten: Vec<_> = f1
        .iter()
        .filter(|(t, _)| [t.relation_aware, t.scale_aware, t.cross_transformer].iter().filter(|&&b| b).count() == 2)
        .filter(|(_, v)| *v > full)
        .map(|(t, _)| t.label())
        .collect();
    let detail = format!("test F1: {table}");
    ensure(beaten.is_empty(), || format!("full model beaten by {beaten:?}; {detail}"))?;
    Ok(format!("all seven ran; {detail}"))
}

// ---- 8 -------------------------------------------------------------------

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut cfg = RunConfig::default();
    cfg.data.synthetic_train = 4;
    cfg.data.synthetic_val = 2;
    cfg.data.synthetic_test = 0;
    cfg.train.epochs = 4;
    let data = prepare_data(&cfg).map_err(err)?;
    let mut logs = Vec::new();
    let mut outcomes = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        outcomes.push(train(&cfg, &data.train, &data.val, Some(&out_dir), |_| {}).map_err(err)?);
        logs.push(std::fs::read_to_string(out_dir.join(TRAIN_LOG)).map_err(err)?);
    }
    ensure(logs[0] == logs[1], || "epoch logs differ".into())?;
    ensure(parse_log(&logs[0]).map_err(err)?.len() == 4, || "log has wrong epoch count".into())?;

    let path = dir.path().join("a").join(BEST_CHECKPOINT);
    let bytes = std::fs::read(&path).map_err(err)?;
    let ckpt = Checkpoint::load(&path).map_err(err)?;
    ensure(ckpt.to_bytes() == bytes, || "re-encoding changed the checkpoint".into())?;
    let restored: ParamStore<f32> = ckpt.to_store().map_err(err)?;
    let original = &outcomes[0].best;
    ensure(restored.len() == original.len(), || "parameter count differs".into())?;
    for ((_, a), (_, b)) in restored.iter().zip(original.iter()) {
        let same = a.name == b.name
            && a.tensor.shape() == b.tensor.shape()
            && a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, || format!("parameter {} differs after reload", a.name))?;
    }
    Ok(format!("identical 4-epoch logs; {} parameters restored bit-exact", restored.len()))
}

// ---- 9 -------------------------------------------------------------------

fn tiling() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut counts = Vec::new();
    for (size, want) in [(1024, 16), (300, 1)] {
        let root = dir.path().join(format!("d{size}"));
        let pair = ChangePair::new(
            "scene",
            Tensor::zeros(vec![3, size, size]),
            Tensor::zeros(vec![3, size, size]),
            Tensor::zeros(vec![size, size]),
        )
        .map_err(err)?;
        write_pair(&root.join("test"), &pair).map_err(err)?;
        let n = tile_dataset(&root, 256).map_err(err)?.test.len();
        ensure(n == want, || format!("{size}x{size} gave {n} patches, want {want}"))?;
        counts.push(format!("{size}x{size} -> {n}"));
    }
    Ok(counts.join(", "))
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panic".into())
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let selected: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, fn() -> Check); 9] = [
        ("gradient suite", gradient_suite),
        ("siamese collapse", siamese_collapse),
        ("attention oracles", attention_oracles),
        ("normalisation invariants", normalisation),
        ("metric oracle", metric_oracle),
        ("synthetic overfit", overfit),
        ("ablation ordering", ablation),
        ("determinism", determinism),
        ("tiling", tiling),
    ];
    let mut failed = Vec::new();
    let mut ran = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| Err(panic_message(p)));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {n} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                println!("FAIL {n} {name}: {detail} [{secs:.1}s]");
                failed.push(n);
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
