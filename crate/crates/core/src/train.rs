//! Optimiser, training loop, evaluation and checkpoint handling.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::augment;
use crate::config::{RunConfig, Selection, TrainConfig};
use crate::dataset::{tile_dataset, ChangePair, SyntheticGenerator};
use crate::error::{Error, Result};
use crate::metrics::{confusion, scores, ConfusionStats};
use crate::model::{change_map, ChangeDetector};
use crate::tensor::{Checkpoint, Graph, ParamStore, Scalar, Tensor};

/// SGD with momentum and L2 weight decay:
/// `g = c∇ + λw`, `v = μv + g`, `w = w − ηv`, where `c ≤ 1` rescales the
/// gradient to the optional global norm bound.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale the gradient so its global L2 norm is at most this.
    pub max_grad_norm: Option<f64>,
    /// Global gradient norm seen by the last step, before clipping.
    pub last_grad_norm: f64,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            max_grad_norm: None,
            last_grad_norm: 0.0,
            velocity: Vec::new(),
        }
    }

    /// Updates every parameter that holds a gradient, then clears gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let norm = store
            .iter()
            .filter_map(|(_, p)| p.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt();
        self.last_grad_norm = norm;
        let clip = match self.max_grad_norm {
            Some(max) if norm > max => T::from_f64_lossy(max / norm),
            _ => T::one(),
        };
        let (lr, mu, wd) = (T::from_f64_lossy(lr), T::from_f64_lossy(self.momentum), T::from_f64_lossy(self.weight_decay));
        for (p, vel) in store.iter_mut().zip(self.velocity.iter_mut()) {
            let Some(grad) = p.tensor.grad().map(<[T]>::to_vec) else {
                continue;
            };
            let v = vel.get_or_insert_with(|| vec![T::zero(); grad.len()]);
            for ((w, g), v) in p.tensor.data_mut().iter_mut().zip(&grad).zip(v.iter_mut()) {
                let g = clip * *g + wd * *w;
                *v = mu * *v + g;
                *w = *w - lr * *v;
            }
            p.tensor.zero_grad();
        }
    }
}

/// Step-decayed learning rate for a zero-based epoch.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.learning_rate * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

/// Mean binary cross-entropy of the change channel against `label`.
pub fn pair_loss<T: Scalar>(g: &mut Graph<'_, T>, model: &ChangeDetector, pair: &ChangePair) -> Result<(crate::Var, crate::Var)> {
    let x = g.input(&pair.t1.cast());
    let y = g.input(&pair.t2.cast());
    let trace = model.forward(g, x, y)?;
    let loss = g.binary_cross_entropy(trace.prob, &pair.label.cast())?;
    Ok((loss, trace.prob))
}

#[derive(Debug, Clone)]
pub struct PairResult {
    pub id: String,
    pub loss: f64,
    pub stats: ConfusionStats,
    pub prediction: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub stats: ConfusionStats,
    pub pairs: Vec<PairResult>,
}

impl Evaluation {
    pub fn f1(&self) -> f64 {
        scores(&self.stats).map(|s| s.f1).unwrap_or(0.0)
    }
}

/// Loss and micro-averaged confusion over `pairs`, without augmentation.
pub fn evaluate<T: Scalar>(model: &ChangeDetector, store: &ParamStore<T>, pairs: &[ChangePair]) -> Result<Evaluation> {
    let mut total = ConfusionStats::default();
    let mut loss_sum = 0.0;
    let mut results = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let mut g = Graph::with_params(store);
        let (loss, prob) = pair_loss(&mut g, model, pair)?;
        let loss = g.scalar_value(loss).as_f64();
        let prediction = change_map(&g.tensor(prob));
        let stats = confusion(&prediction, &pair.label_bits())?;
        total.merge(&stats);
        loss_sum += loss;
        results.push(PairResult {
            id: pair.id.clone(),
            loss,
            stats,
            prediction,
        });
    }
    Ok(Evaluation {
        loss: if pairs.is_empty() { f64::NAN } else { loss_sum / pairs.len() as f64 },
        stats: total,
        pairs: results,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_f1: Option<f64>,
}

pub const LOG_HEADER: &str = "# epoch\tlr\ttrain_loss\tval_loss\tval_f1";

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}",
            self.epoch,
            self.lr,
            self.train_loss,
            opt(self.val_loss),
            opt(self.val_f1)
        )
    }
}

/// Parses the lines written by [`EpochRecord`]'s `Display`.
pub fn parse_log(text: &str) -> Result<Vec<EpochRecord>> {
    let opt = |s: &str| -> Result<Option<f64>> {
        if s == "-" {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::Format(format!("bad log value {s:?}")))
        }
    };
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(Error::Format(format!("bad log line {line:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad log value {s:?}")));
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| Error::Format(format!("bad epoch {:?}", f[0])))?,
                lr: num(f[1])?,
                train_loss: num(f[2])?,
                val_loss: opt(f[3])?,
                val_f1: opt(f[4])?,
            })
        })
        .collect()
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train.log";

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: ChangeDetector,
    /// Weights after the final epoch.
    pub last: ParamStore<f32>,
    /// Weights of the selected epoch.
    pub best: ParamStore<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

pub fn checkpoint_for(cfg: &RunConfig, store: &ParamStore<f32>, epoch: usize) -> Checkpoint {
    Checkpoint::from_store(store)
        .with_meta("config", cfg.to_toml())
        .with_meta("epoch", epoch.to_string())
}

/// Rebuilds the network described by a checkpoint's stored config.
pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, ChangeDetector, ParamStore<f32>)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = RunConfig::from_toml(
        ckpt.meta("config")
            .ok_or_else(|| Error::Format(format!("{} has no stored config", path.display())))?,
    )?;
    let mut store = ParamStore::new();
    let model = ChangeDetector::new(&cfg.model, &mut store, cfg.seed)?;
    store.load_values(&ckpt.to_store()?)?;
    Ok((cfg, model, store))
}

/// Where training writes its artefacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

struct LogFile(Option<std::fs::File>);

impl LogFile {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else { return Ok(Self(None)) };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(TRAIN_LOG);
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
        Ok(Self(Some(f)))
    }

    fn line(&mut self, s: &str) -> Result<()> {
        if let Some(f) = &mut self.0 {
            writeln!(f, "{s}").and_then(|_| f.flush()).map_err(|e| Error::io(TRAIN_LOG, e))?;
        }
        Ok(())
    }
}

/// Trains from scratch. Every epoch shuffles the training set with a seeded
/// generator, accumulates per-pair gradients over each batch with weight
/// `1/B`, and steps the optimiser once per batch.
pub fn train(
    cfg: &RunConfig,
    train_set: &[ChangePair],
    val_set: &[ChangePair],
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut store = ParamStore::<f32>::new();
    let model = ChangeDetector::new(&cfg.model, &mut store, cfg.seed)?;
    for pair in train_set.iter().chain(val_set) {
        model.check_pair(pair.t1.shape(), pair.t2.shape())?;
    }

    let tc = &cfg.train;
    let mut sgd = Sgd::new(tc.momentum, tc.weight_decay);
    sgd.max_grad_norm = tc.max_grad_norm;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e_ed0f_7a1e);
    let mut log = LogFile::open(out_dir)?;
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best = store.clone();
    let mut best_epoch = 0;
    let mut best_score = f64::INFINITY;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..tc.epochs {
        let lr = learning_rate(tc, epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let weight = 1.0 / batch.len() as f32;
            for &i in batch {
                let aug_seed: u64 = rng.gen();
                let sample = if cfg.augment.any() {
                    augment(&train_set[i], &cfg.augment, aug_seed)?
                } else {
                    train_set[i].clone()
                };
                let mut g = Graph::with_params(&store);
                let (loss, _) = pair_loss(&mut g, &model, &sample)?;
                let value = g.scalar_value(loss) as f64;
                if !value.is_finite() {
                    return Err(Error::Numeric {
                        op: "train",
                        msg: format!("non-finite loss at epoch {} on {}", epoch + 1, sample.id),
                    });
                }
                loss_sum += value;
                let scaled = g.scale(loss, weight);
                g.backward(scaled)?.accumulate_into(&mut store)?;
            }
            sgd.step(&mut store, lr);
        }
        if !store.all_finite() {
            return Err(Error::Numeric {
                op: "train",
                msg: format!("non-finite weights after epoch {}", epoch + 1),
            });
        }

        let train_loss = loss_sum / train_set.len() as f64;
        let (val_loss, val_f1) = if val_set.is_empty() {
            (None, None)
        } else {
            let e = evaluate(&model, &store, val_set)?;
            (Some(e.loss), Some(e.f1()))
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss,
            val_loss,
            val_f1,
        };
        log.line(&record.to_string())?;
        on_epoch(&record);
        history.push(record);

        let score = match (tc.selection, val_loss, val_f1) {
            (Selection::ValLoss, Some(l), _) => l,
            (Selection::ValF1, _, Some(f)) => -f,
            _ => train_loss,
        };
        if score < best_score {
            best_score = score;
            best_epoch = epoch + 1;
            best = store.clone();
            if let Some(dir) = out_dir {
                checkpoint_for(cfg, &best, best_epoch).save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        checkpoint_for(cfg, &store, tc.epochs).save(&dir.join(LAST_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        model,
        last: store,
        best,
        best_epoch,
        history,
    })
}

/// Seed of the `index`-th synthetic pair of a split.
pub fn synthetic_seed(run_seed: u64, split: usize, index: usize) -> u64 {
    run_seed
        .wrapping_mul(1_000_003)
        .wrapping_add((split as u64) << 32)
        .wrapping_add(index as u64)
}

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<ChangePair>,
    pub val: Vec<ChangePair>,
    pub test: Vec<ChangePair>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&[ChangePair]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Loads the configured dataset, or generates the synthetic one.
pub fn prepare_data(cfg: &RunConfig) -> Result<Splits> {
    let d = &cfg.data;
    match &d.root {
        Some(root) => {
            let tiles = tile_dataset(Path::new(root), d.patch)?;
            let load = |refs: &[crate::dataset::PatchRef]| refs.iter().map(|r| r.load()).collect::<Result<Vec<_>>>();
            Ok(Splits {
                train: load(&tiles.train)?,
                val: load(&tiles.val)?,
                test: load(&tiles.test)?,
            })
        }
        None => {
            let gen = SyntheticGenerator::new(d.synthetic_size, d.difficulty);
            let make = |split: usize, name: &str, count: usize| {
                (0..count)
                    .map(|i| gen.generate(synthetic_seed(cfg.seed, split, i), format!("{name}{i:04}")))
                    .collect::<Vec<_>>()
            };
            Ok(Splits {
                train: make(0, "train", d.synthetic_train),
                val: make(1, "val", d.synthetic_val),
                test: make(2, "test", d.synthetic_test),
            })
        }
    }
}

/// Tensor of a change map as `H×W` {0,1} floats.
pub fn prediction_tensor(bits: &[u8], (h, w): (usize, usize)) -> Result<Tensor<f32>> {
    Tensor::new(vec![h, w], bits.iter().map(|&b| b as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AugmentConfig, Difficulty};

    fn tiny_run() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.width_factor = 1.0 / 16.0;
        cfg.train.epochs = 2;
        cfg.train.batch_size = 2;
        cfg.data.synthetic_size = 32;
        cfg.data.synthetic_train = 3;
        cfg.data.synthetic_val = 1;
        cfg.data.synthetic_test = 1;
        cfg
    }

    #[test]
    fn sgd_quadratic_step() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(1.0)).unwrap();
        // ∇(½w²) = w
        store.get_mut(id).tensor.accumulate_grad(&[1.0]).unwrap();
        Sgd::new(0.0, 0.0).step(&mut store, 0.1);
        assert!((store.get(id).tensor.data()[0] - 0.9).abs() < 1e-15);

        store.get_mut(id).tensor.data_mut()[0] = 1.0;
        store.get_mut(id).tensor.accumulate_grad(&[1.0]).unwrap();
        Sgd::new(0.0, 5e-4).step(&mut store, 0.1);
        let want = 1.0 - 0.1 * (1.0 + 5e-4);
        assert!((store.get(id).tensor.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(0.0)).unwrap();
        let mut sgd = Sgd::new(0.9, 0.0);
        for _ in 0..2 {
            store.get_mut(id).tensor.accumulate_grad(&[1.0]).unwrap();
            sgd.step(&mut store, 1.0);
        }
        // v1 = 1, v2 = 1.9
        assert!((store.get(id).tensor.data()[0] + 2.9).abs() < 1e-12);
        // No gradient: untouched.
        sgd.step(&mut store, 1.0);
        assert!((store.get(id).tensor.data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::scalar(0.0)).unwrap();
        let b = store.add("b", Tensor::scalar(0.0)).unwrap();
        store.get_mut(a).tensor.accumulate_grad(&[3.0]).unwrap();
        store.get_mut(b).tensor.accumulate_grad(&[4.0]).unwrap();
        let mut sgd = Sgd::new(0.0, 0.0);
        sgd.max_grad_norm = Some(1.0);
        sgd.step(&mut store, 1.0);
        assert_eq!(sgd.last_grad_norm, 5.0);
        assert!((store.get(a).tensor.data()[0] + 0.6).abs() < 1e-15);
        assert!((store.get(b).tensor.data()[0] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn schedule_decays_in_steps() {
        let tc = TrainConfig {
            learning_rate: 0.05,
            decay_every: 80,
            decay_factor: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(learning_rate(&tc, 0), 0.05);
        assert_eq!(learning_rate(&tc, 79), 0.05);
        assert!((learning_rate(&tc, 80) - 0.005).abs() < 1e-15);
        assert!((learning_rate(&tc, 199) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_freezes_weights() {
        let mut cfg = tiny_run();
        cfg.train.learning_rate = 0.0;
        cfg.train.epochs = 1;
        let data = prepare_data(&cfg).unwrap();
        let mut fresh = ParamStore::<f32>::new();
        ChangeDetector::new(&cfg.model, &mut fresh, cfg.seed).unwrap();
        let out = train(&cfg, &data.train, &data.val, None, |_| {}).unwrap();
        for ((_, a), (_, b)) in fresh.iter().zip(out.last.iter()) {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        }
    }

    #[test]
    fn log_round_trip_and_determinism() {
        let cfg = tiny_run();
        let data = prepare_data(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = train(&cfg, &data.train, &data.val, Some(dir.path()), |_| {}).unwrap();
        let b = train(&cfg, &data.train, &data.val, None, |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        let text = std::fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
        assert_eq!(parse_log(&text).unwrap(), a.history);
        assert!(text.starts_with(LOG_HEADER));

        let (cfg2, _, store) = load_checkpoint(&dir.path().join(LAST_CHECKPOINT)).unwrap();
        assert_eq!(cfg2, cfg);
        for ((_, x), (_, y)) in store.iter().zip(a.last.iter()) {
            assert_eq!(x.tensor.data(), y.tensor.data());
        }
        assert!(dir.path().join(BEST_CHECKPOINT).exists());
    }

    #[test]
    fn uniform_prediction_loss_is_ln2() {
        let mut g = Graph::<f64>::new();
        let p = g.input(&Tensor::full(vec![2, 4, 4], 0.5));
        let label = Tensor::from_fn(vec![4, 4], |i| (i % 3 == 0) as u8 as f64);
        let l = g.binary_cross_entropy(p, &label).unwrap();
        assert!((g.scalar_value(l) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn synthetic_splits_are_distinct() {
        let mut cfg = tiny_run();
        cfg.data.difficulty = Difficulty::Easy;
        cfg.augment = AugmentConfig::disabled();
        let d = prepare_data(&cfg).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (3, 1, 1));
        assert_ne!(d.train[0], d.val[0]);
        assert!(d.get("bogus").is_err());
    }
}
