//! `cdnet`: train, evaluate and verify the change detector.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdnet_core::dataset::{load_label_png, save_label_png, tile_dataset, write_pair, SyntheticGenerator};
use cdnet_core::metrics::{confusion, render_confusion_map, report_table, report_tsv, save_confusion_map, ReportRow};
use cdnet_core::train::{evaluate, load_checkpoint, prediction_tensor, prepare_data, synthetic_seed, train, Splits};
use cdnet_core::{gradsuite, selftest, ChangePair, ConfusionStats, Difficulty, RunConfig};
use clap::{Args, Parser, Subcommand};
use manifest::RunManifest;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "cdnet", version, about = "Siamese change detection on co-registered image pairs")]
struct Cli {
    /// Directory that receives every output of the command.
    #[arg(long, global = true, env = "CDNET_OUT", default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the configuration file.
#[derive(Args, Debug, Default, Clone)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset root with `A/ B/ label/` images and `list/` manifests (or
    /// `train/ val/ test/` subdirectories).
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Tile size used when reading `--data-root`.
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_name = "BOOL")]
    toggle_ra: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    toggle_sa: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    toggle_ct: Option<bool>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from scratch and keep the best checkpoint.
    Train(ConfigArgs),
    /// Score a split with a checkpoint, or score stored predictions.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory of predicted masks named like the ground-truth labels;
        /// scored instead of running a model.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Write change maps and confusion maps for a split.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Generate synthetic pairs in the dataset layout.
    GenData {
        #[arg(long, default_value_t = 2022)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value = "easy")]
        difficulty: String,
        /// Manifest the pairs are listed in.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Finite-difference check of every op and module.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// Only run cases whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Run every worked example with a known answer.
    Selftest,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Eval { .. } => "eval",
            Command::Predict { .. } => "predict",
            Command::GenData { .. } => "gen-data",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Selftest => "selftest",
        }
    }
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

fn split_index(split: &str) -> CliResult<usize> {
    SPLITS
        .iter()
        .position(|s| *s == split)
        .ok_or_else(|| usage(format!("unknown split {split:?}; expected train, val or test")))
}

/// Applies command-line overrides, which take precedence over the file.
fn apply_overrides(mut cfg: RunConfig, a: &ConfigArgs) -> CliResult<RunConfig> {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(root) = &a.data_root {
        if !root.is_dir() {
            return Err(usage(format!("data root {} does not exist", root.display())));
        }
        cfg.data.root = Some(root.display().to_string());
    }
    if let Some(p) = a.patch {
        cfg.data.patch = p;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(v) = a.toggle_ra {
        cfg.model.relation_aware = v;
    }
    if let Some(v) = a.toggle_sa {
        cfg.model.scale_aware = v;
    }
    if let Some(v) = a.toggle_ct {
        cfg.model.cross_transformer = v;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn resolve_config(a: &ConfigArgs) -> CliResult<RunConfig> {
    let base = match &a.config {
        Some(path) => RunConfig::load(path).map_err(usage)?,
        None => RunConfig::default(),
    };
    apply_overrides(base, a)
}

fn ensure_exists(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn print_report(out: &Path, split: &str, stats: ConfusionStats) -> CliResult<()> {
    let row = ReportRow::new(split, stats).map_err(runtime)?;
    print!("{}", report_table(std::slice::from_ref(&row)));
    cdnet_core::io::write_atomic(&out.join("metrics.tsv"), report_tsv(&[row]).as_bytes()).map_err(runtime)
}

fn write_pair_scores(out: &Path, rows: &[(String, ConfusionStats)]) -> CliResult<()> {
    let mut text = String::from("id\tprecision\trecall\tf1\tiou\toa\n");
    for (id, stats) in rows {
        let s = cdnet_core::metrics::scores(stats).map_err(runtime)?;
        text.push_str(&format!("{id}\t{}\t{}\t{}\t{}\t{}\n", s.precision, s.recall, s.f1, s.iou, s.oa));
    }
    cdnet_core::io::write_atomic(&out.join("pairs.tsv"), text.as_bytes()).map_err(runtime)
}

fn cmd_train(out: &Path, a: &ConfigArgs, m: &mut RunManifest) -> CliResult<()> {
    m.config_path = a.config.as_ref().map(|p| p.display().to_string());
    let cfg = resolve_config(a)?;
    m.config = Some(cfg.to_toml());
    m.seed = Some(cfg.seed);
    cdnet_core::io::write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes()).map_err(runtime)?;
    let data = prepare_data(&cfg).map_err(usage)?;
    if data.train.is_empty() {
        return Err(usage("the training split is empty"));
    }
    println!("{}", cdnet_core::train::LOG_HEADER);
    let outcome = train(&cfg, &data.train, &data.val, Some(out), |r| println!("{r}")).map_err(runtime)?;
    eprintln!("best epoch {}", outcome.best_epoch);
    if !data.test.is_empty() {
        let e = evaluate(&outcome.model, &outcome.best, &data.test).map_err(runtime)?;
        print_report(out, "test", e.stats)?;
    }
    Ok(())
}

/// Pairs of the split, plus the files predictions are looked up by.
fn split_pairs(cfg: &RunConfig, split: &str) -> CliResult<(Vec<ChangePair>, Vec<PredictionSource>)> {
    split_index(split)?;
    match &cfg.data.root {
        Some(root) => {
            let tiles = tile_dataset(Path::new(root), cfg.data.patch).map_err(usage)?;
            let refs = tiles.split(split).unwrap_or_default().to_vec();
            let pairs = refs.iter().map(|r| r.load()).collect::<Result<Vec<_>, _>>().map_err(runtime)?;
            let sources = refs.into_iter().map(PredictionSource::Tile).collect();
            Ok((pairs, sources))
        }
        None => {
            let data: Splits = prepare_data(cfg).map_err(usage)?;
            let pairs = data.get(split).map_err(usage)?.to_vec();
            let sources = pairs.iter().map(|p| PredictionSource::Whole(format!("{}.png", p.id))).collect();
            Ok((pairs, sources))
        }
    }
}

enum PredictionSource {
    Tile(cdnet_core::PatchRef),
    Whole(String),
}

fn load_prediction(dir: &Path, src: &PredictionSource) -> CliResult<Vec<u8>> {
    let t = match src {
        PredictionSource::Tile(r) => {
            // Per-tile masks as written by `predict`, else the full-size mask.
            let tile = dir.join(format!("{}.png", r.id()));
            if tile.exists() {
                load_label_png(&tile).map_err(usage)?
            } else {
                let full = load_label_png(&dir.join(&r.file)).map_err(usage)?;
                r.window(&full).map_err(runtime)?
            }
        }
        PredictionSource::Whole(file) => load_label_png(&dir.join(file)).map_err(usage)?,
    };
    Ok(t.data().iter().map(|&v| u8::from(v > 0.5)).collect())
}

fn cmd_eval(
    out: &Path,
    a: &ConfigArgs,
    checkpoint: Option<&Path>,
    split: &str,
    predictions: Option<&Path>,
    m: &mut RunManifest,
) -> CliResult<()> {
    split_index(split)?;
    let mut rows = Vec::new();
    let mut total = ConfusionStats::default();
    match (checkpoint, predictions) {
        (_, Some(dir)) => {
            ensure_exists(dir, "predictions directory")?;
            let cfg = match checkpoint {
                Some(c) => apply_overrides(load_checkpoint(c).map_err(usage)?.0, a)?,
                None => resolve_config(a)?,
            };
            m.config = Some(cfg.to_toml());
            m.seed = Some(cfg.seed);
            let (pairs, sources) = split_pairs(&cfg, split)?;
            for (pair, src) in pairs.iter().zip(&sources) {
                let pred = load_prediction(dir, src)?;
                let stats = confusion(&pred, &pair.label_bits()).map_err(usage)?;
                total.merge(&stats);
                rows.push((pair.id.clone(), stats));
            }
        }
        (Some(ckpt), None) => {
            ensure_exists(ckpt, "checkpoint")?;
            let (cfg, model, store) = load_checkpoint(ckpt).map_err(usage)?;
            let cfg = apply_overrides(cfg, a)?;
            m.config = Some(cfg.to_toml());
            m.seed = Some(cfg.seed);
            let (pairs, _) = split_pairs(&cfg, split)?;
            let e = evaluate(&model, &store, &pairs).map_err(runtime)?;
            total = e.stats;
            rows = e.pairs.into_iter().map(|p| (p.id, p.stats)).collect();
            eprintln!("mean loss {}", e.loss);
        }
        (None, None) => return Err(usage("eval needs --checkpoint or --predictions")),
    }
    if rows.is_empty() {
        return Err(usage(format!("split {split:?} has no pairs")));
    }
    write_pair_scores(out, &rows)?;
    print_report(out, split, total)
}

fn cmd_predict(out: &Path, a: &ConfigArgs, checkpoint: &Path, split: &str, m: &mut RunManifest) -> CliResult<()> {
    ensure_exists(checkpoint, "checkpoint")?;
    let (cfg, model, store) = load_checkpoint(checkpoint).map_err(usage)?;
    let cfg = apply_overrides(cfg, a)?;
    m.config = Some(cfg.to_toml());
    m.seed = Some(cfg.seed);
    let (pairs, _) = split_pairs(&cfg, split)?;
    if pairs.is_empty() {
        return Err(usage(format!("split {split:?} has no pairs")));
    }
    let e = evaluate(&model, &store, &pairs).map_err(runtime)?;
    for (pair, res) in pairs.iter().zip(&e.pairs) {
        let size = pair.size();
        let mask = prediction_tensor(&res.prediction, size).map_err(runtime)?;
        save_label_png(&out.join("predictions").join(format!("{}.png", pair.id)), &mask).map_err(runtime)?;
        let img = render_confusion_map(&res.prediction, &pair.label_bits(), size).map_err(runtime)?;
        save_confusion_map(&out.join("confusion").join(format!("{}.png", pair.id)), &img).map_err(runtime)?;
    }
    let rows: Vec<_> = e.pairs.iter().map(|p| (p.id.clone(), p.stats)).collect();
    write_pair_scores(out, &rows)?;
    print_report(out, split, e.stats)
}

fn cmd_gen_data(out: &Path, seed: u64, count: usize, size: usize, difficulty: &str, split: &str, m: &mut RunManifest) -> CliResult<()> {
    let difficulty: Difficulty = difficulty.parse().map_err(usage)?;
    let index = split_index(split)?;
    if size == 0 || size % 32 != 0 {
        return Err(usage(format!("size {size} must be a positive multiple of 32")));
    }
    m.seed = Some(seed);
    let gen = SyntheticGenerator::new(size, difficulty);
    let mut names = String::new();
    for i in 0..count {
        let pair = gen.generate(synthetic_seed(seed, index, i), format!("{split}{i:04}"));
        write_pair(out, &pair).map_err(runtime)?;
        names.push_str(&format!("{}.png\n", pair.id));
    }
    cdnet_core::io::write_atomic(&out.join("list").join(format!("{split}.txt")), names.as_bytes()).map_err(runtime)?;
    println!("wrote {count} pairs to {}", out.display());
    Ok(())
}

fn cmd_gradcheck(out: &Path, seeds: usize, filter: Option<&str>) -> CliResult<()> {
    const LIMIT: f64 = 1e-4;
    if seeds == 0 {
        return Err(usage("--seeds must be positive"));
    }
    println!("op\tmax_rel_err\tworst_seed\tseeds");
    let results = gradsuite::run(seeds, filter, |r| {
        println!("{}\t{:.3e}\t{}\t{}", r.name, r.max_rel_err, r.worst_seed, r.seeds)
    })
    .map_err(runtime)?;
    if results.is_empty() {
        return Err(usage("no gradient case matches the filter"));
    }
    let mut tsv = String::from("op\tmax_rel_err\tworst_seed\tseeds\n");
    for r in &results {
        tsv.push_str(&format!("{}\t{}\t{}\t{}\n", r.name, r.max_rel_err, r.worst_seed, r.seeds));
    }
    cdnet_core::io::write_atomic(&out.join("gradcheck.tsv"), tsv.as_bytes()).map_err(runtime)?;
    let failed: Vec<_> = results.iter().filter(|r| !(r.max_rel_err < LIMIT)).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(runtime(format!("relative error ≥ {LIMIT:e} in: {}", failed.join(", "))))
    }
}

fn cmd_selftest(out: &Path) -> CliResult<()> {
    let scratch = out.join("selftest-fixtures");
    let results = selftest::run(&scratch);
    let _ = std::fs::remove_dir_all(&scratch);
    let mut failed = 0;
    for r in &results {
        if r.passed {
            println!("PASS {}", r.name);
        } else {
            failed += 1;
            println!("FAIL {}: {}", r.name, r.detail);
        }
    }
    println!("{} of {} checks passed", results.len() - failed, results.len());
    if failed == 0 {
        Ok(())
    } else {
        Err(runtime(format!("{failed} selftest checks failed")))
    }
}

fn dispatch(cli: &Cli, m: &mut RunManifest) -> CliResult<()> {
    let out = cli.out.as_path();
    match &cli.command {
        Command::Train(a) => cmd_train(out, a, m),
        Command::Eval {
            cfg,
            checkpoint,
            split,
            predictions,
        } => cmd_eval(out, cfg, checkpoint.as_deref(), split, predictions.as_deref(), m),
        Command::Predict { cfg, checkpoint, split } => cmd_predict(out, cfg, checkpoint, split, m),
        Command::GenData {
            seed,
            count,
            size,
            difficulty,
            split,
        } => cmd_gen_data(out, *seed, *count, *size, difficulty, split, m),
        Command::Gradcheck { seeds, filter } => cmd_gradcheck(out, *seeds, filter.as_deref()),
        Command::Selftest => cmd_selftest(out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut manifest = RunManifest::start(cli.command.name());
    if let Err(e) = std::fs::create_dir_all(&cli.out) {
        eprintln!("error: cannot create {}: {e}", cli.out.display());
        return ExitCode::from(2);
    }
    let result = dispatch(&cli, &mut manifest);
    let (code, msg) = match &result {
        Ok(()) => (0, None),
        Err(e) => (e.code(), Some(e.to_string())),
    };
    if let Some(msg) = &msg {
        eprintln!("error: {msg}");
    }
    if let Err(e) = manifest.write(&cli.out, i32::from(code), msg) {
        eprintln!("error: could not write run manifest: {e}");
        return ExitCode::from(1);
    }
    ExitCode::from(code)
}
