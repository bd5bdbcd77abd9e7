use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use cmt_core::anomaly::AnomalyKind;
use cmt_core::dataset::{build_dataset, kind_histogram, validate_manifest, GenerationConfig, Manifest, Split};
use cmt_core::eval::{evaluate, predict_viewpoint, roc_csv, roc_svg};
use cmt_core::model::TopK;
use cmt_core::render::REFERENCE_VIEWS;
use cmt_core::train::{train, DataCache, Model, Network, TrainConfig, TrainOptions, CHECKPOINT_NAME};

#[derive(Parser)]
#[command(name = "cmt", version, about = "Conditional anomaly benchmark generation, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark dataset tree and its manifest.
    Generate(GenerateArgs),
    /// Check a manifest against the dataset contracts.
    Validate(ValidateArgs),
    /// Train a model on the train split.
    Train(TrainArgs),
    /// Score a split with a checkpoint and write report, ROC CSV and SVG.
    Eval(EvalArgs),
    /// Predict the viewpoint of every query in a split.
    Viewpoint(ViewpointArgs),
    /// Run one ablation axis and write its CSV.
    Sweep(SweepArgs),
    /// Summarize a manifest, a sample, or a checkpoint.
    Inspect(InspectArgs),
}

/// JSON config file plus `key.path=value` overrides.
#[derive(Args, Clone, Debug, Default)]
struct ConfigArgs {
    /// JSON config; a previous run.json is accepted too.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set model.k=dense`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for run.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
    /// Number of reference views at test time (defaults to the checkpoint's).
    #[arg(long)]
    n_test: Option<usize>,
}

#[derive(Args)]
struct ViewpointArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    axis: Axis,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, required_unless_present = "ckpt")]
    manifest: Option<PathBuf>,
    /// Print one sample record by id.
    #[arg(long, requires = "manifest")]
    sample: Option<String>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Directory for run.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Axis {
    /// k in {1, 4, 16, 64, dense}.
    K,
    /// N_train in {5, 10} by N_test in {5, 10, 15, 20}.
    N,
    /// Alignment losses: none, qv only, vv only, both.
    Loss,
    /// All three axes in turn.
    All,
}

/// Bad input from the command line or a config file; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(Usage(msg.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let is_usage = e.downcast_ref::<Usage>().is_some()
                || matches!(e.downcast_ref::<cmt_core::Error>(), Some(cmt_core::Error::Config(_)));
            ExitCode::from(if is_usage { 2 } else { 1 })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    let argv: Vec<String> = std::env::args().collect();
    match cmd {
        Command::Generate(a) => generate(a, &argv),
        Command::Validate(a) => validate(a, &argv),
        Command::Train(a) => train_cmd(a, &argv),
        Command::Eval(a) => eval_cmd(a, &argv),
        Command::Viewpoint(a) => viewpoint(a, &argv),
        Command::Sweep(a) => sweep(a, &argv),
        Command::Inspect(a) => inspect(a, &argv),
    }
}

/// Loads the config file (or `{}`), applies overrides, and deserializes
/// with the offending key path in any error.
fn resolve<T: DeserializeOwned>(args: &ConfigArgs, extra: &[(&str, Value)]) -> Result<T> {
    let mut value = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            // a run.json carries the resolved config under "config"
            match v {
                Value::Object(mut m) if m.contains_key("command") && m.contains_key("config") => m.remove("config").unwrap(),
                v => v,
            }
        }
        None => Value::Object(Map::new()),
    };
    for s in &args.sets {
        let (key, raw) = s.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut value, key, v)?;
    }
    for (key, v) in extra {
        set_path(&mut value, key, v.clone())?;
    }
    serde_path_to_error::deserialize(value).map_err(|e| usage(format!("config key `{}`: {}", e.path(), e.inner())))
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| usage(format!("config key `{key}` is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), v);
            return Ok(());
        }
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Err(usage("empty config key"))
}

fn write_run_json(dir: &Path, command: &str, argv: &[String], config: impl Serialize, seed: Option<u64>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let run = json!({
        "command": command,
        "argv": argv,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config": config,
    });
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&run)? + "\n")?;
    Ok(())
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn generate(a: GenerateArgs, argv: &[String]) -> Result<()> {
    let cfg: GenerationConfig = resolve(&a.config, &[])?;
    cfg.validate()?;
    write_run_json(&a.out, "generate", argv, &cfg, Some(a.seed))?;
    let m = build_dataset(&cfg, a.seed, &a.out)?;
    let [tr, va, te] = [Split::Train, Split::Val, Split::Test].map(|s| m.samples(s).len());
    println!("{} shapes, {tr}/{va}/{te} queries -> {}", m.shapes.len(), a.out.join("manifest.json").display());
    Ok(())
}

fn validate(a: ValidateArgs, argv: &[String]) -> Result<()> {
    let m = load_manifest(&a.manifest)?;
    if let Some(out) = &a.out {
        write_run_json(out, "validate", argv, &m.config, Some(m.seed))?;
    }
    validate_manifest(&m)?;
    for (split, counts) in kind_histogram(&m) {
        println!("{split}: {} queries, {}", m.samples(split).len(), kinds(&counts));
    }
    println!("manifest ok");
    Ok(())
}

fn kinds(counts: &[usize; 5]) -> String {
    AnomalyKind::ALL.iter().zip(counts).map(|(k, n)| format!("{k} {n}")).collect::<Vec<_>>().join(", ")
}

fn train_config(cfg: &ConfigArgs, seed: Option<u64>, epochs: Option<usize>) -> Result<TrainConfig> {
    let mut extra = Vec::new();
    if let Some(s) = seed {
        extra.push(("seed", json!(s)));
    }
    if let Some(e) = epochs {
        extra.push(("epochs", json!(e)));
    }
    let cfg: TrainConfig = resolve(cfg, &extra)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_cache(m: &Manifest, cfg: &TrainConfig) -> Result<DataCache> {
    if m.config.resolution != cfg.model.resolution {
        bail!(usage(format!(
            "dataset resolution {} does not match model.resolution {}",
            m.config.resolution, cfg.model.resolution
        )));
    }
    Ok(DataCache::load(m, &[Split::Train, Split::Val, Split::Test])?)
}

fn train_cmd(a: TrainArgs, argv: &[String]) -> Result<()> {
    let cfg = train_config(&a.config, a.seed, a.epochs)?;
    let m = load_manifest(&a.manifest)?;
    let data = load_cache(&m, &cfg)?;
    write_run_json(&a.out, "train", argv, &cfg, Some(cfg.seed))?;
    let ckpt = a.out.join(CHECKPOINT_NAME);
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        resume: (a.resume && ckpt.exists()).then(|| ckpt.clone()),
        verbose: !a.quiet,
    };
    let (_, history) = train(&data, &cfg, &opts)?;
    match history.last() {
        Some(last) => println!("epoch {}: bce {:.4}; checkpoint {}", last.epoch, last.loss_bce, ckpt.display()),
        None => println!("nothing to do: checkpoint already at epoch {}", cfg.epochs),
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?.0)
}

fn eval_cmd(a: EvalArgs, argv: &[String]) -> Result<()> {
    let mut model = load_model(&a.ckpt)?;
    if let Some(n) = a.n_test {
        if !(1..=REFERENCE_VIEWS).contains(&n) {
            bail!(usage(format!("--n-test must be in 1..={REFERENCE_VIEWS}")));
        }
        model.config.n_test = n;
    }
    let split = Split::from(a.split);
    write_run_json(&a.out, "eval", argv, &model.config, Some(model.config.seed))?;
    let m = load_manifest(&a.manifest)?;
    let data = DataCache::load(&m, &[split])?;
    let (report, scored) = evaluate(&model, &data, split)?;
    fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(a.out.join("roc.csv"), roc_csv(&report.roc))?;
    fs::write(a.out.join("roc.svg"), roc_svg(&report.roc, report.auc))?;
    let mut csv = String::from("id,label,kind,score,iou\n");
    for s in &scored {
        let kind = s.kind.map(|k| k.to_string()).unwrap_or_default();
        let iou = s.iou.map(|i| i.to_string()).unwrap_or_default();
        csv += &format!("{},{},{kind},{},{iou}\n", s.id, s.label, s.score);
    }
    fs::write(a.out.join("scores.csv"), csv)?;
    let ap = report.ap50.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    println!("{split}: AUC {:.4}, accuracy {:.4}, AP@0.5 {ap} over {} queries", report.auc, report.accuracy, report.samples);
    Ok(())
}

/// Reference view `i` sits at azimuth `i * pi / 10`, so a query's azimuth
/// step names its nearest reference view.
fn viewpoint(a: ViewpointArgs, argv: &[String]) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let Network::Cmt(params) = &model.net else {
        bail!(usage("viewpoint prediction needs a CMT checkpoint"));
    };
    let split = Split::from(a.split);
    write_run_json(&a.out, "viewpoint", argv, &model.config, Some(model.config.seed))?;
    let m = load_manifest(&a.manifest)?;
    let data = DataCache::load(&m, &[split])?;
    let step = std::f64::consts::PI / 10.0;
    let (mut exact, mut near) = (0usize, 0usize);
    let mut csv = String::from("id,true_view,predicted_view\n");
    for (q, s) in data.queries(split).iter().zip(m.samples(split)) {
        let shape = &data.shapes[q.shape];
        let views: Vec<&[f32]> = shape.views.iter().map(Vec::as_slice).collect();
        let pred = predict_viewpoint(params, &model.store, &q.image, &views)?;
        let truth = ((s.query_pose.azimuth / step).round() as usize) % REFERENCE_VIEWS;
        let off = pred.abs_diff(truth).min(REFERENCE_VIEWS - pred.abs_diff(truth));
        exact += (off == 0) as usize;
        near += (off <= 1) as usize;
        csv += &format!("{},{truth},{pred}\n", q.id);
    }
    fs::write(a.out.join("viewpoint.csv"), csv)?;
    let n = data.queries(split).len().max(1) as f64;
    println!("{split}: exact view {:.3}, within one step {:.3}", exact as f64 / n, near as f64 / n);
    Ok(())
}

fn sweep(a: SweepArgs, argv: &[String]) -> Result<()> {
    let base = train_config(&a.config, a.seed, a.epochs)?;
    let m = load_manifest(&a.manifest)?;
    let data = load_cache(&m, &base)?;
    write_run_json(&a.out, "sweep", argv, &base, Some(base.seed))?;
    let axes = match a.axis {
        Axis::All => vec![Axis::K, Axis::N, Axis::Loss],
        axis => vec![axis],
    };
    for axis in axes {
        sweep_axis(axis, &base, &data, &a.out)?;
    }
    Ok(())
}

fn sweep_axis(axis: Axis, base: &TrainConfig, data: &DataCache, out: &Path) -> Result<()> {
    let (dir, file, mut csv) = match axis {
        Axis::K => ("k", "k_sweep.csv", String::from("k,auc,accuracy\n")),
        Axis::N => ("n", "n_sweep.csv", String::from("n_train,n_test,auc,accuracy\n")),
        Axis::Loss => ("loss", "loss_ablation.csv", String::from("config,use_qv,use_vv,auc,accuracy\n")),
        Axis::All => unreachable!("expanded by the caller"),
    };
    let fit = |name: &str, cfg: &TrainConfig| -> Result<Model> {
        eprintln!("training {dir}/{name}");
        let opts = TrainOptions {
            out_dir: Some(out.join(dir).join(name)),
            ..Default::default()
        };
        Ok(train(data, cfg, &opts)?.0)
    };
    let score = |model: &Model| -> Result<(f64, f64)> {
        let (r, _) = evaluate(model, data, Split::Test)?;
        Ok((r.auc, r.accuracy))
    };
    match axis {
        Axis::K => {
            for k in [TopK::K(1), TopK::K(4), TopK::K(16), TopK::K(64), TopK::Dense] {
                let mut cfg = base.clone();
                cfg.model.k = k;
                let (auc, acc) = score(&fit(&format!("k_{k}"), &cfg)?)?;
                csv += &format!("{k},{auc},{acc}\n");
            }
        }
        Axis::N => {
            for n_train in [5, 10] {
                let mut cfg = base.clone();
                cfg.n_train = n_train;
                cfg.n_test = REFERENCE_VIEWS;
                let mut model = fit(&format!("n_train_{n_train}"), &cfg)?;
                // inference with fewer views than training is allowed here
                for n_test in [5, 10, 15, 20] {
                    model.config.n_test = n_test;
                    let (auc, acc) = score(&model)?;
                    csv += &format!("{n_train},{n_test},{auc},{acc}\n");
                }
            }
        }
        Axis::Loss => {
            for (name, qv, vv) in [("no_align", false, false), ("qv_only", true, false), ("vv_only", false, true), ("both", true, true)] {
                let mut cfg = base.clone();
                cfg.align.use_qv = qv;
                cfg.align.use_vv = vv;
                let (auc, acc) = score(&fit(name, &cfg)?)?;
                csv += &format!("{name},{qv},{vv},{auc},{acc}\n");
            }
        }
        Axis::All => unreachable!(),
    }
    fs::write(out.join(file), &csv)?;
    print!("{csv}");
    Ok(())
}

fn inspect(a: InspectArgs, argv: &[String]) -> Result<()> {
    if let Some(out) = &a.out {
        write_run_json(out, "inspect", argv, Value::Null, None)?;
    }
    if let Some(path) = &a.manifest {
        let m = load_manifest(path)?;
        match &a.sample {
            Some(id) => {
                let s = m
                    .splits
                    .values()
                    .flatten()
                    .find(|s| &s.id == id)
                    .ok_or_else(|| usage(format!("no sample `{id}` in the manifest")))?;
                println!("{}", serde_json::to_string_pretty(s)?);
            }
            None => {
                println!("seed {}, resolution {}, {} shapes", m.seed, m.config.resolution, m.shapes.len());
                for (split, counts) in kind_histogram(&m) {
                    let q = m.samples(split);
                    let anomalous = q.iter().filter(|s| s.label == 1).count();
                    println!("{split}: {} queries, {anomalous} anomalous ({})", q.len(), kinds(&counts));
                }
            }
        }
    }
    if let Some(path) = &a.ckpt {
        let (model, _, epoch) = Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        println!("{} after epoch {epoch}, {} parameters", match model.net {
            Network::Cmt(_) => "cmt",
            Network::QueryOnly(_) => "query_only",
        }, model.store.num_scalars());
        println!("{}", serde_json::to_string_pretty(&model.config)?);
    }
    Ok(())
}
