//! `gs4` command-line runner.
//!
//! Exit codes: 0 success, 1 gradient check above tolerance, 2 bad config or
//! input, 3 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use graphs4mer::analysis::{class_mean_adjacency, delta_table};
use graphs4mer::data::{self, Dataset, DatasetSpec, GeneratorKind, Label};
use graphs4mer::gsl::adjacency_csv;
use graphs4mer::metrics::{select_thresholds, MetricsReport};
use graphs4mer::model::{gsl_macs, gsl_param_count, GraphS4mer, GraphS4merConfig, Task, PRESETS};
use graphs4mer::train::{evaluate_dataset, history_csv, train_loop, TrainConfig};
use graphs4mer::Error;
use serde::{Deserialize, Serialize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_TOLERANCE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "model.gs4m";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Parser, Debug)]
#[command(name = "gs4", version, about = "GraphS4mer training and analysis")]
struct Cli {
    /// Worker threads; falls back to GS4_THREADS, then to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model and write checkpoint, history and test metrics.
    Train(TrainArgs),
    /// Evaluate a trained run on its test split or on another dataset.
    Eval(EvalArgs),
    /// Finite-difference gradient check of the desk model.
    Gradcheck(GradcheckArgs),
    /// Write the learned adjacency matrices of selected records as CSV.
    ExportAdj(ExportAdjArgs),
    /// GSL parameter and MAC counts across a range of graph counts.
    Profile(ProfileArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON run config; keys override the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset for model and optimizer settings.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides both the data and the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Overrides the number of records.
    #[arg(long)]
    size: Option<usize>,
    /// Output path: a `.bsg1` file, otherwise a directory of CSV records.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset to split instead of generating one from the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Dataset to evaluate instead of the run's test split.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; defaults to `<run>/eval`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-class mean adjacency CSVs and the δ table.
    #[arg(long)]
    adjacency: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Seed for the model parameters and the input record.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args, Debug)]
struct ExportAdjArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Dataset holding the records; defaults to the run's test split.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated record indices.
    #[arg(long, value_delimiter = ',', required = true)]
    records: Vec<usize>,
    /// Output directory for `<record id>_w<interval>.csv` files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    /// Embedding width.
    #[arg(long, default_value_t = 128)]
    d: usize,
    /// Sensor count.
    #[arg(long, default_value_t = 19)]
    n: usize,
    /// Inclusive range of graph counts, e.g. `1..10`.
    #[arg(long, value_parser = parse_range, default_value = "1..10")]
    sweep_nd: RangeInclusive<usize>,
    /// Sequence length, used to show the matching resolution.
    #[arg(long)]
    seq_len: Option<usize>,
}

fn parse_range(s: &str) -> std::result::Result<RangeInclusive<usize>, String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected A..B, got {s:?}"))?;
    let b = b.strip_prefix('=').unwrap_or(b);
    let a: usize = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let b: usize = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    if a == 0 || a > b {
        return Err(format!("range must satisfy 1 <= A <= B, got {a}..{b}"));
    }
    Ok(a..=b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { val_fraction: 0.2, test_fraction: 0.2 }
    }
}

/// Everything a run depends on. Echoed into the run directory as `config.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: GraphS4merConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
    pub split: SplitConfig,
    /// Dataset file or CSV directory; `None` generates from `data`.
    pub data_path: Option<PathBuf>,
}

impl RunConfig {
    pub fn preset(name: &str) -> graphs4mer::Result<Self> {
        let model = GraphS4merConfig::preset(name)?;
        let n_classes = model.n_classes.max(2);
        let kind = if n_classes == 2 { GeneratorKind::Correlation } else { GeneratorKind::LongRange };
        let seq_len = model.gsl.resolution.map_or(2048, |r| r * 1024usize.div_ceil(r));
        let data = DatasetSpec {
            kind,
            n_sensors: model.n_sensors,
            input_dim: model.input_dim,
            n_classes,
            seq_len,
            ..Default::default()
        };
        Ok(Self { model, train: TrainConfig::preset(name)?, data, ..Default::default() })
    }

    pub fn validate(&self) -> graphs4mer::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let s = &self.split;
        if !(s.val_fraction > 0.0 && s.test_fraction > 0.0 && s.val_fraction + s.test_fraction < 1.0) {
            return Err(Error::Config("split fractions must be positive and sum below 1".into()));
        }
        if self.data_path.is_none() {
            self.data.validate()?;
            let d = &self.data;
            let classes_ok = match self.model.task {
                Task::Binary => d.n_classes == 2,
                Task::Multiclass => d.n_classes == self.model.n_classes,
                Task::Multilabel => false,
            };
            if d.n_sensors != self.model.n_sensors || d.input_dim != self.model.input_dim || !classes_ok {
                return Err(Error::Config(format!(
                    "data (sensors {}, input_dim {}, classes {}) does not fit the model (sensors {}, input_dim {}, {:?} with {} outputs)",
                    d.n_sensors, d.input_dim, d.n_classes, self.model.n_sensors, self.model.input_dim, self.model.task, self.model.n_classes
                )));
            }
        }
        Ok(())
    }
}

/// Failure carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Numeric(_)) { EXIT_NUMERIC } else { EXIT_CONFIG };
        Self { code, msg: e.to_string() }
    }
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError { code: EXIT_CONFIG, msg: msg.into() }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn parse_config(value: serde_json::Value) -> CliResult<RunConfig> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        config_error(format!("invalid config at `{path}`: {}", e.into_inner()))
    })
}

/// Preset, then config file keys, then the seed flag.
pub fn resolve_config(config: Option<&Path>, preset: Option<&str>, seed: Option<u64>) -> CliResult<RunConfig> {
    let base = match preset {
        Some(p) => RunConfig::preset(p).map_err(|_| config_error(format!("unknown preset {p:?}; expected one of {PRESETS:?}")))?,
        None => RunConfig::default(),
    };
    let mut value = serde_json::to_value(&base).map_err(|e| config_error(e.to_string()))?;
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        let over: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        merge(&mut value, over);
    }
    let mut cfg = parse_config(value)?;
    if let Some(s) = seed {
        cfg.data.seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn load_run_config(run: &Path) -> CliResult<RunConfig> {
    let path = run.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    parse_config(value)
}

fn load_model(run: &Path) -> CliResult<GraphS4mer> {
    let path = run.join(CHECKPOINT_FILE);
    let buf = fs::read(&path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    Ok(GraphS4mer::from_checkpoint(&buf)?)
}

/// Train, validation and test sets for a resolved config.
pub fn splits(cfg: &RunConfig) -> graphs4mer::Result<(Dataset, Dataset, Dataset)> {
    let ds = match &cfg.data_path {
        Some(p) => data::load(p)?,
        None => data::generate(&cfg.data)?,
    };
    data::stratified_split(&ds, cfg.split.val_fraction, cfg.split.test_fraction, cfg.data.seed)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsFile {
    pub records: usize,
    pub mean_loss: f64,
    pub thresholds: Vec<f64>,
    pub report: MetricsReport,
}

/// Thresholds from `val`, metrics on `test`.
fn metrics_for(model: &GraphS4mer, val: &Dataset, test: &Dataset) -> graphs4mer::Result<MetricsFile> {
    let v = evaluate_dataset(model, val, &[])?;
    let thresholds = select_thresholds(model.cfg.task, &v.scores, &v.labels)?;
    let t = evaluate_dataset(model, test, &thresholds)?;
    Ok(MetricsFile { records: test.len(), mean_loss: t.mean_loss, thresholds, report: t.report })
}

fn primary_name(task: Task) -> &'static str {
    match task {
        Task::Binary => "auroc",
        Task::Multiclass => "macro-f1",
        Task::Multilabel => "macro-auroc",
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let mut cfg = resolve_config(a.cfg.config.as_deref(), a.cfg.preset.as_deref(), a.cfg.seed)?;
    if let Some(n) = a.size {
        cfg.data.size = n;
    }
    let ds = data::generate(&cfg.data)?;
    data::store(&a.out, &ds)?;
    println!("wrote {} records to {}", ds.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = resolve_config(a.cfg.config.as_deref(), a.cfg.preset.as_deref(), a.cfg.seed)?;
    if a.data.is_some() {
        cfg.data_path = a.data;
    }
    cfg.validate()?;
    create_dir(&a.out)?;
    write(&a.out.join(CONFIG_FILE), to_json(&cfg))?;
    let (train_set, val, test) = splits(&cfg)?;
    let mut model = GraphS4mer::new(cfg.model.clone(), cfg.train.seed)?;
    eprintln!(
        "train {} / val {} / test {} records, {} parameters",
        train_set.len(),
        val.len(),
        test.len(),
        model.param_count()
    );
    let outcome = train_loop(&mut model, &train_set, &val, &cfg.train, |r| {
        eprintln!(
            "epoch {:>3}  lr {:.2e}  train {:.4}  val {:.4}  metric {:.4}",
            r.epoch, r.lr, r.train_loss, r.val_loss, r.val_metric
        )
    })?;
    model.round_params_f32();
    write(&a.out.join(CHECKPOINT_FILE), model.to_checkpoint()?)?;
    write(&a.out.join(HISTORY_FILE), history_csv(&outcome.history))?;
    let metrics = metrics_for(&model, &val, &test)?;
    write(&a.out.join(METRICS_FILE), to_json(&metrics))?;
    println!(
        "best epoch {} (val {:.4}); test {} {:.4}",
        outcome.best_epoch, outcome.best_metric, primary_name(model.cfg.task), metrics.report.primary
    );
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let cfg = load_run_config(&a.run)?;
    let model = load_model(&a.run)?;
    let (_, val, test) = splits(&cfg)?;
    let test = match &a.data {
        Some(p) => data::load(p)?,
        None => test,
    };
    let out = a.out.unwrap_or_else(|| a.run.join("eval"));
    create_dir(&out)?;
    let metrics = metrics_for(&model, &val, &test)?;
    write(&out.join(METRICS_FILE), to_json(&metrics))?;
    println!("{} {:.4} on {} records", primary_name(model.cfg.task), metrics.report.primary, metrics.records);
    if a.adjacency {
        let ev = evaluate_dataset(&model, &test, &metrics.thresholds)?;
        let classes = ev
            .labels
            .iter()
            .map(|l| match l {
                Label::Class(c) => Ok(*c),
                Label::Multi(_) => Err(config_error("class mean adjacency needs single-label records")),
            })
            .collect::<CliResult<Vec<_>>>()?;
        let n_classes = classes.iter().max().map_or(0, |m| m + 1);
        let cm = class_mean_adjacency(&ev.graphs, &classes, &ev.correct, n_classes)?;
        for (c, mean) in cm.means.iter().enumerate() {
            if let Some(w) = mean {
                write(&out.join(format!("class{c}_mean_adjacency.csv")), adjacency_csv(w))?;
            }
        }
        write(&out.join("delta.csv"), delta_table(&cm)?)?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let (model, report) = graphs4mer::model::desk_gradcheck(a.seed, a.h)?;
    println!(
        "desk model, seed {}, {} parameters, h {:e}: max relative error {:.3e}",
        a.seed,
        model.param_count(),
        a.h,
        report.max_rel_err
    );
    if report.max_rel_err > a.tol {
        return Err(CliError { code: EXIT_TOLERANCE, msg: format!("above tolerance {:e}", a.tol) });
    }
    Ok(())
}

fn export_adj(a: ExportAdjArgs) -> CliResult<()> {
    let cfg = load_run_config(&a.run)?;
    let model = load_model(&a.run)?;
    let ds = match &a.data {
        Some(p) => data::load(p)?,
        None => splits(&cfg)?.2,
    };
    create_dir(&a.out)?;
    for &i in &a.records {
        let rec = ds
            .records
            .get(i)
            .ok_or_else(|| config_error(format!("record {i} out of range for {} records", ds.len())))?;
        let out = model.predict(rec)?;
        for (t, w) in out.graphs.adjacency.iter().enumerate() {
            write(&a.out.join(format!("{}_w{t}.csv", rec.id)), adjacency_csv(w))?;
        }
        println!("{}: {} graphs", rec.id, out.graphs.n_d());
    }
    Ok(())
}

fn profile(a: ProfileArgs) -> CliResult<()> {
    if a.d == 0 || a.n == 0 {
        return Err(config_error("--d and --n must be positive"));
    }
    let params = gsl_param_count(a.d);
    match a.seq_len {
        Some(_) => println!("n_d,r,params,macs"),
        None => println!("n_d,params,macs"),
    }
    for n_d in a.sweep_nd {
        let macs = gsl_macs(a.n, a.d, n_d);
        match a.seq_len {
            Some(t) if t % n_d == 0 => println!("{n_d},{},{params},{macs}", t / n_d),
            Some(_) => println!("{n_d},-,{params},{macs}"),
            None => println!("{n_d},{params},{macs}"),
        }
    }
    Ok(())
}

fn threads(flag: Option<usize>) -> CliResult<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("GS4_THREADS") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| config_error(format!("GS4_THREADS must be a count, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = threads(cli.threads).and_then(|n| {
        if let Some(n) = n {
            if n == 0 {
                return Err(config_error("thread count must be positive"));
            }
            // A second call in one process keeps the first pool.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        match cli.cmd {
            Command::GenData(a) => gen_data(a),
            Command::Train(a) => train(a),
            Command::Eval(a) => eval(a),
            Command::Gradcheck(a) => gradcheck(a),
            Command::ExportAdj(a) => export_adj(a),
            Command::Profile(a) => profile(a),
        }
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            e.code
        }
    }
}
