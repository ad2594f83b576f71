//! Command-line front end: `generate`, `train`, `evaluate`, `export-plot`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::datagen::{self, DataError, Dataset, GenConfig};
use crate::deeponet::{Architecture, ConvSpec, DeepONetModel, LossBreakdown, ModelError};
use crate::model_file::{ModelFileError, ModelMeta, SavedModel, MODEL_FORMAT};
use crate::nets::Activation;
use crate::train::{self, Mode, TrainConfig, TrainData, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numeric(_) => 2,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Linalg(_) => CliError::Numeric(e.to_string()),
            _ => usage(e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::NonFinite { .. } | TrainError::ZeroReference(_) => CliError::Numeric(e.to_string()),
            _ => usage(e),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Gp(_) | DataError::Fdm { .. } => CliError::Numeric(e.to_string()),
            _ => usage(e),
        }
    }
}

impl From<ModelFileError> for CliError {
    fn from(e: ModelFileError) -> Self {
        match e {
            ModelFileError::Model(m) => m.into(),
            _ => usage(e),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "deeponet", version, about = "DeepONet training with least-squares last-layer solves")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Adam,
    LsAdam,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Adam => Mode::Adam,
            ModeArg::LsAdam => Mode::LsAdam,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample input functions and reference solutions into a dataset file.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes model.don, metrics.csv, ls_events.csv and config.resolved.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Run directory; must not already contain a run.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Relative L² errors and loss components of a trained model, as JSON.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge metrics files into one long-format `run,wu,series,value` CSV.
    ExportPlot {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub conv: Vec<ConvSpec>,
    pub branch_widths: Vec<usize>,
    pub trunk_widths: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Swish
}

impl ModelSpec {
    /// Input sizes come from the dataset.
    pub fn architecture(&self, ds: &Dataset) -> Architecture {
        Architecture {
            branch_input: ds.meta.input_len,
            branch_image: if self.conv.is_empty() { None } else { ds.meta.input_image },
            conv: self.conv.clone(),
            branch_widths: self.branch_widths.clone(),
            trunk_input: ds.eval_points.cols(),
            trunk_widths: self.trunk_widths.clone(),
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

pub const PRESETS: &[&str] = &[
    "advection",
    "advection_unsupervised",
    "diffusion_reaction",
    "poisson_coefficient",
    "poisson_bc",
    "poisson_bc_unsupervised",
    "poisson_source",
    "toy_advection",
];

/// Network sizes and training settings of the named experiment.
pub fn preset(name: &str) -> Option<Value> {
    let fcn = |width: usize| json!({ "branch_widths": [width, width, width], "trunk_widths": [width, width, width] });
    let conv = |k: [usize; 3]| {
        json!([
            { "channels": 16, "kernel": [k[0], k[0]], "stride": [2, 2] },
            { "channels": 32, "kernel": [k[1], k[1]], "stride": [2, 2] },
            { "channels": 64, "kernel": [k[2], k[2]], "stride": [2, 2] },
        ])
    };
    let train = |lambda: Value| {
        json!({
            "mode": "ls_adam",
            "seed": 0,
            "warmup_epochs": 500,
            "adam_epochs_per_wu": 5,
            "total_wus": 10000,
            "batch_size": 50,
            "lambda": lambda,
        })
    };
    let (m, t) = match name {
        "advection" | "advection_unsupervised" | "diffusion_reaction" => (fcn(100), train(json!({ "constant": 1e-6 }))),
        "poisson_bc" => (fcn(150), train(json!({ "constant": 1e-6 }))),
        "poisson_bc_unsupervised" => (fcn(150), train(json!({ "constant": 1e-9 }))),
        "poisson_coefficient" => (
            json!({ "conv": conv([2, 2, 2]), "branch_widths": [150, 150], "trunk_widths": [150, 150, 150] }),
            train(json!({ "constant": 1e-9 })),
        ),
        "poisson_source" => (
            json!({ "conv": conv([3, 2, 2]), "branch_widths": [150, 150], "trunk_widths": [150, 150, 150] }),
            train(json!({ "log_linear": { "start": 1e-9, "end": 1e-14, "start_wu": 100, "end_wu": 1000 } })),
        ),
        "toy_advection" => (
            json!({ "branch_widths": [50, 50], "trunk_widths": [50, 50] }),
            json!({
                "mode": "ls_adam",
                "seed": 0,
                "warmup_epochs": 100,
                "adam_epochs_per_wu": 5,
                "total_wus": 200,
                "batch_size": 50,
                "lambda": { "constant": 1e-6 },
            }),
        ),
        _ => return None,
    };
    Some(json!({ "model": m, "train": t }))
}

/// Fields of the user's `model` and `train` sections replace the preset's one key at a time.
pub fn resolve_run_config(raw: &Value) -> Result<RunConfig> {
    let obj = raw.as_object().ok_or_else(|| usage("config must be a JSON object"))?;
    let mut merged = match obj.get("preset") {
        Some(Value::String(name)) => {
            let mut base = preset(name).ok_or_else(|| usage(format!("unknown preset {name:?}; known: {}", PRESETS.join(", "))))?;
            base["preset"] = Value::String(name.clone());
            base
        }
        Some(_) => return Err(usage("preset must be a string")),
        None => json!({}),
    };
    for (key, value) in obj {
        if key == "preset" {
            continue;
        }
        match (merged.get_mut(key), value) {
            (Some(Value::Object(base)), Value::Object(over)) => {
                for (k, v) in over {
                    base.insert(k.clone(), v.clone());
                }
            }
            _ => {
                merged[key] = value.clone();
            }
        }
    }
    serde_json::from_value(merged).map_err(|e| usage(format!("invalid training config: {e}")))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().ok_or_else(|| usage(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let io = |e: std::io::Error| usage(format!("cannot write {}: {e}", path.display()));
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

pub fn cmd_generate(config: &Path, out: &Path, seed: Option<u64>) -> Result<String> {
    let mut cfg: GenConfig = serde_json::from_value(read_json(config)?).map_err(|e| usage(format!("invalid dataset config: {e}")))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ds = datagen::generate(&cfg)?;
    write_atomic(out, &ds.to_bytes()?)?;
    Ok(ds.summary())
}

pub const RUN_FILES: [&str; 4] = ["model.don", "metrics.csv", "ls_events.csv", "config.resolved.json"];

pub fn cmd_train(config: &Path, dataset: &Path, out_dir: &Path, seed: Option<u64>, mode: Option<Mode>) -> Result<String> {
    let mut cfg = resolve_run_config(&read_json(config)?)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(m) = mode {
        cfg.train.mode = m;
    }
    cfg.train.validate()?;
    if let Some(f) = RUN_FILES.iter().find(|f| out_dir.join(f).exists()) {
        return Err(usage(format!(
            "{} already holds a run ({f} exists); resuming is not supported, choose a new directory",
            out_dir.display()
        )));
    }
    let ds = Dataset::read(dataset)?;
    let arch = cfg.model.architecture(&ds);
    let model = DeepONetModel::new(&arch, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    let outcome = train::train(model, &ds.train_data(), &ds.validation(), &cfg.train)?;
    let last = outcome.metrics.last().expect("at least one metrics row");

    fs::create_dir_all(out_dir).map_err(|e| usage(format!("cannot create {}: {e}", out_dir.display())))?;
    let saved = SavedModel {
        meta: ModelMeta {
            format: MODEL_FORMAT.into(),
            architecture: arch.clone(),
            mode: cfg.train.mode,
            final_wu: last.wu,
            final_lambda: last.lambda,
            term_weights: cfg.train.term_weights.clone(),
        },
        model: outcome.model.clone(),
    };
    let mut metrics = Vec::new();
    train::write_metrics_csv(&outcome.metrics, &mut metrics).map_err(usage)?;
    let mut events = Vec::new();
    train::write_ls_events_csv(&outcome.ls_events, &mut events).map_err(usage)?;
    let resolved = json!({
        "preset": cfg.preset,
        "model": cfg.model,
        "train": cfg.train,
        "architecture": arch,
        "dataset": { "path": dataset.display().to_string(), "config": ds.meta.config },
        "num_params": outcome.model.num_params(),
    });
    let mut resolved = serde_json::to_vec_pretty(&resolved).map_err(usage)?;
    resolved.push(b'\n');

    write_atomic(&out_dir.join("model.don"), &saved.to_bytes()?)?;
    write_atomic(&out_dir.join("metrics.csv"), &metrics)?;
    write_atomic(&out_dir.join("ls_events.csv"), &events)?;
    write_atomic(&out_dir.join("config.resolved.json"), &resolved)?;
    Ok(format!(
        "trained {} WUs ({:?}): train loss {:.6e}, validation rel. L2 {:.6e}\n",
        last.wu, cfg.train.mode, last.train_loss, last.val_rel_l2
    ))
}

fn loss_json(data: &TrainData, loss: &LossBreakdown, lambda: f64) -> Value {
    let terms: Vec<Value> = data
        .terms
        .iter()
        .zip(&loss.term_mse)
        .map(|(t, mse)| json!({ "name": t.name, "weight": t.weight, "mse": mse }))
        .collect();
    json!({
        "lambda": lambda,
        "terms": terms,
        "regularization": loss.regularization,
        "total": loss.total,
    })
}

fn split_report(model: &DeepONetModel, data: &TrainData, val: &train::Validation, lambda: f64) -> Result<Value> {
    let errs = train::relative_l2_errors(model, val)?;
    let mut sorted = errs.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let loss = model.loss(&data.inputs, &data.terms, lambda)?;
    Ok(json!({
        "functions": n,
        "mean_rel_l2": errs.iter().sum::<f64>() / n as f64,
        "median_rel_l2": median,
        "max_rel_l2": sorted[n - 1],
        "per_function_rel_l2": errs,
        "loss": loss_json(data, &loss, lambda),
    }))
}

pub fn cmd_evaluate(model_path: &Path, dataset: &Path) -> Result<Value> {
    let saved = SavedModel::read(model_path)?;
    let ds = Dataset::read(dataset)?;
    if ds.train.is_empty() || ds.val.is_empty() {
        return Err(usage(format!(
            "empty dataset: {} training and {} validation functions",
            ds.train.len(),
            ds.val.len()
        )));
    }
    let model = &saved.model;
    if model.branch_input_len() != ds.meta.input_len || model.trunk_input_dim() != ds.eval_points.cols() {
        return Err(usage(format!(
            "model expects inputs of length {} and {}-D points, dataset has {} and {}",
            model.branch_input_len(),
            model.trunk_input_dim(),
            ds.meta.input_len,
            ds.eval_points.cols()
        )));
    }
    let weighted = |d: TrainData| match &saved.meta.term_weights {
        Some(w) => d.with_weights(w),
        None => Ok(d),
    };
    let train_data = weighted(ds.train_data())?;
    let val_data = weighted(ds.val_data())?;
    let lambda = saved.meta.final_lambda;
    Ok(json!({
        "model": {
            "path": model_path.display().to_string(),
            "mode": saved.meta.mode,
            "final_wu": saved.meta.final_wu,
            "final_lambda": lambda,
            "num_params": model.num_params(),
        },
        "dataset": dataset.display().to_string(),
        "validation": split_report(model, &val_data, &ds.validation(), lambda)?,
        "train": split_report(model, &train_data, &ds.train_validation(), lambda)?,
    }))
}

/// Long-format merge. Values are copied verbatim, so nothing is lost to reformatting.
pub fn cmd_export_plot(paths: &[PathBuf], out: &Path) -> Result<usize> {
    let mut text = String::from("run,wu,series,value\n");
    let mut rows = 0;
    let mut seen: HashMap<String, usize> = HashMap::new();
    for path in paths {
        let content = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
        let bad = |line: usize, msg: &str| usage(format!("{}:{line}: {msg}", path.display()));
        let mut lines = content.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| bad(1, "empty file"))?.split(',').collect();
        if header.len() < 2 || header[0] != "wu" || header.iter().any(|h| h.is_empty()) {
            return Err(bad(1, "header must be `wu,<series>...`"));
        }
        let run = run_name(path, &mut seen);
        for (k, line) in lines.enumerate() {
            let lineno = k + 2;
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != header.len() {
                return Err(bad(lineno, &format!("expected {} fields, found {}", header.len(), cells.len())));
            }
            cells[0].parse::<usize>().map_err(|_| bad(lineno, "wu is not a non-negative integer"))?;
            for (series, value) in header[1..].iter().zip(&cells[1..]) {
                value.parse::<f64>().map_err(|_| bad(lineno, &format!("{series} is not a number")))?;
                text.push_str(&format!("{run},{},{series},{value}\n", cells[0]));
                rows += 1;
            }
        }
    }
    write_atomic(out, text.as_bytes())?;
    Ok(rows)
}

/// Run label: the directory name for `<dir>/metrics.csv`, otherwise the file stem.
fn run_name(path: &Path, seen: &mut HashMap<String, usize>) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let dir = path.parent().and_then(|p| p.file_name()).map(|s| s.to_string_lossy().into_owned());
    let base = match dir {
        Some(d) if stem == "metrics" => d,
        _ => stem,
    };
    let base: String = base.chars().map(|c| if c == ',' || c == '\n' { '_' } else { c }).collect();
    let count = seen.entry(base.clone()).or_insert(0);
    *count += 1;
    if *count == 1 {
        base
    } else {
        format!("{base}#{count}")
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut stdout = std::io::stdout();
    let out = |s: &str, w: &mut std::io::Stdout| w.write_all(s.as_bytes()).map_err(usage);
    match cli.command {
        Command::Generate { config, out: path, seed } => {
            let s = cmd_generate(&config, &path, seed)?;
            out(&s, &mut stdout)
        }
        Command::Train {
            config,
            dataset,
            out: dir,
            seed,
            mode,
        } => {
            let s = cmd_train(&config, &dataset, &dir, seed, mode.map(Mode::from))?;
            out(&s, &mut stdout)
        }
        Command::Evaluate { model, dataset, out: path } => {
            let report = cmd_evaluate(&model, &dataset)?;
            let mut text = serde_json::to_string_pretty(&report).map_err(usage)?;
            text.push('\n');
            match path {
                Some(p) => write_atomic(&p, text.as_bytes()),
                None => out(&text, &mut stdout),
            }
        }
        Command::ExportPlot { metrics, out: path } => {
            let n = cmd_export_plot(&metrics, &path)?;
            out(&format!("wrote {n} rows to {}\n", path.display()), &mut stdout)
        }
    }
}
