use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ml2::dataset::{generate_synthetic, load_jsonl, save_jsonl, Dataset, SyntheticSpec};
use ml2::eval::{embed_all, evaluate, project_2d, MetricsReport};
use ml2::model::{load_checkpoint, save_checkpoint, EmbeddingModel};
use ml2::trainer::{train, TrainReport};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{io_error, CliError};

pub const DATA_MANIFEST: &str = "manifest.json";
pub const RUN_MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint-best.bin";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_ECHO_FILE: &str = "config.toml";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub command: String,
    pub spec: SyntheticSpec,
    pub files: BTreeMap<String, String>,
    pub counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub label_count: usize,
    pub config: RunConfig,
    pub checkpoint: String,
    pub checkpoint_iteration: usize,
    pub report: String,
    pub best_iteration: Option<usize>,
    pub best_val_nmi: Option<f64>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} {} does not exist", path.display())))
    }
}

/// Label count from an explicit value, else from the `manifest.json` next to
/// `data`.
pub fn resolve_label_count(data: &Path, explicit: Option<usize>) -> Result<usize, CliError> {
    if let Some(l) = explicit {
        return Ok(l);
    }
    let manifest = data.parent().unwrap_or(Path::new(".")).join(DATA_MANIFEST);
    if manifest.is_file() {
        let m: DataManifest = read_json(&manifest)?;
        return Ok(m.spec.label_count);
    }
    Err(CliError::Config(format!(
        "label count for {} unknown: no {DATA_MANIFEST} beside it and none given",
        data.display()
    )))
}

fn load_split(path: &Path, label_count: usize) -> Result<Dataset, CliError> {
    require_file(path, "dataset")?;
    Ok(load_jsonl(path, label_count)?)
}

#[derive(Debug, Clone)]
pub struct GenDataOutput {
    pub manifest: DataManifest,
    pub files: Vec<PathBuf>,
}

/// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` and a manifest echoing the
/// full generator spec.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<GenDataOutput, CliError> {
    let spec = cfg.data.to_spec()?;
    let splits = generate_synthetic(&spec)?;
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let mut files = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut paths = Vec::new();
    for (name, ds) in SPLITS.iter().zip([&splits.train, &splits.val, &splits.test]) {
        let file = format!("{name}.jsonl");
        let path = out.join(&file);
        save_jsonl(ds, &path)?;
        files.insert(name.to_string(), file);
        counts.insert(name.to_string(), ds.len());
        paths.push(path);
    }
    let manifest = DataManifest {
        command: "gen-data".into(),
        spec,
        files,
        counts,
    };
    write_json(&out.join(DATA_MANIFEST), &manifest)?;
    Ok(GenDataOutput { manifest, files: paths })
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub run_dir: PathBuf,
    pub report: TrainReport,
    pub manifest: RunManifest,
}

/// Trains on `<data_dir>/train.jsonl`, selects on `<data_dir>/val.jsonl` and
/// writes the best checkpoint, the report, the resolved config and a
/// manifest into the run directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainRun, CliError> {
    cfg.train.validate()?;
    let data_dir = cfg
        .paths
        .data_dir
        .as_deref()
        .ok_or_else(|| CliError::Config("no dataset directory (paths.data_dir or --data)".into()))?;
    let run_dir = cfg
        .paths
        .run_dir
        .as_deref()
        .ok_or_else(|| CliError::Config("no run directory (paths.run_dir or --run-dir)".into()))?;
    let train_path = data_dir.join("train.jsonl");
    let val_path = data_dir.join("val.jsonl");
    require_file(&train_path, "dataset")?;
    require_file(&val_path, "dataset")?;
    let label_count = resolve_label_count(&train_path, cfg.data.label_count)?;
    let train_ds = load_split(&train_path, label_count)?;
    let val_ds = load_split(&val_path, label_count)?;

    fs::create_dir_all(run_dir).map_err(|e| io_error(run_dir, e))?;
    fs::write(run_dir.join(CONFIG_ECHO_FILE), cfg.to_toml()?).map_err(|e| io_error(run_dir, e))?;
    let encoder = cfg.encoder_config(train_ds.feature_dim());
    let outcome = match train(&train_ds, &val_ds, &encoder, &cfg.train) {
        Ok(o) => o,
        Err(ml2::Error::TrainingAborted {
            iteration,
            reason,
            report,
        }) => {
            write_json(&run_dir.join(REPORT_FILE), &report)?;
            return Err(CliError::Runtime(format!(
                "training aborted at iteration {iteration}: {reason}"
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let report = outcome.report;
    let checkpoint_iteration = report.best_iteration.unwrap_or(0);
    save_checkpoint(&outcome.model, checkpoint_iteration, run_dir.join(CHECKPOINT_FILE))?;
    write_json(&run_dir.join(REPORT_FILE), &report)?;
    let manifest = RunManifest {
        command: "train".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.train.seed,
        label_count,
        config: cfg.clone(),
        checkpoint: CHECKPOINT_FILE.into(),
        checkpoint_iteration,
        report: REPORT_FILE.into(),
        best_iteration: report.best_iteration,
        best_val_nmi: report.best_val_nmi,
    };
    write_json(&run_dir.join(RUN_MANIFEST), &manifest)?;
    Ok(TrainRun {
        run_dir: run_dir.to_path_buf(),
        report,
        manifest,
    })
}

#[derive(Debug, Clone, Default)]
pub struct DataArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub label_count: Option<usize>,
}

impl DataArgs {
    fn load(&self) -> Result<(EmbeddingModel, Dataset), CliError> {
        require_file(&self.checkpoint, "checkpoint")?;
        let label_count = resolve_label_count(&self.data, self.label_count)?;
        let ds = load_split(&self.data, label_count)?;
        let (model, _) = load_checkpoint(&self.checkpoint)?;
        Ok((model, ds))
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub data: DataArgs,
    /// Split the probe is fitted on; `None` skips the probe.
    pub probe_train: Option<PathBuf>,
    pub seed: u64,
}

/// Probe split used when none is given: `train.jsonl` beside the evaluated
/// file, unless that file is itself the training split.
pub fn default_probe_train(data: &Path) -> Option<PathBuf> {
    let sibling = data.parent().unwrap_or(Path::new(".")).join("train.jsonl");
    let is_self = data.file_name() == sibling.file_name();
    (sibling.is_file() && !is_self).then_some(sibling)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<MetricsReport, CliError> {
    let (model, ds) = args.data.load()?;
    let probe = match &args.probe_train {
        Some(p) => Some(load_split(p, ds.label_count())?),
        None => None,
    };
    Ok(evaluate(&model, &ds, probe.as_ref(), args.seed)?)
}

fn csv_writer(out: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    csv::Writer::from_path(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))
}

fn csv_err(out: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", out.display()))
}

/// Writes `id,e0,…,e{m-1}`, one row per example. Returns the row count.
pub fn cmd_embed(args: &DataArgs, out: &Path) -> Result<usize, CliError> {
    let (model, ds) = args.load()?;
    let emb = embed_all(&model, &ds)?;
    let mut w = csv_writer(out)?;
    let mut header = vec!["id".to_string()];
    header.extend((0..model.embedding_dim()).map(|k| format!("e{k}")));
    w.write_record(&header).map_err(csv_err(out))?;
    for (e, row) in ds.examples().iter().zip(&emb) {
        let mut rec = vec![e.id.clone()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_err(out))?;
    }
    w.flush().map_err(|e| io_error(out, e))?;
    Ok(ds.len())
}

/// Writes `id,x,y,labels` with the two leading principal coordinates of the
/// embeddings; labels are `;`-separated.
pub fn cmd_project(args: &DataArgs, out: &Path) -> Result<usize, CliError> {
    let (model, ds) = args.load()?;
    let emb = embed_all(&model, &ds)?;
    let proj = project_2d(&emb)?;
    let mut w = csv_writer(out)?;
    w.write_record(["id", "x", "y", "labels"]).map_err(csv_err(out))?;
    for (e, c) in ds.examples().iter().zip(&proj.coords) {
        let labels: Vec<String> = e.labels.iter().map(|k| k.to_string()).collect();
        w.write_record([e.id.clone(), c[0].to_string(), c[1].to_string(), labels.join(";")])
            .map_err(csv_err(out))?;
    }
    w.flush().map_err(|e| io_error(out, e))?;
    Ok(ds.len())
}
