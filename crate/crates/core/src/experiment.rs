//! Experiment configs, output files and run comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::data::{generate, load_csv, CsvSchema, DataError, SyntheticSpec};
use crate::engine::{run, EngineError, Mode, RunConfig, RunOutput, TraceEvent};
use crate::metrics::{attack_success_rate, IterationMetrics};
use crate::models::LabeledDataset;
use crate::simulator::{backdoor_test_set, inject_faults, time_ratio, DelayModel};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("input error: {0}")]
    Input(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("run failed: {0}")]
    Engine(#[from] EngineError),
}

impl ExperimentError {
    /// Process exit code: 2 for anything wrong with the inputs, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Data(_) | Self::Input(_) => 2,
            Self::Engine(EngineError::InvalidConfig(_)) => 2,
            Self::Io { .. } | Self::Engine(_) => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// One file per worker, sharing one schema.
    Csv { paths: Vec<PathBuf>, schema: CsvSchema },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub run: RunConfig,
    pub data: DataSource,
    #[serde(default)]
    pub delay: DelayModel,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Write `trace.jsonl` next to the metrics.
    #[serde(default = "default_true")]
    pub write_trace: bool,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_true() -> bool {
    true
}

/// Short flag names accepted in place of their dotted keys.
const ALIASES: [(&str, &str); 4] = [("seed", "run.seed"), ("mode", "run.mode"), ("gamma", "run.set.gamma"), ("out", "output_dir")];

/// Reads a config file and applies `key=value` overrides to it. Keys are
/// dotted paths into the fully defaulted config; values parse as JSON and
/// fall back to plain strings. Returns the config and its resolved JSON.
pub fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<(ExperimentConfig, Value), ExperimentError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, overrides)
}

pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<(ExperimentConfig, Value), ExperimentError> {
    let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let mut value = serde_json::to_value(&config).map_err(|e| ExperimentError::Config(e.to_string()))?;
    for (key, raw) in overrides {
        let key = ALIASES.iter().find(|(a, _)| a == key).map_or(key.as_str(), |(_, full)| full);
        let slot = key
            .split('.')
            .try_fold(&mut value, |v, part| v.get_mut(part))
            .ok_or_else(|| ExperimentError::Config(format!("unknown key {key}")))?;
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
    }
    let config: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let resolved = serde_json::to_value(&config).map_err(|e| ExperimentError::Config(e.to_string()))?;
    Ok((config, resolved))
}

/// Splits `--key=value` / `--key value` arguments into pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, ExperimentError> {
    let mut out = Vec::new();
    let mut iter = args.iter();
    while let Some(arg) = iter.next() {
        let body = arg
            .strip_prefix("--")
            .ok_or_else(|| ExperimentError::Config(format!("unexpected argument {arg}")))?;
        match body.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = iter.next().ok_or_else(|| ExperimentError::Config(format!("missing value for --{body}")))?;
                out.push((body.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

/// Worker datasets named by the config, before fault injection. CSV labels
/// are mapped to class ids by first appearance across all files in order.
pub fn load_datasets(source: &DataSource) -> Result<Vec<LabeledDataset>, ExperimentError> {
    match source {
        DataSource::Synthetic(spec) => Ok(generate(spec)?),
        DataSource::Csv { paths, schema } => {
            if paths.is_empty() {
                return Err(ExperimentError::Config("no csv paths".into()));
            }
            let loaded = paths
                .iter()
                .enumerate()
                .map(|(j, p)| load_csv(p, schema, j))
                .collect::<Result<Vec<_>, _>>()?;
            let mut names: Vec<String> = Vec::new();
            for file in &loaded {
                for name in &file.label_names {
                    if !names.contains(name) {
                        names.push(name.clone());
                    }
                }
            }
            let classes = names.len().max(2);
            loaded
                .into_iter()
                .enumerate()
                .map(|(j, file)| {
                    let d = file.dataset;
                    let labels = d
                        .labels()
                        .iter()
                        .map(|&y| names.iter().position(|n| *n == file.label_names[y]).unwrap_or(0))
                        .collect();
                    LabeledDataset::new(d.features().to_vec(), labels, d.dim(), classes, j)
                        .map_err(|e| ExperimentError::Data(e.into()))
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub iterations: usize,
    pub vtime: f64,
    pub t_eps: Option<usize>,
    pub peak_planes: usize,
    pub plane_iterations: usize,
    pub final_gap: f64,
    pub final_worst_loss: f64,
    pub attack_success_rate: Option<f64>,
}

/// Loads data, injects faults, runs, and writes `resolved-config.json`,
/// `metrics.csv`, `summary.json` and (optionally) `trace.jsonl`.
pub fn execute(config: &ExperimentConfig, resolved: &Value) -> Result<(RunOutput, RunSummary), ExperimentError> {
    let clean = load_datasets(&config.data)?;
    config.run.validate(clean.len())?;
    config.delay.validate(clean.len()).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.run.seed);
    rng.set_stream(u64::MAX);
    let (data, _) = inject_faults(&clean, &config.run.faults, &mut rng).map_err(|e| ExperimentError::Config(e.to_string()))?;

    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let resolved_path = dir.join("resolved-config.json");
    let text = serde_json::to_string_pretty(resolved).map_err(|e| ExperimentError::Config(e.to_string()))?;
    fs::write(&resolved_path, text + "\n").map_err(io_err(&resolved_path))?;

    info!("running {:?} on {} workers", config.run.mode, data.len());
    let out = run(&config.run, &data, &config.delay)?;
    let attack = match &config.run.faults.backdoor {
        Some(b) if !config.run.faults.malicious.is_empty() => {
            let set = backdoor_test_set(&clean, b).map_err(|e| ExperimentError::Config(e.to_string()))?;
            Some(attack_success_rate(&out.z, &out.spec, &set, b.target_label).map_err(EngineError::from)?)
        }
        _ => None,
    };
    let last = out.metrics.last().ok_or_else(|| ExperimentError::Input("run produced no metrics".into()))?;
    let summary = RunSummary {
        iterations: out.iterations,
        vtime: out.vtime,
        t_eps: out.t_eps,
        peak_planes: out.peak_planes,
        plane_iterations: out.plane_iterations,
        final_gap: last.gap,
        final_worst_loss: last.worst_loss,
        attack_success_rate: attack,
    };
    write_metrics(&dir.join("metrics.csv"), &out.metrics)?;
    if config.write_trace {
        write_trace(&dir.join("trace.jsonl"), &out.trace)?;
    }
    let summary_path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| ExperimentError::Input(e.to_string()))?;
    fs::write(&summary_path, text + "\n").map_err(io_err(&summary_path))?;
    info!("wrote outputs to {}", dir.display());
    Ok((out, summary))
}

pub const METRIC_COLUMNS: [&str; 9] =
    ["t", "vtime", "gap", "worst_loss", "worst_acc", "acc_std", "planes", "sum_lambda", "mal_weight"];

/// Flat metric row as stored in `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub t: usize,
    pub vtime: f64,
    pub gap: f64,
    pub worst_loss: f64,
    pub worst_acc: f64,
    pub acc_std: f64,
    pub planes: usize,
    pub sum_lambda: f64,
    pub mal_weight: f64,
}

impl From<&IterationMetrics> for MetricRow {
    fn from(m: &IterationMetrics) -> Self {
        Self {
            t: m.t,
            vtime: m.vtime,
            gap: m.gap,
            worst_loss: m.worst_loss,
            worst_acc: m.worst_acc,
            acc_std: m.acc_std,
            planes: m.planes,
            sum_lambda: m.sum_lambda,
            mal_weight: m.mal_weight,
        }
    }
}

pub fn write_metrics(path: &Path, rows: &[IterationMetrics]) -> Result<(), ExperimentError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| ExperimentError::Io {
        path: path.display().to_string(),
        source: e.into(),
    })?;
    for row in rows {
        writer.serialize(MetricRow::from(row)).map_err(|e| ExperimentError::Io {
            path: path.display().to_string(),
            source: e.into(),
        })?;
    }
    writer.flush().map_err(io_err(path))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>, ExperimentError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| ExperimentError::Input(format!("{}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| ExperimentError::Input(format!("{}: {e}", path.display())))?;
    if headers.iter().ne(METRIC_COLUMNS) {
        return Err(ExperimentError::Input(format!(
            "{}: columns {:?} differ from {:?}",
            path.display(),
            headers.iter().collect::<Vec<_>>(),
            METRIC_COLUMNS
        )));
    }
    let rows = reader
        .deserialize()
        .collect::<Result<Vec<MetricRow>, _>>()
        .map_err(|e| ExperimentError::Input(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        return Err(ExperimentError::Input(format!("{}: no rows", path.display())));
    }
    Ok(rows)
}

pub fn write_trace(path: &Path, trace: &[TraceEvent]) -> Result<(), ExperimentError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for event in trace {
        serde_json::to_writer(&mut w, event).map_err(|e| ExperimentError::Io {
            path: path.display().to_string(),
            source: e.into(),
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Per-run figures read back from a metric table.
#[derive(Debug, Clone, PartialEq)]
pub struct RunStats {
    pub name: String,
    pub final_worst_loss: f64,
    pub t_eps: Option<usize>,
    pub peak_planes: usize,
    pub iterations: usize,
    pub vtime: f64,
    /// Synchronous-vs-async timing inputs, when a resolved config sits next
    /// to the metrics: mode, `S` and deterministic delays.
    timing: Option<(Mode, usize, Vec<f64>)>,
}

impl RunStats {
    pub fn from_rows(name: String, rows: &[MetricRow], eps: f64) -> Self {
        let last = rows.last().expect("rows are nonempty");
        Self {
            name,
            final_worst_loss: last.worst_loss,
            t_eps: rows.iter().find(|r| r.gap <= eps).map(|r| r.t),
            peak_planes: rows.iter().map(|r| r.planes).max().unwrap_or(0),
            iterations: last.t,
            vtime: last.vtime,
            timing: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRatios {
    pub a: usize,
    pub b: usize,
    pub worst_loss: f64,
    pub t_eps: Option<f64>,
    pub peak_planes: f64,
    pub vtime: f64,
    /// Predicted completion-time ratio for an async run `a` against a sync
    /// run `b` with the same deterministic delays.
    pub predicted_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub runs: Vec<RunStats>,
    pub pairs: Vec<PairRatios>,
}

fn deterministic_delays(delay: &DelayModel, n: usize) -> Option<Vec<f64>> {
    match delay {
        DelayModel::Constant { delay } => Some(vec![*delay; n]),
        DelayModel::PerWorker { delays } => Some(delays.clone()),
        DelayModel::Lognormal { .. } => None,
    }
}

fn timing_inputs(metrics_path: &Path) -> Option<(Mode, usize, Vec<f64>)> {
    let text = fs::read_to_string(metrics_path.with_file_name("resolved-config.json")).ok()?;
    let config: ExperimentConfig = serde_json::from_str(&text).ok()?;
    let workers = match &config.data {
        DataSource::Synthetic(s) => s.workers,
        DataSource::Csv { paths, .. } => paths.len(),
    };
    let s = if config.run.mode == Mode::Sync { workers } else { config.run.s };
    Some((config.run.mode, s, deterministic_delays(&config.delay, workers)?))
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else {
        a / b
    }
}

pub fn compare_stats(runs: Vec<RunStats>) -> Comparison {
    let mut pairs = Vec::new();
    for a in 0..runs.len() {
        for b in a + 1..runs.len() {
            let (x, y) = (&runs[a], &runs[b]);
            let predicted_time = match (&x.timing, &y.timing) {
                (Some((ma, s, da)), Some((Mode::Sync, _, db))) if *ma != Mode::Sync && da == db => {
                    Some(time_ratio(x.iterations as f64, y.iterations as f64, *s, da))
                }
                (Some((Mode::Sync, _, da)), Some((mb, s, db))) if *mb != Mode::Sync && da == db => {
                    Some(1.0 / time_ratio(y.iterations as f64, x.iterations as f64, *s, db))
                }
                _ => None,
            };
            pairs.push(PairRatios {
                a,
                b,
                worst_loss: ratio(x.final_worst_loss, y.final_worst_loss),
                t_eps: x.t_eps.zip(y.t_eps).map(|(p, q)| ratio(p as f64, q as f64)),
                peak_planes: ratio(x.peak_planes as f64, y.peak_planes as f64),
                vtime: ratio(x.vtime, y.vtime),
                predicted_time,
            });
        }
    }
    Comparison { runs, pairs }
}

/// Reads at least two metric tables and summarizes them.
pub fn compare(paths: &[PathBuf], eps: f64) -> Result<Comparison, ExperimentError> {
    if paths.len() < 2 {
        return Err(ExperimentError::Input("compare needs at least two metric files".into()));
    }
    let mut runs = Vec::new();
    for path in paths {
        let rows = read_metrics(path)?;
        let mut stats = RunStats::from_rows(path.display().to_string(), &rows, eps);
        stats.timing = timing_inputs(path);
        runs.push(stats);
    }
    Ok(compare_stats(runs))
}

fn opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "run\tfinal_worst_loss\tT(eps)\tpeak_planes\titerations\tvtime\tname")?;
        for (i, r) in self.runs.iter().enumerate() {
            writeln!(
                f,
                "{i}\t{:.6}\t{}\t{}\t{}\t{}\t{}",
                r.final_worst_loss,
                opt(r.t_eps),
                r.peak_planes,
                r.iterations,
                r.vtime,
                r.name
            )?;
        }
        writeln!(f)?;
        writeln!(f, "pair\tworst_loss\tT(eps)\tpeak_planes\tvtime\tpredicted_vtime")?;
        for p in &self.pairs {
            writeln!(
                f,
                "{}/{}\t{:.6}\t{}\t{:.6}\t{:.9}\t{}",
                p.a,
                p.b,
                p.worst_loss,
                opt(p.t_eps.map(|x| format!("{x:.6}"))),
                p.peak_planes,
                p.vtime,
                opt(p.predicted_time.map(|x| format!("{x:.9}")))
            )?;
        }
        Ok(())
    }
}

/// Key/value view of the resolved config for logging.
pub fn flatten(value: &Value) -> BTreeMap<String, String> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.to_string());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", value, &mut out);
    out
}
