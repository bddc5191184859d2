//! Runs every configured normalization method on one dataset and writes
//! `curves_<method>.csv` plus `summary.json` into the output directory.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use ctxnorm::contexts::{assign_nearest, context_proportions, extract_features, Sidecar};
use ctxnorm::{assign_contexts, ContextSource, Rng};
use ctxnorm_train::{
    build_model, evaluate, train, Dataset, MetricLog, Metrics, ModelSpec, NormKind, NormSpec, TrainConfig,
};

use crate::config::{ContextConfig, DatasetConfig, ExperimentConfig, ModelName};
use crate::csv_data::load_csv;
use crate::error::{CliError, Result};
use crate::idx::load_mnist_idx;
use crate::synthetic::gen_synthetic_gmm;

pub const SUMMARY_FILE: &str = "summary.json";
pub const FAILED_FILE: &str = "FAILED";

/// Outcome of one method. Metrics are absent when the run failed, and the
/// training rows are absent when no epoch was run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: NormKind,
    /// Contexts or mixture components used by the layer (1 for BN and LN).
    pub k: usize,
    pub status: String,
    pub initial_train: Option<Metrics>,
    pub final_train: Option<Metrics>,
    /// Inference-mode metrics on the held-out split, or on the training
    /// set when nothing is held out.
    pub eval: Option<Metrics>,
}

impl MethodResult {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodTiming {
    pub method: NormKind,
    pub epoch_seconds: Vec<f64>,
    pub mean_epoch_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSummary {
    pub strategy: String,
    pub k: usize,
    /// Training-set proportions; empty when no method needed contexts.
    pub lambdas: Vec<f64>,
}

/// Contents of `summary.json`. Only `timestamp` and `wall_clock` differ
/// between two runs of the same config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub timestamp: u64,
    pub config: ExperimentConfig,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub contexts: ContextSummary,
    pub methods: Vec<MethodResult>,
    pub wall_clock: Vec<MethodTiming>,
}

impl Summary {
    pub fn method(&self, kind: NormKind) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == kind)
    }

    pub fn timing(&self, kind: NormKind) -> Option<&MethodTiming> {
        self.wall_clock.iter().find(|m| m.method == kind)
    }

    /// The summary with the run-dependent fields cleared.
    pub fn reproducible_part(&self) -> Self {
        Self { timestamp: 0, wall_clock: Vec::new(), ..self.clone() }
    }
}

pub fn read_summary(dir: &Path) -> Result<Summary> {
    let path = dir.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse { path, message: e.to_string() })
}

pub fn curves_path(dir: &Path, kind: NormKind) -> PathBuf {
    dir.join(format!("curves_{}.csv", kind.name()))
}

pub fn read_curves(dir: &Path, kind: NormKind) -> Result<MetricLog> {
    let path = curves_path(dir, kind);
    let file = std::fs::File::open(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(MetricLog::read_csv(file)?)
}

/// Writes through a temporary file so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// Loaded data split into training and held-out parts, with contexts.
struct Prepared {
    train: Dataset,
    eval: Option<Dataset>,
    train_ids: Option<Vec<usize>>,
    eval_ids: Option<Vec<usize>>,
    contexts: ContextSummary,
}

/// Dataset, its shipped contexts (if any) and each sample's row in the
/// source files.
fn load_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, Option<Vec<usize>>, Vec<usize>)> {
    match &cfg.dataset {
        DatasetConfig::MnistIdx { images, labels, subset_n } => {
            let (data, rows) = load_mnist_idx(images, labels, *subset_n, cfg.seed)?;
            Ok((data, None, rows))
        }
        DatasetConfig::SyntheticGmm { k_true, n, dim, separation, seed } => {
            let (data, ctx) = gen_synthetic_gmm(*k_true, *n, *dim, *separation, &mut Rng::new(*seed))?;
            Ok((data, Some(ctx), (0..*n).collect()))
        }
        DatasetConfig::Csv { path } => {
            let (data, ctx) = load_csv(path)?;
            let n = data.len();
            Ok((data, ctx, (0..n).collect()))
        }
    }
}

fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(Sidecar::from_json(&text)?)
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (data, shipped, rows) = load_dataset(cfg)?;
    let n = data.len();
    let (train_idx, eval_idx) = if cfg.eval_fraction > 0.0 {
        let mut order: Vec<usize> = (0..n).collect();
        Rng::with_stream(cfg.seed, 1).shuffle(&mut order);
        let held = ((n as f64 * cfg.eval_fraction).round() as usize).max(1);
        if n - held < 2 {
            return Err(CliError::Config(format!("eval_fraction leaves {} training samples", n - held)));
        }
        let eval = order.split_off(n - held);
        (order, Some(eval))
    } else {
        ((0..n).collect(), None)
    };
    let train = data.subset(&train_idx)?;
    let eval = eval_idx.as_deref().map(|idx| data.subset(idx)).transpose()?;
    let needs_ids = cfg.methods.iter().any(|m| m.needs_contexts());
    let pick = |ids: &[usize], idx: &[usize]| idx.iter().map(|&i| ids[i]).collect::<Vec<_>>();

    // Ids for every loaded sample, or for the training and held-out parts.
    let (strategy, k, train_ids, eval_ids) = match &cfg.contexts {
        ContextConfig::Kmeans { k, .. } if !needs_ids => ("kmeans", *k, None, None),
        ContextConfig::Kmeans { k, features, max_iters } => {
            let a = assign_contexts(ContextSource::Kmeans {
                inputs: &train.inputs,
                features: *features,
                k: *k,
                seed: cfg.seed,
                max_iters: *max_iters,
            })?;
            let eval_ids = match (&eval, &a.centroids) {
                (Some(e), Some(c)) => Some(assign_nearest(c, &extract_features(&e.inputs, *features)?)?),
                _ => None,
            };
            ("kmeans", *k, Some(a.ids), eval_ids)
        }
        ContextConfig::True => {
            let ids = shipped.ok_or_else(|| CliError::Config("dataset has no true contexts".into()))?;
            let k = ids.iter().max().map_or(1, |m| m + 1);
            let eval_ids = eval_idx.as_deref().map(|idx| pick(&ids, idx));
            ("true", k, Some(pick(&ids, &train_idx)), eval_ids)
        }
        ContextConfig::Superclass { sidecar } => {
            let map = read_sidecar(sidecar)?.superclass_map()?;
            let a = assign_contexts(ContextSource::Superclass { labels: &data.labels, map: &map })?;
            let eval_ids = eval_idx.as_deref().map(|idx| pick(&a.ids, idx));
            ("superclass", a.k, Some(pick(&a.ids, &train_idx)), eval_ids)
        }
        ContextConfig::Domain { sidecar } => {
            let side = read_sidecar(sidecar)?;
            let all = side.domains.as_ref().ok_or_else(|| CliError::Config("domain sidecar has no \"domains\"".into()))?;
            let tags = rows
                .iter()
                .map(|&r| all.get(r).cloned())
                .collect::<Option<Vec<String>>>()
                .ok_or_else(|| CliError::Config(format!("{} domain tags do not cover the dataset", all.len())))?;
            let mut order = side.domain_names.clone().unwrap_or_default();
            if side.domain_names.is_none() {
                for t in all {
                    if !order.contains(t) {
                        order.push(t.clone());
                    }
                }
            }
            let a = assign_contexts(ContextSource::Domain { tags: &tags, names: Some(&order) })?;
            let eval_ids = eval_idx.as_deref().map(|idx| pick(&a.ids, idx));
            ("domain", a.k, Some(pick(&a.ids, &train_idx)), eval_ids)
        }
    };
    if k == 0 {
        return Err(CliError::Config("K must be at least 1".into()));
    }
    let lambdas = match &train_ids {
        Some(ids) if needs_ids => context_proportions(ids, k)?,
        _ => Vec::new(),
    };
    Ok(Prepared {
        train,
        eval,
        train_ids: train_ids.filter(|_| needs_ids),
        eval_ids: eval_ids.filter(|_| needs_ids),
        contexts: ContextSummary { strategy: strategy.into(), k, lambdas },
    })
}

fn method_k(kind: NormKind, k: usize) -> usize {
    match kind {
        NormKind::None | NormKind::Bn | NormKind::Ln => 1,
        _ => k,
    }
}

fn model_spec(cfg: &ExperimentConfig, data: &Dataset, norm: NormSpec) -> ModelSpec {
    match cfg.model {
        ModelName::Mlp => {
            let dim = data.inputs.len() / data.len().max(1);
            ModelSpec::mlp(dim, &cfg.hidden, data.classes, norm)
        }
        ModelName::SmallCnn => ModelSpec::small_cnn(data.shape, data.classes, norm),
    }
}

fn run_method(cfg: &ExperimentConfig, prep: &Prepared, kind: NormKind) -> Result<(MethodResult, MetricLog)> {
    let k = method_k(kind, prep.contexts.k);
    let mut norm = NormSpec::new(kind, k);
    if kind.needs_contexts() {
        norm = norm.with_lambdas(prep.contexts.lambdas.clone());
    }
    let mut model = build_model(&model_spec(cfg, &prep.train, norm), cfg.seed)?;
    let ids = prep.train_ids.as_deref().filter(|_| kind.needs_contexts());
    let eval_ids = prep.eval_ids.as_deref().filter(|_| kind.needs_contexts());
    let tcfg = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        optimizer: cfg.optimizer.clone(),
    };
    let log = train(&mut model, &prep.train, ids, &tcfg, prep.eval.as_ref().map(|e| (e, eval_ids)))?;
    let eval = match &prep.eval {
        Some(e) => evaluate(&mut model, e, eval_ids, cfg.batch_size)?,
        None => evaluate(&mut model, &prep.train, ids, cfg.batch_size)?,
    };
    let result = MethodResult {
        method: kind,
        k,
        status: "ok".into(),
        initial_train: log.first("train").map(|r| r.metrics()),
        final_train: log.last("train").map(|r| r.metrics()),
        eval: Some(eval),
    };
    Ok((result, log))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Runs the comparison and writes the report. Methods run one after
/// another; a failing method is recorded and the rest still run, then the
/// call returns an error and leaves a `FAILED` marker beside the outputs.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Summary> {
    run_experiment_with(cfg, |_| {})
}

/// [`run_experiment`] reporting progress messages to `progress`.
pub fn run_experiment_with(cfg: &ExperimentConfig, mut progress: impl FnMut(&str)) -> Result<Summary> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let marker = dir.join(FAILED_FILE);
    if marker.exists() {
        std::fs::remove_file(&marker).map_err(|e| CliError::io(&marker, e))?;
    }
    let fail = |msg: &str| write_atomic(&marker, format!("{msg}\n").as_bytes());

    let prep = match prepare(cfg) {
        Ok(p) => p,
        Err(e) => {
            fail(&e.to_string())?;
            return Err(e);
        }
    };
    progress(&format!(
        "{} training / {} eval samples, {} contexts (K={})",
        prep.train.len(),
        prep.eval.as_ref().map_or(0, |e| e.len()),
        prep.contexts.strategy,
        prep.contexts.k
    ));

    let mut methods = Vec::new();
    let mut wall_clock = Vec::new();
    let mut failures = Vec::new();
    for &kind in &cfg.methods {
        progress(&format!("{kind}: training"));
        let outcome = run_method(cfg, &prep, kind).and_then(|(result, log)| {
            let mut csv = Vec::new();
            log.write_csv(&mut csv)?;
            write_atomic(&curves_path(dir, kind), &csv)?;
            Ok((result, log))
        });
        match outcome {
            Ok((result, log)) => {
                let secs = log.epoch_seconds.clone();
                let mean = if secs.is_empty() { 0.0 } else { secs.iter().sum::<f64>() / secs.len() as f64 };
                progress(&format!("{kind}: done, {mean:.2} s/epoch"));
                wall_clock.push(MethodTiming { method: kind, epoch_seconds: secs, mean_epoch_seconds: mean });
                methods.push(result);
            }
            Err(e) => {
                progress(&format!("{kind}: failed: {e}"));
                failures.push(format!("{kind}: {e}"));
                methods.push(MethodResult {
                    method: kind,
                    k: method_k(kind, prep.contexts.k),
                    status: format!("failed: {e}"),
                    initial_train: None,
                    final_train: None,
                    eval: None,
                });
            }
        }
    }

    let summary = Summary {
        timestamp: now(),
        config: cfg.clone(),
        train_samples: prep.train.len(),
        eval_samples: prep.eval.as_ref().map_or(0, |e| e.len()),
        contexts: prep.contexts.clone(),
        methods,
        wall_clock,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Config(e.to_string()))?;
    write_atomic(&dir.join(SUMMARY_FILE), format!("{json}\n").as_bytes())?;
    if failures.is_empty() {
        Ok(summary)
    } else {
        let msg = failures.join("; ");
        fail(&msg)?;
        Err(CliError::MethodsFailed(failures.len(), msg))
    }
}

fn order_key(kind: NormKind) -> usize {
    NormKind::METHODS.iter().position(|&m| m == kind).unwrap_or(NormKind::METHODS.len())
}

/// Plain-text table of a report, one row per method in the fixed method
/// order.
pub fn emit_summary_table(dir: &Path) -> Result<String> {
    Ok(format_table(&read_summary(dir)?))
}

pub fn format_table(summary: &Summary) -> String {
    let header = ["method", "K", "train_loss", "train_acc", "eval_loss", "eval_acc", "precision", "recall", "f1", "s/epoch"];
    let mut rows: Vec<&MethodResult> = summary.methods.iter().collect();
    rows.sort_by_key(|m| order_key(m.method));
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    let mut cells: Vec<Vec<String>> = vec![header.iter().map(|h| h.to_string()).collect()];
    for m in rows {
        let mut row = vec![m.method.name().to_string(), m.k.to_string()];
        if m.ok() {
            row.push(fmt(m.final_train.map(|t| t.loss)));
            row.push(fmt(m.final_train.map(|t| t.accuracy)));
            let e = m.eval;
            row.extend([e.map(|e| e.loss), e.map(|e| e.accuracy), e.map(|e| e.precision), e.map(|e| e.recall), e.map(|e| e.f1)].map(fmt));
            row.push(summary.timing(m.method).map_or("-".into(), |t| format!("{:.3}", t.mean_epoch_seconds)));
        } else {
            row.push("FAILED".into());
            row.extend(std::iter::repeat_n("-".to_string(), header.len() - 3));
        }
        cells.push(row);
    }
    let widths: Vec<usize> = (0..header.len()).map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| if c == 0 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}
