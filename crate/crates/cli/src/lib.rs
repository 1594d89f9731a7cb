//! Experiment driver: reads a JSON experiment description, builds or loads
//! the stream, runs every method and writes reports, traces and
//! discrepancy tables.

pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use eda_core::datagen::{self, generate_stream, generated_records, DataError, ShiftProfile};
use eda_core::divergence::{mmd_matrix, Conditioning, MmdMatrix};
use eda_core::export;
use eda_core::metrics::{
    gain_shift_bootstrap, gain_vs_shift, paired_bootstrap, relative_gain, BootstrapResult, Correlation, PairedDomain,
    Resampling, ScatterPoint,
};
use eda_core::selftrain::run_method;
use eda_core::{DomainStream, EvalReport, Method, MethodTrace};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{ExperimentConfig, Overrides, StreamSpec};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<eda_core::Error> for CliError {
    fn from(e: eda_core::Error) -> Self {
        match e {
            eda_core::Error::Config(_) | eda_core::Error::Data(DataError::InvalidProfile(_)) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        eda_core::Error::from(e).into()
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Builds the stream described by the config: generated with the global
/// seed, or ingested from a record file.
pub fn build_stream(cfg: &ExperimentConfig) -> Result<DomainStream, CliError> {
    match &cfg.stream {
        StreamSpec::Generator(profile) => Ok(generate_stream(profile, cfg.global_seed)?),
        StreamSpec::Ingest(spec) => {
            let opts = cfg.ingest_options().map_err(CliError::Config)?;
            Ok(datagen::load_stream(&spec.path, &opts)?)
        }
    }
}

/// Difference `a - b` in average macro-F1 with its bootstrap interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    #[serde(flatten)]
    pub result: BootstrapResult,
}

/// Everything one `run` produces, before it is written out.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub stream: DomainStream,
    /// In config order.
    pub traces: Vec<(String, MethodTrace)>,
    pub reports: BTreeMap<String, EvalReport>,
    /// Every pair, higher average first; empty when bootstrapping is off.
    pub comparisons: Vec<Comparison>,
    pub matrices: Vec<MmdMatrix>,
    pub scatter: BTreeMap<String, Vec<ScatterPoint>>,
}

impl Experiment {
    pub fn trace(&self, label: &str) -> Option<&MethodTrace> {
        self.traces.iter().find(|(l, _)| l == label).map(|(_, t)| t)
    }

    pub fn comparison(&self, a: &str, b: &str) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.a == a && c.b == b)
    }

    /// Labels sorted by average macro-F1, best first.
    pub fn ranking(&self) -> Vec<&str> {
        let mut labels: Vec<&str> = self.reports.keys().map(String::as_str).collect();
        labels.sort_by(|a, b| self.reports[*b].f_avg.total_cmp(&self.reports[*a].f_avg).then(a.cmp(b)));
        labels
    }

    /// Table of average macro-F1 and normalized gain, best first.
    pub fn summary(&self) -> String {
        let width = self.reports.keys().map(String::len).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}  {:>7}  {:>10}\n", "method", "F_avg", "gain_norm");
        for label in self.ranking() {
            let r = &self.reports[label];
            let gain = r.delta_avg_norm.map_or("-".to_string(), |g| format!("{g:.4}"));
            let _ = writeln!(out, "{label:<width$}  {:>7.4}  {gain:>10}", r.f_avg);
        }
        out
    }
}

fn first_label(traces: &[(String, MethodTrace)], method: Method) -> Option<&str> {
    traces.iter().find(|(_, t)| t.method == method).map(|(l, _)| l.as_str())
}

fn pairs<'a>(a: &'a MethodTrace, b: &'a MethodTrace, golds: &'a [Vec<usize>]) -> Vec<PairedDomain<'a>> {
    golds
        .iter()
        .enumerate()
        .map(|(i, g)| PairedDomain { preds_a: a.predictions(i + 1), preds_b: b.predictions(i + 1), golds: g })
        .collect()
}

fn check_conditionings(stream: &DomainStream, conds: &[Conditioning]) -> Result<(), CliError> {
    let conditional = conds.iter().any(|c| matches!(c, Conditioning::Class(_)));
    if conditional && !stream.fully_labeled() {
        return Err(CliError::Config(
            "class-conditional discrepancy needs gold labels on every instance, but this stream has unlabeled records; \
             request only \"marginal\""
                .into(),
        ));
    }
    Ok(())
}

fn compute_matrices(cfg: &ExperimentConfig, stream: &DomainStream, conds: &[Conditioning]) -> Result<Vec<MmdMatrix>, CliError> {
    conds
        .iter()
        .map(|&c| {
            mmd_matrix(stream, c, cfg.divergence.estimator, cfg.divergence.subsample_cap, cfg.global_seed)
                .map_err(|e| eda_core::Error::from(e).into())
        })
        .collect()
}

/// Runs every configured method on `stream` and derives the reports.
pub fn run_experiment(cfg: &ExperimentConfig, stream: DomainStream) -> Result<Experiment, CliError> {
    let conds = if cfg.divergence.enabled { cfg.conditionings(stream.num_classes) } else { vec![] };
    check_conditionings(&stream, &conds)?;
    let traces: Vec<(String, MethodTrace)> = cfg
        .methods
        .par_iter()
        .map(|m| {
            info!("running {}", m.label());
            run_method(&stream, m).map(|t| (m.label(), t)).map_err(|e| match CliError::from(e) {
                CliError::Config(s) => CliError::Config(format!("{}: {s}", m.label())),
                CliError::Runtime(s) => CliError::Runtime(format!("{}: {s}", m.label())),
            })
        })
        .collect::<Result<_, _>>()?;
    let mut reports: BTreeMap<String, EvalReport> = BTreeMap::new();
    for (label, trace) in &traces {
        reports.insert(label.clone(), trace.report().map_err(runtime)?);
    }

    let golds: Vec<Vec<usize>> = (1..=stream.num_targets()).map(|t| stream.test_golds(t)).collect();
    let m = stream.num_classes;
    let metrics = &cfg.metrics;
    let resampling = if metrics.pooled { Resampling::Pooled } else { Resampling::PerDomain };
    let src = first_label(&traces, Method::SrcOnly).map(str::to_string);
    let sup = first_label(&traces, Method::Supervised).map(str::to_string);

    if let (Some(src), Some(sup)) = (&src, &sup) {
        let (fs, fu) = (reports[src].f_avg, reports[sup].f_avg);
        for r in reports.values_mut() {
            r.delta_avg_norm = relative_gain(r.f_avg, fs, fu).ok();
        }
        if fs == fu {
            warn!("source-only and supervised averages coincide; normalized gain is undefined");
        }
    }

    let mut matrices = compute_matrices(cfg, &stream, &conds)?;
    let mut scatter = BTreeMap::new();
    if let Some(src) = &src {
        let src_trace = &traces.iter().find(|(l, _)| l == src).expect("present").1;
        for (label, trace) in traces.iter().filter(|(l, _)| l != src) {
            let d = pairs(trace, src_trace, &golds);
            let report = reports.get_mut(label).expect("present");
            if metrics.bootstrap {
                report.bootstrap =
                    Some(paired_bootstrap(&d, m, metrics.n_resamples, metrics.level, cfg.global_seed, resampling).map_err(runtime)?);
            }
        }
        if metrics.correlation {
            let marginal = match matrices.iter().find(|x| x.conditioning == Conditioning::Marginal) {
                Some(x) => x.clone(),
                None => compute_matrices(cfg, &stream, &[Conditioning::Marginal])?.remove(0),
            };
            let to_source = marginal.to_source();
            let src_f = src_trace.per_domain_f();
            for (label, trace) in traces.iter().filter(|(l, _)| l != src) {
                let gs = gain_vs_shift(&trace.per_domain_f(), &src_f, &to_source).map_err(runtime)?;
                let report = reports.get_mut(label).expect("present");
                report.correlation = gs.pearson_r.map(|r| Correlation { pearson_r: r, n: gs.points.len(), ci_low: None, ci_high: None });
                if let (Some(c), true) = (&mut report.correlation, metrics.bootstrap) {
                    let d = pairs(trace, src_trace, &golds);
                    match gain_shift_bootstrap(&d, &to_source, m, metrics.n_resamples, metrics.level, cfg.global_seed) {
                        Ok(ci) => {
                            c.ci_low = Some(ci.ci_low);
                            c.ci_high = Some(ci.ci_high);
                        }
                        Err(e) => warn!("{label}: no correlation interval: {e}"),
                    }
                }
                scatter.insert(label.clone(), gs.points);
            }
        }
    }
    matrices.retain(|x| conds.contains(&x.conditioning));

    let mut experiment = Experiment { stream, traces, reports, comparisons: vec![], matrices, scatter };
    if metrics.bootstrap {
        let ranking: Vec<String> = experiment.ranking().into_iter().map(str::to_string).collect();
        for (i, a) in ranking.iter().enumerate() {
            for b in &ranking[i + 1..] {
                let d = pairs(experiment.trace(a).expect("ranked"), experiment.trace(b).expect("ranked"), &golds);
                let result = paired_bootstrap(&d, m, metrics.n_resamples, metrics.level, cfg.global_seed, resampling)
                    .map_err(runtime)?;
                experiment.comparisons.push(Comparison { a: a.clone(), b: b.clone(), result });
            }
        }
    }
    Ok(experiment)
}

/// File stem used for a discrepancy matrix export.
pub fn mmd_file_name(c: Conditioning) -> String {
    match c {
        Conditioning::Marginal => "mmd_marginal.csv".into(),
        Conditioning::Class(k) => format!("mmd_class_{k}.csv"),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write_matrices(dir: &Path, matrices: &[MmdMatrix]) -> Result<Vec<PathBuf>, CliError> {
    let mut written = Vec::new();
    for mat in matrices {
        let path = dir.join(mmd_file_name(mat.conditioning));
        export::write_mmd(&path, mat).map_err(runtime)?;
        written.push(path);
    }
    Ok(written)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
}

/// Writes `results.json`, `comparisons.json`, `per_domain.csv`,
/// `traces/<label>.csv`, matrix CSVs with sidecars and
/// `scatter_<label>.csv` under `dir`.
pub fn write_outputs(dir: &Path, exp: &Experiment) -> Result<(), CliError> {
    create_dir(&dir.join("traces"))?;
    write_json(&dir.join("results.json"), &exp.reports)?;
    if !exp.comparisons.is_empty() {
        write_json(&dir.join("comparisons.json"), &exp.comparisons)?;
    }
    export::write_per_domain(&dir.join("per_domain.csv"), exp.traces.iter().map(|(l, t)| (l.as_str(), t)))
        .map_err(runtime)?;
    for (label, trace) in &exp.traces {
        export::write_trace(&dir.join("traces").join(format!("{label}.csv")), trace).map_err(runtime)?;
    }
    write_matrices(dir, &exp.matrices)?;
    for (label, points) in &exp.scatter {
        export::write_scatter(&dir.join(format!("scatter_{label}.csv")), points).map_err(runtime)?;
    }
    Ok(())
}

/// `run`: build the stream, run every method and write all outputs.
pub fn cmd_run(config_path: &Path, overrides: &Overrides) -> Result<Experiment, CliError> {
    let cfg = ExperimentConfig::load(config_path, overrides)?;
    let stream = build_stream(&cfg)?;
    info!("stream with {} target domains", stream.num_targets());
    let exp = run_experiment(&cfg, stream)?;
    create_dir(&cfg.output_dir)?;
    write_outputs(&cfg.output_dir, &exp)?;
    Ok(exp)
}

/// `gen`: materialize a generator profile as NDJSON records.
pub fn cmd_gen(profile_path: &Path, out_path: &Path, seed: u64) -> Result<usize, CliError> {
    let profile: ShiftProfile = config::read_json(profile_path)?;
    let stream = generate_stream(&profile, seed)?;
    let records = generated_records(&stream);
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    datagen::write_ndjson(&records, out_path)?;
    Ok(records.len())
}

/// `mmd`: compute and export only the discrepancy matrices.
pub fn cmd_mmd(config_path: &Path, overrides: &Overrides) -> Result<Vec<PathBuf>, CliError> {
    let cfg = ExperimentConfig::load(config_path, overrides)?;
    let stream = build_stream(&cfg)?;
    let conds = cfg.conditionings(stream.num_classes);
    check_conditionings(&stream, &conds)?;
    let mats = compute_matrices(&cfg, &stream, &conds)?;
    create_dir(&cfg.output_dir)?;
    write_matrices(&cfg.output_dir, &mats)
}
