//! Experiment configuration files.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use eda_core::datagen::{IngestOptions, MonthWindow, ShiftProfile, YearMonth, DEFAULT_MIN_DOMAIN_SIZE};
use eda_core::divergence::{Conditioning, Estimator, BANDWIDTH_SAMPLE_CAP};
use eda_core::RunConfig;
use serde::Deserialize;
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StreamSpec {
    Generator(ShiftProfile),
    Ingest(IngestSpec),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub start: String,
    pub end: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSpec {
    /// NDJSON or CSV record file; relative paths start at the config file.
    pub path: PathBuf,
    pub source_window: WindowSpec,
    #[serde(default = "one")]
    pub window_len: usize,
    #[serde(default = "default_min_domain_size")]
    pub min_domain_size: usize,
    #[serde(default = "yes")]
    pub stratify: bool,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSpec {
    #[serde(default = "yes")]
    pub bootstrap: bool,
    #[serde(default = "default_resamples")]
    pub n_resamples: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "yes")]
    pub correlation: bool,
    /// Resample the concatenated test sets instead of each domain.
    #[serde(default)]
    pub pooled: bool,
}

impl Default for MetricsSpec {
    fn default() -> Self {
        MetricsSpec { bootstrap: true, n_resamples: 1000, level: 0.95, correlation: true, pooled: false }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivergenceSpec {
    #[serde(default)]
    pub enabled: bool,
    /// `"marginal"`, `"class:<c>"` or `"conditional"` (every class).
    #[serde(default = "default_conditioning")]
    pub conditioning: Vec<String>,
    #[serde(default)]
    pub estimator: Estimator,
    #[serde(default = "default_cap")]
    pub subsample_cap: Option<usize>,
}

impl Default for DivergenceSpec {
    fn default() -> Self {
        DivergenceSpec {
            enabled: false,
            conditioning: default_conditioning(),
            estimator: Estimator::Biased,
            subsample_cap: default_cap(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    stream: StreamSpec,
    methods: Vec<Value>,
    #[serde(default)]
    metrics: MetricsSpec,
    #[serde(default)]
    divergence: DivergenceSpec,
    output_dir: PathBuf,
    #[serde(default)]
    global_seed: u64,
}

/// A parsed experiment with method seeds filled in and paths resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub stream: StreamSpec,
    pub methods: Vec<RunConfig>,
    pub metrics: MetricsSpec,
    pub divergence: DivergenceSpec,
    pub output_dir: PathBuf,
    pub global_seed: u64,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

fn yes() -> bool {
    true
}
fn one() -> usize {
    1
}
fn default_min_domain_size() -> usize {
    DEFAULT_MIN_DOMAIN_SIZE
}
fn default_resamples() -> usize {
    1000
}
fn default_level() -> f64 {
    0.95
}
fn default_conditioning() -> Vec<String> {
    vec!["marginal".into()]
}
fn default_cap() -> Option<usize> {
    Some(BANDWIDTH_SAMPLE_CAP)
}

fn config_error(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {msg}", path.display()))
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, path: &Path, prefix: &str) -> Result<T, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let at = match (prefix.is_empty(), field == ".") {
            (true, _) => field,
            (false, true) => prefix.to_string(),
            (false, false) => format!("{prefix}.{field}"),
        };
        config_error(path, format!("at `{at}`: {}", e.inner()))
    })
}

/// Reads a JSON file into `T`, naming the offending field on failure.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| config_error(path, e))?;
    parse_json(&text, path, "")
}

fn valid_label(label: &str) -> bool {
    !label.is_empty() && label.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c))
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| config_error(path, e))?;
        let raw: RawConfig = parse_json(&text, path, "")?;
        let base = path.parent().unwrap_or(Path::new("."));
        let global_seed = overrides.seed.unwrap_or(raw.global_seed);
        let mut methods = Vec::with_capacity(raw.methods.len());
        for (i, mut value) in raw.methods.into_iter().enumerate() {
            if let Value::Object(map) = &mut value {
                map.entry("seed").or_insert_with(|| Value::from(global_seed));
            }
            methods.push(parse_json::<RunConfig>(&value.to_string(), path, &format!("methods[{i}]"))?);
        }
        let mut stream = raw.stream;
        if let StreamSpec::Ingest(spec) = &mut stream {
            spec.path = base.join(&spec.path);
        }
        let output_dir = overrides.output_dir.clone().unwrap_or_else(|| base.join(raw.output_dir));
        let cfg = ExperimentConfig { stream, methods, metrics: raw.metrics, divergence: raw.divergence, output_dir, global_seed };
        cfg.validate().map_err(|m| config_error(path, m))?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), String> {
        if self.methods.is_empty() {
            return Err("`methods` must list at least one method".into());
        }
        let mut seen = BTreeSet::new();
        for (i, m) in self.methods.iter().enumerate() {
            let label = m.label();
            if !valid_label(&label) {
                return Err(format!("at `methods[{i}].name`: {label:?} may only use letters, digits, '_', '-' and '.'"));
            }
            if !seen.insert(label.clone()) {
                return Err(format!("at `methods[{i}]`: duplicate method label {label:?}; set `name` to tell runs apart"));
            }
        }
        if self.metrics.n_resamples == 0 {
            return Err("at `metrics.n_resamples`: must be positive".into());
        }
        if !(self.metrics.level > 0.0 && self.metrics.level < 1.0) {
            return Err(format!("at `metrics.level`: {} is not in (0, 1)", self.metrics.level));
        }
        if self.divergence.subsample_cap.is_some_and(|c| c < 2) {
            return Err("at `divergence.subsample_cap`: must be at least 2".into());
        }
        for (i, c) in self.divergence.conditioning.iter().enumerate() {
            if c != "conditional" {
                c.parse::<Conditioning>().map_err(|e| format!("at `divergence.conditioning[{i}]`: {e}"))?;
            }
        }
        if let StreamSpec::Ingest(spec) = &self.stream {
            if spec.window_len == 0 {
                return Err("at `stream.ingest.window_len`: must be positive".into());
            }
            self.ingest_options().map_err(|e| format!("at `stream.ingest.source_window`: {e}"))?;
        }
        Ok(())
    }

    /// Ingest options for an `ingest` stream; the split seed is the
    /// global seed.
    pub fn ingest_options(&self) -> Result<IngestOptions, String> {
        let StreamSpec::Ingest(spec) = &self.stream else {
            return Err("stream is not an ingest stream".into());
        };
        let start = YearMonth::parse(&spec.source_window.start).map_err(|e| e.to_string())?;
        let end = YearMonth::parse(&spec.source_window.end).map_err(|e| e.to_string())?;
        if end < start {
            return Err(format!("window ends ({end}) before it starts ({start})"));
        }
        Ok(IngestOptions {
            source_window: MonthWindow { start, end },
            window_len: spec.window_len,
            min_domain_size: spec.min_domain_size,
            class_names: spec.class_names.clone(),
            stratify: spec.stratify,
            seed: self.global_seed,
        })
    }

    /// Requested conditionings with `conditional` expanded to every class.
    pub fn conditionings(&self, num_classes: usize) -> Vec<Conditioning> {
        let mut out = Vec::new();
        for c in &self.divergence.conditioning {
            let expanded: Vec<Conditioning> = if c == "conditional" {
                (0..num_classes).map(Conditioning::Class).collect()
            } else {
                vec![c.parse().expect("validated")]
            };
            for e in expanded {
                if !out.contains(&e) {
                    out.push(e);
                }
            }
        }
        out
    }
}
