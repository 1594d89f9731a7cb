//! Stream construction: synthetic evolving-shift generators, ingestion of
//! precomputed embedding files, chronological partitioning and the 5:1:4
//! train/val/test split.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_for;
use crate::stream::{Domain, DomainStream, Instance, Split};

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: expected {expected} features, found {got}")]
    DimensionMismatch { line: usize, expected: usize, got: usize },
    #[error("record {id}: label {label:?} is not a known class")]
    UnknownLabel { id: String, label: String },
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("no records fall inside the source window")]
    EmptySource,
    #[error("no records fall after the source window")]
    NoTargets,
    #[error("record {0} predates the source window")]
    BeforeSource(String),
    #[error("record {id}: cannot parse timestamp {value:?}")]
    BadTimestamp { id: String, value: String },
    #[error("invalid month {0:?}, expected YYYY-MM")]
    BadMonth(String),
    #[error("duplicate record id {0}")]
    DuplicateId(String),
    #[error("domain {0} mixes records with and without a split assignment")]
    MixedSplits(String),
    #[error("a domain needs at least 10 instances to split, got {0}")]
    TooSmall(usize),
    #[error("instance {0} has no gold label")]
    MissingLabel(String),
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Sizes of the 5:1:4 split of `n` instances: validation gets `floor(n/10)`
/// and the remainder is divided 5:4 between train and test, rounding
/// toward train.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = n / 10;
    let rest = n - val;
    let train = (10 * rest + 9) / 18;
    (train, val, rest - train)
}

/// Largest-remainder apportionment of `total` slots over groups, honouring
/// per-group minimums and caps. Quotas are proportional to `weights`.
fn apportion(total: usize, weights: &[usize], mins: &[usize], caps: &[usize]) -> Vec<usize> {
    let wsum: usize = weights.iter().sum();
    let quota: Vec<f64> = weights.iter().map(|&w| w as f64 * total as f64 / wsum.max(1) as f64).collect();
    let mut alloc: Vec<usize> =
        (0..weights.len()).map(|g| (quota[g].floor() as usize).max(mins[g]).min(caps[g])).collect();
    let mut sum: usize = alloc.iter().sum();
    while sum < total {
        let g = (0..alloc.len())
            .filter(|&g| alloc[g] < caps[g])
            .max_by(|&a, &b| (quota[a] - alloc[a] as f64).total_cmp(&(quota[b] - alloc[b] as f64)).then(b.cmp(&a)))
            .expect("caps admit the total");
        alloc[g] += 1;
        sum += 1;
    }
    while sum > total {
        let g = (0..alloc.len())
            .filter(|&g| alloc[g] > mins[g])
            .min_by(|&a, &b| (quota[a] - alloc[a] as f64).total_cmp(&(quota[b] - alloc[b] as f64)).then(b.cmp(&a)))
            .expect("minimums admit the total");
        alloc[g] -= 1;
        sum -= 1;
    }
    alloc
}

/// Randomly repartitions all of a domain's instances into train, val and
/// test in a 5:1:4 ratio.
///
/// With `stratify`, each gold label (and the unlabeled group) is divided
/// in proportion, and every label with at least two instances lands in
/// both train and test. Each split comes back sorted by arrival order.
pub fn split_5_1_4(domain: Domain, seed: u64, stratify: bool) -> Result<Domain, DataError> {
    let Domain { index, name, train, val, test } = domain;
    let mut all: Vec<Instance> = train.into_iter().chain(val).chain(test).collect();
    let n = all.len();
    if n < 10 {
        return Err(DataError::TooSmall(n));
    }
    all.sort_by_key(|i| i.arrival_order);
    let (n_train, n_val, n_test) = split_sizes(n);
    let mut rng = rng_for(seed, "split", index as u64);

    let groups: Vec<Vec<usize>> = if stratify {
        let mut by_label: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
        for (i, inst) in all.iter().enumerate() {
            by_label.entry(inst.gold_label).or_default().push(i);
        }
        by_label.into_values().collect()
    } else {
        vec![(0..n).collect()]
    };
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let two_plus: Vec<usize> = sizes.iter().map(|&s| usize::from(stratify && s >= 2)).collect();
    let train_alloc = apportion(n_train, &sizes, &two_plus, &sizes);
    let test_caps: Vec<usize> = sizes.iter().zip(&train_alloc).map(|(s, t)| s - t).collect();
    let test_alloc = apportion(n_test, &sizes, &two_plus, &test_caps);
    debug_assert_eq!(sizes.iter().sum::<usize>() - train_alloc.iter().sum::<usize>() - test_alloc.iter().sum::<usize>(), n_val);

    let mut assignment = vec![Split::Val; n];
    for (g, mut members) in groups.into_iter().enumerate() {
        members.shuffle(&mut rng);
        for (k, &i) in members.iter().enumerate() {
            assignment[i] = if k < train_alloc[g] {
                Split::Train
            } else if k < train_alloc[g] + test_alloc[g] {
                Split::Test
            } else {
                Split::Val
            };
        }
    }
    let mut out = Domain { index, name, train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (inst, split) in all.into_iter().zip(assignment) {
        match split {
            Split::Train => out.train.push(inst),
            Split::Val => out.val.push(inst),
            Split::Test => out.test.push(inst),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub counts: Vec<usize>,
    pub proportions: Vec<f64>,
    pub total: usize,
}

/// Per-class counts and shares over all splits of a domain.
pub fn label_distribution(domain: &Domain, num_classes: usize) -> Result<LabelDistribution, DataError> {
    let mut counts = vec![0usize; num_classes];
    for inst in domain.instances() {
        let label = inst.gold_label.ok_or_else(|| DataError::MissingLabel(inst.id.clone()))?;
        counts[label] += 1;
    }
    Ok(distribution_from_counts(counts))
}

pub fn distribution_from_counts(counts: Vec<usize>) -> LabelDistribution {
    let total: usize = counts.iter().sum();
    let proportions = counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect();
    LabelDistribution { counts, proportions, total }
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShiftKind {
    GradualRotation,
    AbruptSwitch,
    LabelDrift,
}

/// Instances per domain: one count for every domain or one per domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DomainSizes {
    Uniform(usize),
    PerDomain(Vec<usize>),
}

/// Linear interpolation of class priors from the source to the last target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorDrift {
    pub from: Vec<f64>,
    pub to: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftProfile {
    pub kind: ShiftKind,
    /// Number of target domains.
    #[serde(rename = "T")]
    pub num_targets: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub n_per_domain: DomainSizes,
    pub noise_sigma: f64,
    /// Rotation per domain in radians.
    #[serde(default)]
    pub rotation_step: f64,
    /// First domain drawn from the displaced configuration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch_point: Option<usize>,
    /// Distance the class means move at the switch point.
    #[serde(default)]
    pub displacement: f64,
    /// Explicit class priors for domains `0..=T`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priors: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_drift: Option<PriorDrift>,
    #[serde(default = "default_true")]
    pub stratify: bool,
}

fn default_true() -> bool {
    true
}

impl ShiftProfile {
    /// Rotating class clusters with linearly drifting priors.
    pub fn gradual_rotation(
        num_targets: usize,
        n_per_domain: usize,
        rotation_step: f64,
        noise_sigma: f64,
        label_drift: Option<PriorDrift>,
    ) -> Self {
        ShiftProfile {
            kind: ShiftKind::GradualRotation,
            num_targets,
            num_classes: 2,
            dim: 2,
            n_per_domain: DomainSizes::Uniform(n_per_domain),
            noise_sigma,
            rotation_step,
            switch_point: None,
            displacement: 0.0,
            priors: None,
            label_drift,
            stratify: true,
        }
    }

    pub fn abrupt_switch(num_targets: usize, n_per_domain: usize, switch_point: usize, displacement: f64, noise_sigma: f64) -> Self {
        ShiftProfile {
            kind: ShiftKind::AbruptSwitch,
            switch_point: Some(switch_point),
            displacement,
            ..ShiftProfile::gradual_rotation(num_targets, n_per_domain, 0.0, noise_sigma, None)
        }
    }

    pub fn domain_size(&self, t: usize) -> usize {
        match &self.n_per_domain {
            DomainSizes::Uniform(n) => *n,
            DomainSizes::PerDomain(v) => v[t],
        }
    }

    /// Class priors of domain `t`.
    pub fn prior(&self, t: usize) -> Vec<f64> {
        if let Some(p) = &self.priors {
            return p[t].clone();
        }
        if let Some(d) = &self.label_drift {
            let w = if self.num_targets == 0 { 0.0 } else { t as f64 / self.num_targets as f64 };
            return d.from.iter().zip(&d.to).map(|(a, b)| a + (b - a) * w).collect();
        }
        vec![1.0 / self.num_classes as f64; self.num_classes]
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidProfile(m));
        if self.num_targets == 0 {
            return bad("T must be at least 1".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.dim < 2 {
            return bad("dim must be at least 2".into());
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return bad("noise_sigma must be a finite non-negative number".into());
        }
        if let DomainSizes::PerDomain(v) = &self.n_per_domain {
            if v.len() != self.num_targets + 1 {
                return bad(format!("n_per_domain lists {} sizes for {} domains", v.len(), self.num_targets + 1));
            }
        }
        for t in 0..=self.num_targets {
            let n = self.domain_size(t);
            if n == 0 {
                return bad(format!("n_per_domain is 0 for domain {t}"));
            }
            if n < 10 {
                return bad(format!("domain {t} has {n} instances; the 5:1:4 split needs at least 10"));
            }
        }
        if !self.rotation_step.is_finite() || self.rotation_step.abs() * self.num_targets as f64 >= std::f64::consts::FRAC_PI_2 {
            return bad("total rotation |rotation_step| * T must stay below pi/2".into());
        }
        if self.priors.is_some() && self.label_drift.is_some() {
            return bad("give either priors or label_drift, not both".into());
        }
        if let Some(p) = &self.priors {
            if p.len() != self.num_targets + 1 {
                return bad(format!("priors lists {} domains, expected {}", p.len(), self.num_targets + 1));
            }
        }
        if let Some(d) = &self.label_drift {
            if d.from.len() != self.num_classes || d.to.len() != self.num_classes {
                return bad("label_drift endpoints must have num_classes entries".into());
            }
        }
        for t in 0..=self.num_targets {
            let p = self.prior(t);
            if p.len() != self.num_classes {
                return bad(format!("prior of domain {t} has {} entries", p.len()));
            }
            if p.iter().any(|&v| v.is_nan() || v < 0.0) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad(format!("prior of domain {t} is not a probability vector"));
            }
        }
        match self.kind {
            ShiftKind::AbruptSwitch => match self.switch_point {
                Some(s) if (1..=self.num_targets + 1).contains(&s) => {}
                _ => return bad("AbruptSwitch needs switch_point in [1, T+1]".into()),
            },
            _ if self.switch_point.is_some() => return bad("switch_point only applies to AbruptSwitch".into()),
            _ => {}
        }
        if !self.displacement.is_finite() {
            return bad("displacement must be finite".into());
        }
        Ok(())
    }
}

/// First day of the month `offset` months after January 2000; synthetic
/// domains are laid out one per month from there.
fn synthetic_month(offset: usize) -> (i32, u32) {
    let m = offset as i32;
    (2000 + m / 12, (m % 12) as u32 + 1)
}

fn month_name(year: i32, month: u32) -> String {
    format!("{year:04}-{month:02}")
}

/// Class-mean of class `c` in domain `t`: evenly spaced on the unit circle
/// of the first coordinate plane, rotated by `t * rotation_step`, then
/// displaced along the second axis once the switch point is reached.
fn class_mean(profile: &ShiftProfile, t: usize, c: usize) -> [f64; 2] {
    let base = std::f64::consts::TAU * c as f64 / profile.num_classes as f64;
    let angle = base + profile.rotation_step * t as f64;
    let mut mean = [angle.cos(), angle.sin()];
    if let (ShiftKind::AbruptSwitch, Some(s)) = (profile.kind, profile.switch_point) {
        if t >= s {
            mean[1] += profile.displacement;
        }
    }
    mean
}

fn sample_class(prior: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (c, &p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    prior.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn generate(profile: &ShiftProfile, seed: u64) -> Result<DomainStream, DataError> {
    profile.validate()?;
    let mut order = 0u64;
    let mut domains = Vec::with_capacity(profile.num_targets + 1);
    for t in 0..=profile.num_targets {
        let mut rng = rng_for(seed, "gen-domain", t as u64);
        let prior = profile.prior(t);
        let (year, month) = synthetic_month(t);
        let instances: Vec<Instance> = (0..profile.domain_size(t))
            .map(|i| {
                let c = sample_class(&prior, rng.gen::<f64>());
                let mean = class_mean(profile, t, c);
                let features = (0..profile.dim)
                    .map(|k| {
                        let z: f64 = rng.sample(StandardNormal);
                        mean.get(k).copied().unwrap_or(0.0) + profile.noise_sigma * z
                    })
                    .collect();
                order += 1;
                Instance::labeled(format!("g{t:03}-{i:06}"), features, c, order - 1)
            })
            .collect();
        let domain = Domain { index: t, name: month_name(year, month), train: instances, val: vec![], test: vec![] };
        domains.push(split_5_1_4(domain, seed, profile.stratify)?);
    }
    Ok(DomainStream {
        domains,
        num_classes: profile.num_classes,
        dim: profile.dim,
        class_names: (0..profile.num_classes).map(|c| format!("class{c}")).collect(),
    })
}

fn require_kind(profile: &ShiftProfile, kind: ShiftKind) -> Result<(), DataError> {
    if profile.kind != kind {
        return Err(DataError::InvalidProfile(format!("expected a {kind:?} profile, got {:?}", profile.kind)));
    }
    Ok(())
}

/// Gaussian class clusters whose means rotate by `rotation_step` per
/// domain. Domain `t` draws each label from its prior `pi_t` and the
/// features from `N(R(t * step) mu_c, sigma^2 I)`.
pub fn gen_rotating_gaussians(profile: &ShiftProfile, seed: u64) -> Result<DomainStream, DataError> {
    require_kind(profile, ShiftKind::GradualRotation)?;
    generate(profile, seed)
}

/// Clusters that jump by `displacement` at `switch_point` and stay there.
pub fn gen_abrupt_switch(profile: &ShiftProfile, seed: u64) -> Result<DomainStream, DataError> {
    require_kind(profile, ShiftKind::AbruptSwitch)?;
    generate(profile, seed)
}

/// Fixed clusters with drifting class priors only.
pub fn gen_label_drift(profile: &ShiftProfile, seed: u64) -> Result<DomainStream, DataError> {
    require_kind(profile, ShiftKind::LabelDrift)?;
    generate(profile, seed)
}

/// Dispatches on the profile kind.
pub fn generate_stream(profile: &ShiftProfile, seed: u64) -> Result<DomainStream, DataError> {
    generate(profile, seed)
}

// ---------------------------------------------------------------------------
// Record files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub timestamp: String,
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

fn looks_like_csv(path: &Path, first_line: Option<&str>) -> bool {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => true,
        Some(ext) if ext.eq_ignore_ascii_case("ndjson") || ext.eq_ignore_ascii_case("jsonl") => false,
        _ => first_line.is_some_and(|l| !l.trim_start().starts_with('{')),
    }
}

/// Reads NDJSON or CSV records in file order.
pub fn load_records(path: &Path) -> Result<Vec<RawRecord>, DataError> {
    let text = fs::read_to_string(path)?;
    let first = text.lines().find(|l| !l.trim().is_empty());
    if looks_like_csv(path, first) {
        parse_csv(&text)
    } else {
        parse_ndjson(&text)
    }
}

fn check_dim(dim: &mut Option<usize>, line: usize, got: usize) -> Result<(), DataError> {
    match *dim {
        Some(expected) if expected != got => Err(DataError::DimensionMismatch { line, expected, got }),
        Some(_) => Ok(()),
        None => {
            *dim = Some(got);
            Ok(())
        }
    }
}

pub fn parse_ndjson(text: &str) -> Result<Vec<RawRecord>, DataError> {
    let mut out = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord =
            serde_json::from_str(line).map_err(|e| DataError::Parse { line: i + 1, reason: e.to_string() })?;
        check_dim(&mut dim, i + 1, rec.features.len())?;
        out.push(rec);
    }
    Ok(out)
}

const CSV_FIXED: [&str; 4] = ["id", "timestamp", "label", "split"];

pub fn parse_csv(text: &str) -> Result<Vec<RawRecord>, DataError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| DataError::Parse { line: 1, reason: e.to_string() })?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Ok(Vec::new());
    }
    for (k, name) in header.iter().enumerate() {
        let expected = if k < CSV_FIXED.len() { CSV_FIXED[k].to_string() } else { format!("f{}", k - CSV_FIXED.len()) };
        if name != expected {
            return Err(DataError::Parse { line: 1, reason: format!("unexpected column {name:?}, expected {expected:?}") });
        }
    }
    if header.len() <= CSV_FIXED.len() {
        return Err(DataError::Parse { line: 1, reason: "no feature columns".into() });
    }
    let dim = header.len() - CSV_FIXED.len();
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| DataError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() < CSV_FIXED.len() {
            return Err(DataError::Parse { line, reason: format!("{} fields", row.len()) });
        }
        if row.len() != header.len() {
            return Err(DataError::DimensionMismatch { line, expected: dim, got: row.len() - CSV_FIXED.len() });
        }
        let features = row
            .iter()
            .skip(CSV_FIXED.len())
            .map(|v| v.trim().parse::<f64>().map_err(|e| DataError::Parse { line, reason: format!("{v:?}: {e}") }))
            .collect::<Result<Vec<_>, _>>()?;
        let split = match &row[3] {
            "" => None,
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            other => return Err(DataError::Parse { line, reason: format!("unknown split {other:?}") }),
        };
        out.push(RawRecord {
            id: row[0].to_string(),
            timestamp: row[1].to_string(),
            label: (!row[2].is_empty()).then(|| row[2].to_string()),
            split,
            features,
        });
    }
    Ok(out)
}

pub fn write_ndjson(records: &[RawRecord], path: &Path) -> Result<(), DataError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut out, rec).map_err(|e| DataError::Io(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_csv(records: &[RawRecord], path: &Path) -> Result<(), DataError> {
    let dim = records.first().map_or(0, |r| r.features.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| DataError::Io(e.to_string()))?;
    let mut header: Vec<String> = CSV_FIXED.iter().map(|s| s.to_string()).collect();
    header.extend((0..dim).map(|k| format!("f{k}")));
    w.write_record(&header).map_err(|e| DataError::Io(e.to_string()))?;
    for r in records {
        let mut row = vec![
            r.id.clone(),
            r.timestamp.clone(),
            r.label.clone().unwrap_or_default(),
            r.split.map(|s| s.as_str().to_string()).unwrap_or_default(),
        ];
        row.extend(r.features.iter().map(|f| f.to_string()));
        w.write_record(&row).map_err(|e| DataError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Flattens a stream into records ordered by arrival. Each domain's
/// records get the timestamp `timestamp_of(domain)`.
pub fn stream_to_records<F>(stream: &DomainStream, mut timestamp_of: F) -> Vec<RawRecord>
where
    F: FnMut(&Domain) -> String,
{
    let mut out = Vec::new();
    for domain in &stream.domains {
        let ts = timestamp_of(domain);
        let mut rows: Vec<(u64, RawRecord)> = [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .flat_map(|split| domain.split(split).iter().map(move |i| (split, i)))
            .map(|(split, inst)| {
                let rec = RawRecord {
                    id: inst.id.clone(),
                    timestamp: ts.clone(),
                    features: inst.features.clone(),
                    label: inst.gold_label.map(|l| stream.class_names[l].clone()),
                    split: Some(split),
                };
                (inst.arrival_order, rec)
            })
            .collect();
        rows.sort_by_key(|(a, _)| *a);
        out.extend(rows.into_iter().map(|(_, r)| r));
    }
    out
}

/// Records for a generated stream: each domain is dated the first of the
/// month named by the domain.
pub fn generated_records(stream: &DomainStream) -> Vec<RawRecord> {
    stream_to_records(stream, |d| format!("{}-01", d.name))
}

// ---------------------------------------------------------------------------
// Chronological partitioning
// ---------------------------------------------------------------------------

/// A calendar month, ordered chronologically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn parse(s: &str) -> Result<Self, DataError> {
        let bad = || DataError::BadMonth(s.to_string());
        let (y, m) = s.get(..7).and_then(|p| p.split_once('-')).ok_or_else(bad)?;
        let year: i32 = y.parse().map_err(|_| bad())?;
        let month: u32 = m.parse().map_err(|_| bad())?;
        if !(1..=12).contains(&month) || y.len() != 4 {
            return Err(bad());
        }
        Ok(YearMonth { year, month })
    }

    fn index(self) -> i64 {
        i64::from(self.year) * 12 + i64::from(self.month) - 1
    }

    fn from_index(i: i64) -> Self {
        YearMonth { year: i.div_euclid(12) as i32, month: i.rem_euclid(12) as u32 + 1 }
    }

    fn of(date: NaiveDate) -> Self {
        YearMonth { year: date.year(), month: date.month() }
    }
}

impl std::fmt::Display for YearMonth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

fn span_name(first: YearMonth, last: YearMonth) -> String {
    if first == last {
        first.to_string()
    } else {
        format!("{first} to {last}")
    }
}

fn parse_date(rec: &RawRecord) -> Result<NaiveDate, DataError> {
    let bad = || DataError::BadTimestamp { id: rec.id.clone(), value: rec.timestamp.clone() };
    let head = rec.timestamp.get(..10).ok_or_else(bad)?;
    NaiveDate::parse_from_str(head, "%Y-%m-%d").map_err(|_| bad())
}

/// Inclusive month range of the labeled source domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonthWindow {
    pub start: YearMonth,
    pub end: YearMonth,
}

/// One chronological bucket of records.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBucket {
    pub index: usize,
    pub name: String,
    /// Sorted by (date, id).
    pub records: Vec<RawRecord>,
}

pub const DEFAULT_MIN_DOMAIN_SIZE: usize = 30;

/// Groups records into the source domain and consecutive target windows.
///
/// Records inside `source` form domain 0. Later records fall into windows
/// of `window_len` months starting right after the source window. Trailing
/// empty windows are dropped; a window holding fewer than `min_domain_size`
/// records is merged into the next one, and a short remainder at the end
/// is merged into the last emitted domain.
pub fn partition_chronological(
    records: Vec<RawRecord>,
    source: MonthWindow,
    window_len: usize,
    min_domain_size: usize,
) -> Result<Vec<DomainBucket>, DataError> {
    if window_len == 0 {
        return Err(DataError::InvalidProfile("window length must be at least one month".into()));
    }
    if source.end < source.start {
        return Err(DataError::InvalidProfile("source window ends before it starts".into()));
    }
    let mut seen = HashSet::new();
    let mut dated = Vec::with_capacity(records.len());
    for rec in records {
        if !seen.insert(rec.id.clone()) {
            return Err(DataError::DuplicateId(rec.id));
        }
        dated.push((parse_date(&rec)?, rec));
    }
    dated.sort_by(|(da, a), (db, b)| da.cmp(db).then_with(|| a.id.cmp(&b.id)));

    let first_target = source.end.index() + 1;
    let mut src = Vec::new();
    let mut windows: BTreeMap<i64, Vec<RawRecord>> = BTreeMap::new();
    for (date, rec) in dated {
        let ym = YearMonth::of(date);
        if ym < source.start {
            return Err(DataError::BeforeSource(rec.id));
        }
        if ym <= source.end {
            src.push(rec);
        } else {
            let w = (ym.index() - first_target) / window_len as i64;
            windows.entry(w).or_default().push(rec);
        }
    }
    if src.is_empty() {
        return Err(DataError::EmptySource);
    }
    let Some(&last_window) = windows.keys().next_back() else {
        return Err(DataError::NoTargets);
    };

    let window_first = |w: i64| YearMonth::from_index(first_target + w * window_len as i64);
    let window_last = |w: i64| YearMonth::from_index(first_target + (w + 1) * window_len as i64 - 1);

    let mut buckets = vec![DomainBucket { index: 0, name: span_name(source.start, source.end), records: src }];
    let mut pending: Vec<RawRecord> = Vec::new();
    let mut pending_from: Option<i64> = None;
    let mut spans: Vec<(i64, i64)> = Vec::new();
    for w in 0..=last_window {
        let recs = windows.remove(&w).unwrap_or_default();
        pending_from.get_or_insert(w);
        pending.extend(recs);
        if pending.len() >= min_domain_size {
            spans.push((pending_from.take().expect("set above"), w));
            buckets.push(DomainBucket { index: buckets.len(), name: String::new(), records: std::mem::take(&mut pending) });
        }
    }
    if !pending.is_empty() {
        let from = pending_from.expect("pending implies a start");
        if let Some(last) = buckets.last_mut().filter(|b| b.index > 0) {
            last.records.extend(pending);
            spans.last_mut().expect("one span per target bucket").1 = last_window;
        } else {
            spans.push((from, last_window));
            buckets.push(DomainBucket { index: 1, name: String::new(), records: pending });
        }
    }
    for (bucket, (from, to)) in buckets.iter_mut().skip(1).zip(spans) {
        bucket.name = span_name(window_first(from), window_last(to));
    }
    Ok(buckets)
}

/// Options for turning record files into a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestOptions {
    pub source_window: MonthWindow,
    pub window_len: usize,
    pub min_domain_size: usize,
    /// Fixes the label order; otherwise labels are collected and sorted.
    pub class_names: Option<Vec<String>>,
    pub stratify: bool,
    pub seed: u64,
}

/// Partitions records chronologically, maps labels to class indices,
/// assigns arrival orders and splits every domain. Records carrying a
/// `split` keep it; domains without any split field are split 5:1:4.
pub fn ingest(records: Vec<RawRecord>, opts: &IngestOptions) -> Result<DomainStream, DataError> {
    let dim = records.first().map_or(0, |r| r.features.len());
    let class_names = match &opts.class_names {
        Some(names) => names.clone(),
        None => records
            .iter()
            .filter_map(|r| r.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let buckets = partition_chronological(records, opts.source_window, opts.window_len, opts.min_domain_size)?;
    let mut order = 0u64;
    let mut domains = Vec::with_capacity(buckets.len());
    for bucket in buckets {
        let with_split = bucket.records.iter().filter(|r| r.split.is_some()).count();
        if with_split != 0 && with_split != bucket.records.len() {
            return Err(DataError::MixedSplits(bucket.name));
        }
        let mut domain = Domain { index: bucket.index, name: bucket.name, train: vec![], val: vec![], test: vec![] };
        for (k, rec) in bucket.records.into_iter().enumerate() {
            if rec.features.len() != dim {
                return Err(DataError::DimensionMismatch { line: k + 1, expected: dim, got: rec.features.len() });
            }
            let gold_label = match &rec.label {
                Some(l) => Some(
                    class_names
                        .iter()
                        .position(|c| c == l)
                        .ok_or_else(|| DataError::UnknownLabel { id: rec.id.clone(), label: l.clone() })?,
                ),
                None => None,
            };
            let inst = Instance { id: rec.id, features: rec.features, gold_label, pseudo_label: None, arrival_order: order };
            order += 1;
            match rec.split.unwrap_or(Split::Train) {
                Split::Train => domain.train.push(inst),
                Split::Val => domain.val.push(inst),
                Split::Test => domain.test.push(inst),
            }
        }
        if with_split == 0 {
            domain = split_5_1_4(domain, opts.seed, opts.stratify)?;
        }
        domains.push(domain);
    }
    Ok(DomainStream { domains, num_classes: class_names.len(), dim, class_names })
}

/// Convenience wrapper: [`load_records`] then [`ingest`].
pub fn load_stream(path: &Path, opts: &IngestOptions) -> Result<DomainStream, DataError> {
    ingest(load_records(path)?, opts)
}

/// Reads newline-delimited JSON lazily; used by callers that only need to
/// peek at a file.
pub fn count_records(path: &Path) -> Result<usize, DataError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut n = 0;
    for line in reader.lines() {
        if !line?.trim().is_empty() {
            n += 1;
        }
    }
    Ok(n)
}
