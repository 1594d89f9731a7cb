//! CSV and JSON artifacts: per-domain scores, method traces, discrepancy
//! matrices and gain-versus-shift scatter data.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::divergence::{Conditioning, Estimator, MmdMatrix};
use crate::metrics::ScatterPoint;
use crate::trace::MethodTrace;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed file {path}: {reason}")]
    Malformed { path: String, reason: String },
}

/// Factor applied to discrepancy values in CSV output.
pub const MMD_CSV_SCALE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerDomainRow {
    pub method: String,
    pub t: usize,
    pub f_macro: f64,
}

/// `method,t,f_macro` for every target domain of every run.
pub fn write_per_domain<'a, I>(path: &Path, runs: I) -> Result<(), ExportError>
where
    I: IntoIterator<Item = (&'a str, &'a MethodTrace)>,
{
    let mut w = csv::Writer::from_path(path)?;
    for (label, trace) in runs {
        for step in trace.steps.iter().skip(1) {
            w.serialize(PerDomainRow { method: label.to_string(), t: step.t, f_macro: step.f_macro })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_per_domain(path: &Path) -> Result<Vec<PerDomainRow>, ExportError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub buffer_size: usize,
    pub pseudo_acc: Option<f64>,
    pub f_macro: f64,
    pub model_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub t: usize,
    pub epoch: usize,
    pub discriminator_acc: f64,
    pub l_cls: f64,
    pub l_adv: f64,
}

/// One row per step. Adversarial runs also get `<stem>_epochs.csv` with
/// per-epoch diagnostics; the path of that file is returned.
pub fn write_trace(path: &Path, trace: &MethodTrace) -> Result<Option<PathBuf>, ExportError> {
    let mut w = csv::Writer::from_path(path)?;
    for s in &trace.steps {
        w.serialize(TraceRow {
            t: s.t,
            buffer_size: s.buffer_size,
            pseudo_acc: s.pseudo_acc,
            f_macro: s.f_macro,
            model_checksum: s.model_checksum.clone(),
        })?;
    }
    w.flush()?;
    if trace.steps.iter().all(|s| s.dann_epochs.is_empty()) {
        return Ok(None);
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    let epochs_path = path.with_file_name(format!("{stem}_epochs.csv"));
    let mut w = csv::Writer::from_path(&epochs_path)?;
    for s in &trace.steps {
        for e in &s.dann_epochs {
            w.serialize(EpochRow {
                t: s.t,
                epoch: e.epoch,
                discriminator_acc: e.discriminator_acc,
                l_cls: e.l_cls,
                l_adv: e.l_adv,
            })?;
        }
    }
    w.flush()?;
    Ok(Some(epochs_path))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>, ExportError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Metadata stored next to a discrepancy CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdSidecar {
    pub bandwidth: f64,
    pub estimator: Estimator,
    pub conditioning: Conditioning,
    /// Unit of the CSV values: a stored `v` stands for `v * scale`.
    pub scale: String,
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Square matrix with domain names as header row and first column, values
/// multiplied by [`MMD_CSV_SCALE`], plus a JSON sidecar.
pub fn write_mmd(path: &Path, m: &MmdMatrix) -> Result<(), ExportError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["domain".to_string()];
    header.extend(m.names.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in m.names.iter().zip(&m.values) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| (v * MMD_CSV_SCALE).to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let sidecar = MmdSidecar {
        bandwidth: m.bandwidth,
        estimator: m.estimator,
        conditioning: m.conditioning,
        scale: "1e-2".into(),
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Reads a matrix written by [`write_mmd`], undoing the CSV scaling.
pub fn read_mmd(path: &Path) -> Result<MmdMatrix, ExportError> {
    let malformed = |reason: String| ExportError::Malformed { path: path.display().to_string(), reason };
    let sidecar: MmdSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let mut r = csv::Reader::from_path(path)?;
    let names: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut values = Vec::with_capacity(names.len());
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != names.len() + 1 || rec.get(0) != names.get(k).map(String::as_str) {
            return Err(malformed(format!("row {} does not match the header", k + 1)));
        }
        let row = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map(|v| v / MMD_CSV_SCALE).map_err(|e| malformed(format!("{v:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        values.push(row);
    }
    if values.len() != names.len() {
        return Err(malformed(format!("{} rows for {} columns", values.len(), names.len())));
    }
    Ok(MmdMatrix {
        names,
        values,
        bandwidth: sidecar.bandwidth,
        estimator: sidecar.estimator,
        conditioning: sidecar.conditioning,
    })
}

/// `t,mmd,delta_f` with discrepancies scaled like the matrix CSV.
pub fn write_scatter(path: &Path, points: &[ScatterPoint]) -> Result<(), ExportError> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(ScatterPoint { mmd: p.mmd * MMD_CSV_SCALE, ..p.clone() })?;
    }
    w.flush()?;
    Ok(())
}
