//! CSV series files, model files and key/value reports.
//!
//! Series files have a header `t,x1,...,xP` followed by one row per frame
//! with strictly increasing `t`. Numbers are written in the shortest form
//! that parses back to the same `f64`, always with a `.` decimal point.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, FittedModel, ModelParams, Prediction};
use crate::odeint::{SolverConfig, Trajectory};

/// Version written into, and required from, model files.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// A parsed series file.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFile {
    /// Value column names, without the leading time column.
    pub columns: Vec<String>,
    pub trajectory: Trajectory,
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
            parse_error(path, line, format!("expected {expected_len} fields, found {len}"))
        }
        other => parse_error(path, line, format!("{other:?}")),
    }
}

/// Parses series CSV text; `path` is only used in error messages.
pub fn parse_series(text: &str, path: &Path) -> Result<SeriesFile> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.is_empty() || header.iter().all(str::is_empty) {
        return Err(parse_error(path, 1, "empty file, expected a header t,x1,..."));
    }
    if &header[0] != "t" {
        return Err(parse_error(path, 1, format!("first column must be t, found {:?}", &header[0])));
    }
    let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    if columns.is_empty() {
        return Err(parse_error(path, 1, "no value columns"));
    }
    let p = columns.len();
    let mut times = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |pos| pos.line() as usize);
        let mut row = Vec::with_capacity(p + 1);
        for (k, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_error(path, line, format!("column {}: {field:?} is not a number", k + 1)))?;
            if !v.is_finite() {
                return Err(parse_error(path, line, format!("column {}: value {field} is not finite", k + 1)));
            }
            row.push(v);
        }
        if let Some(&last) = times.last() {
            if row[0] <= last {
                return Err(parse_error(
                    path,
                    line,
                    format!(
                        "times must be strictly increasing: row {} has t = {} after t = {last}",
                        times.len() + 1,
                        row[0]
                    ),
                ));
            }
        }
        times.push(row[0]);
        values.extend_from_slice(&row[1..]);
    }
    if times.is_empty() {
        return Err(parse_error(path, 2, "no data rows"));
    }
    let states = DMatrix::from_row_slice(times.len(), p, &values);
    Ok(SeriesFile {
        columns,
        trajectory: Trajectory::new(times, states)?,
    })
}

pub fn read_series(path: impl AsRef<Path>) -> Result<SeriesFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_series(&text, path)
}

/// Reads one series per path into a dataset.
pub fn read_dataset<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let series = paths
        .iter()
        .map(|p| read_series(p).map(|f| f.trajectory))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(series)
}

fn write_rows(header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::InvalidArgument(e.to_string());
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row.iter().map(f64::to_string)).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is ASCII"))
}

/// Series CSV text with columns `t,x1,...,xD`.
pub fn series_to_string(traj: &Trajectory) -> Result<String> {
    let mut header = vec!["t".to_string()];
    header.extend((1..=traj.dim()).map(|j| format!("x{j}")));
    write_rows(
        &header,
        (0..traj.len()).map(|i| {
            let mut row = vec![traj.times()[i]];
            row.extend(traj.states().row(i).iter());
            row
        }),
    )
}

pub fn write_series(path: impl AsRef<Path>, traj: &Trajectory) -> Result<()> {
    fs::write(path, series_to_string(traj)?)?;
    Ok(())
}

/// Prediction CSV text: `t` then `x_j, x_j_lo, x_j_hi` per dimension, with
/// the band at one noise standard deviation.
pub fn prediction_to_string(pred: &Prediction) -> Result<String> {
    let traj = &pred.trajectory;
    let mut header = vec!["t".to_string()];
    for j in 1..=traj.dim() {
        header.extend([format!("x{j}"), format!("x{j}_lo"), format!("x{j}_hi")]);
    }
    write_rows(
        &header,
        (0..traj.len()).map(|i| {
            let mut row = vec![traj.times()[i]];
            for (j, w) in pred.noise_std.iter().enumerate() {
                let m = traj.states()[(i, j)];
                row.extend([m, m - w, m + w]);
            }
            row
        }),
    )
}

pub fn write_prediction(path: impl AsRef<Path>, pred: &Prediction) -> Result<()> {
    fs::write(path, prediction_to_string(pred)?)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SolverFile {
    rtol: f64,
    atol: f64,
    initial_step: Option<f64>,
    max_steps: usize,
    /// Absent when unbounded.
    max_step: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    /// Inducing locations, one row per point.
    locations: Vec<Vec<f64>>,
    /// Whitened inducing vectors, one row per point.
    whitened: Vec<Vec<f64>>,
    log_sigma_f: f64,
    lengthscales: Vec<f64>,
    log_noise: Vec<f64>,
    initial_states: Vec<Vec<f64>>,
    solver: SolverFile,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidArgument(format!("ragged {what} matrix in model file")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

/// Model file text (JSON).
pub fn model_to_string(model: &FittedModel) -> Result<String> {
    let s = &model.solver;
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        locations: rows(&model.locations),
        whitened: rows(&model.params.whitened),
        log_sigma_f: model.params.log_sigma_f,
        lengthscales: model.params.lengthscales.clone(),
        log_noise: model.params.log_noise.clone(),
        initial_states: model.params.initial_states.clone(),
        solver: SolverFile {
            rtol: s.rtol,
            atol: s.atol,
            initial_step: s.initial_step,
            max_steps: s.max_steps,
            max_step: s.max_step.is_finite().then_some(s.max_step),
        },
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    Ok(text)
}

pub fn model_from_str(text: &str) -> Result<FittedModel> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::InvalidArgument("model file has no format_version".into()))?;
    if found != u64::from(MODEL_FORMAT_VERSION) {
        return Err(Error::UnsupportedVersion {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let file: ModelFile = serde_json::from_value(value)?;
    let params = ModelParams {
        initial_states: file.initial_states,
        whitened: from_rows(&file.whitened, "whitened")?,
        log_sigma_f: file.log_sigma_f,
        lengthscales: file.lengthscales,
        log_noise: file.log_noise,
    };
    let solver = SolverConfig {
        rtol: file.solver.rtol,
        atol: file.solver.atol,
        initial_step: file.solver.initial_step,
        max_steps: file.solver.max_steps,
        max_step: file.solver.max_step.unwrap_or(f64::INFINITY),
    };
    solver.validate()?;
    FittedModel::new(from_rows(&file.locations, "locations")?, params, solver)
}

pub fn write_model(path: impl AsRef<Path>, model: &FittedModel) -> Result<()> {
    fs::write(path, model_to_string(model)?)?;
    Ok(())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<FittedModel> {
    model_from_str(&fs::read_to_string(path)?)
}

/// `key = value` lines.
pub fn format_report<K: AsRef<str>, V: AsRef<str>>(entries: &[(K, V)]) -> String {
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(k.as_ref());
        out.push_str(" = ");
        out.push_str(&v.as_ref().replace('\n', " "));
        out.push('\n');
    }
    out
}

pub fn write_report<K: AsRef<str>, V: AsRef<str>>(path: impl AsRef<Path>, entries: &[(K, V)]) -> Result<()> {
    fs::write(path, format_report(entries))?;
    Ok(())
}
