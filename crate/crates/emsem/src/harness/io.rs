//! File formats: model specs and study specs as TOML, response data and
//! matrices as CSV, reports as JSON.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::ifa::{IfaError, ModelSpec, ResponseData};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Ifa(#[from] IfaError),
    #[error("expected {expected} data files, one per group, got {got}")]
    GroupCount { expected: usize, got: usize },
}

fn read(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::File { path: path.into(), source })
}

fn create(path: &Path) -> Result<fs::File, IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| IoError::File { path: dir.into(), source })?;
    }
    fs::File::create(path).map_err(|source| IoError::File { path: path.into(), source })
}

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    toml::from_str(&read(path)?).map_err(|e| IoError::Parse {
        path: path.into(),
        message: e.to_string(),
    })
}

pub fn save_toml<T: Serialize>(value: &T, path: &Path) -> Result<(), IoError> {
    let text = toml::to_string_pretty(value).map_err(|e| IoError::Parse {
        path: path.into(),
        message: e.to_string(),
    })?;
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    create(path)?
        .write_all(text.as_bytes())
        .map_err(|source| IoError::File { path: path.into(), source })
}

pub fn load_spec(path: &Path) -> Result<ModelSpec, IoError> {
    let spec: ModelSpec = load_toml(path)?;
    spec.validate()?;
    Ok(spec)
}

/// Reads one CSV per group, in group order.
pub fn load_data(spec: &ModelSpec, paths: &[PathBuf]) -> Result<Vec<ResponseData>, IoError> {
    if paths.len() != spec.groups.len() {
        return Err(IoError::GroupCount {
            expected: spec.groups.len(),
            got: paths.len(),
        });
    }
    spec.groups
        .iter()
        .zip(paths)
        .map(|(g, path)| {
            let names: Vec<String> = g.items.iter().map(|i| i.name.clone()).collect();
            let outcomes: Vec<usize> = g.items.iter().map(|i| i.model.outcomes()).collect();
            let text = read(path)?;
            ResponseData::read_csv(text.as_bytes(), &names, &outcomes).map_err(|e| IoError::Parse {
                path: path.clone(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Writes `<dir>/<group>.csv` for every group and returns the paths.
pub fn save_data(spec: &ModelSpec, data: &[ResponseData], dir: &Path) -> Result<Vec<PathBuf>, IoError> {
    spec.groups
        .iter()
        .zip(data)
        .map(|(g, d)| {
            let path = dir.join(format!("{}.csv", g.name));
            d.write_csv(create(&path)?)?;
            Ok(path)
        })
        .collect()
}

/// Square matrix as CSV with the parameter names as header.
pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, names: &[String], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(names)?;
    for r in 0..m.nrows() {
        w.write_record(m.row(r).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(text: &str) -> Result<(Vec<String>, DMatrix<f64>), String> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let names: Vec<String> = rdr.headers().map_err(|e| e.to_string())?.iter().map(String::from).collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        for cell in rec.iter() {
            values.push(cell.trim().parse::<f64>().map_err(|e| format!("row {}: {e}", rows + 1))?);
        }
        rows += 1;
    }
    if values.len() != rows * names.len() {
        return Err("ragged matrix".into());
    }
    let m = DMatrix::from_row_slice(rows, names.len(), &values);
    Ok((names, m))
}

pub fn save_matrix(m: &DMatrix<f64>, names: &[String], path: &Path) -> Result<(), IoError> {
    write_matrix_csv(m, names, create(path)?).map_err(|e| IoError::Parse {
        path: path.into(),
        message: e.to_string(),
    })
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| IoError::Parse {
        path: path.into(),
        message: e.to_string(),
    })?;
    write_text(path, &(text + "\n"))
}
