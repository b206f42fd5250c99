//! Datasets, CSV ingestion, seeded splits and synthetic multi-modal targets.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};

/// One mode of a synthetic multi-modal distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    pub mean: f64,
    pub std: f64,
    pub weight: f64,
}

impl ModeSpec {
    pub fn new(mean: f64, std: f64, weight: f64) -> Self {
        Self { mean, std, weight }
    }
}

/// Features, targets and per-sample weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub targets: Vec<f64>,
    pub weights: Vec<f64>,
    pub feature_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset with unit weights and generated feature names `x0, x1, ...`.
    pub fn new(features: Matrix, targets: Vec<f64>) -> Result<Self> {
        let names = (0..features.cols()).map(|j| format!("x{j}")).collect();
        let weights = vec![1.0; targets.len()];
        Self::with_parts(features, targets, weights, names)
    }

    pub fn with_parts(
        features: Matrix,
        targets: Vec<f64>,
        weights: Vec<f64>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let n = features.rows();
        if targets.len() != n {
            return Err(Error::LengthMismatch { left: n, right: targets.len() });
        }
        if weights.len() != n {
            return Err(Error::LengthMismatch { left: n, right: weights.len() });
        }
        if feature_names.len() != features.cols() {
            return Err(Error::LengthMismatch { left: features.cols(), right: feature_names.len() });
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::BadConfig("sample weights must be finite and nonnegative".into()));
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::BadConfig("targets must be finite".into()));
        }
        Ok(Self { features, targets, weights, feature_names })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        let names = std::mem::take(&mut self.feature_names);
        Self::with_parts(self.features, self.targets, weights, names)
    }

    /// The rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            weights: indices.iter().map(|&i| self.weights[i]).collect(),
            feature_names: self.feature_names.clone(),
        }
    }

    /// A target-only dataset with a single constant feature column of 1.0.
    pub fn from_targets(targets: Vec<f64>) -> Result<Self> {
        let features = Matrix::new(targets.len(), 1, vec![1.0; targets.len()])?;
        let weights = vec![1.0; targets.len()];
        Self::with_parts(features, targets, weights, vec!["bias".into()])
    }
}

/// Samples `n` values from a mixture of normal modes with deterministic
/// per-mode counts: `floor(weight·n)` each, remainder to the last mode.
pub fn generate_multi_modal_data(n: usize, modes: &[ModeSpec], rng: &mut RngStream) -> Result<Vec<f64>> {
    let counts = mode_counts(n, modes)?;
    let mut out = Vec::with_capacity(n);
    for (mode, count) in modes.iter().zip(counts) {
        for _ in 0..count {
            out.push(mode.mean + mode.std * rng.next_normal());
        }
    }
    rng.shuffle(&mut out);
    Ok(out)
}

/// Per-mode sample counts used by [`generate_multi_modal_data`].
pub fn mode_counts(n: usize, modes: &[ModeSpec]) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::BadConfig("number of samples must be at least 1".into()));
    }
    if modes.is_empty() {
        return Err(Error::BadConfig("at least one mode is required".into()));
    }
    for m in modes {
        if !(m.std > 0.0) || !m.std.is_finite() || !m.mean.is_finite() {
            return Err(Error::BadConfig(format!("invalid mode {m:?}")));
        }
        if !(0.0..=1.0).contains(&m.weight) {
            return Err(Error::BadConfig(format!("mode weight {} outside [0, 1]", m.weight)));
        }
    }
    let total: f64 = modes.iter().map(|m| m.weight).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::BadConfig(format!("mode weights sum to {total}, expected 1")));
    }
    let mut counts: Vec<usize> =
        modes.iter().map(|m| (m.weight * n as f64).floor() as usize).collect();
    let assigned: usize = counts[..counts.len() - 1].iter().sum();
    *counts.last_mut().unwrap() = n.saturating_sub(assigned);
    Ok(counts)
}

/// Loads a headered, comma-separated numeric file. Every column other than
/// `target_column` becomes a feature, in header order.
pub fn load_csv(path: impl AsRef<Path>, target_column: &str) -> Result<Dataset> {
    load_csv_weighted(path, target_column, None)
}

/// Like [`load_csv`], additionally taking sample weights from `weight_column`.
pub fn load_csv_weighted(
    path: impl AsRef<Path>,
    target_column: &str,
    weight_column: Option<&str>,
) -> Result<Dataset> {
    let table = read_table(path.as_ref())?;
    let target = table.column_index(target_column)?;
    let weight = weight_column.map(|c| table.column_index(c)).transpose()?;
    let feature_cols: Vec<usize> =
        (0..table.header.len()).filter(|&j| j != target && Some(j) != weight).collect();
    let n = table.rows.len();
    let features = Matrix::from_fn(n, feature_cols.len(), |i, j| table.rows[i][feature_cols[j]]);
    let targets = table.rows.iter().map(|r| r[target]).collect();
    let weights = match weight {
        Some(w) => table.rows.iter().map(|r| r[w]).collect(),
        None => vec![1.0; n],
    };
    let names = feature_cols.iter().map(|&j| table.header[j].clone()).collect();
    Dataset::with_parts(features, targets, weights, names)
}

/// Loads every column of a numeric CSV as features, skipping `exclude` if present.
pub fn load_features_csv(path: impl AsRef<Path>, exclude: Option<&str>) -> Result<(Matrix, Vec<String>)> {
    let table = read_table(path.as_ref())?;
    let skip = match exclude {
        Some(c) => Some(table.column_index(c)?),
        None => None,
    };
    let cols: Vec<usize> = (0..table.header.len()).filter(|&j| Some(j) != skip).collect();
    let features = Matrix::from_fn(table.rows.len(), cols.len(), |i, j| table.rows[i][cols[j]]);
    Ok((features, cols.iter().map(|&j| table.header[j].clone()).collect()))
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl Table {
    fn column_index(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }
}

fn read_table(path: &Path) -> Result<Table> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_error)?;
    let header: Vec<String> = reader.headers().map_err(csv_error)?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::BadConfig(format!("{} has no header row", path.display())));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // data rows are numbered from 1, after the header
        let row_no = i + 1;
        let record = record.map_err(csv_error)?;
        let mut row = Vec::with_capacity(header.len());
        for (j, cell) in record.iter().enumerate() {
            let value: f64 = cell.parse().map_err(|_| Error::ParseError {
                row: row_no,
                col: header[j].clone(),
                value: cell.to_string(),
            })?;
            if !value.is_finite() {
                return Err(Error::ParseError { row: row_no, col: header[j].clone(), value: cell.to_string() });
            }
            row.push(value);
        }
        rows.push(row);
    }
    Ok(Table { header, rows })
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        csv::ErrorKind::UnequalLengths { pos, expected_len, len } => Error::BadConfig(format!(
            "row {} has {len} fields, expected {expected_len}",
            pos.map_or(0, |p| p.record() as usize)
        )),
        other => Error::BadConfig(format!("malformed CSV: {other:?}")),
    }
}

/// Writes features then the target column. Values use Rust's shortest
/// round-trip formatting, so a reload is entry-identical.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>, target_column: &str) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header: Vec<&str> = dataset.feature_names.iter().map(String::as_str).collect();
    header.push(target_column);
    writeln!(out, "{}", header.join(","))?;
    for i in 0..dataset.len() {
        let mut cells: Vec<String> = dataset.features.row(i).iter().map(|v| format!("{v:?}")).collect();
        cells.push(format!("{:?}", dataset.targets[i]));
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Seeded permutation split into `(train, test)`; the test part holds
/// `round(N·test_fraction)` rows, at least one.
pub fn train_test_split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(dataset.len(), test_fraction, seed)?;
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// Index form of the seeded split: `(kept, held_out)`.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::BadConfig(format!("cannot split {n} rows")));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::BadConfig(format!("split fraction {fraction} outside (0, 1)")));
    }
    let held = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let perm = RngStream::new(seed).permutation(n);
    let (kept, held_out) = perm.split_at(n - held);
    Ok((kept.to_vec(), held_out.to_vec()))
}

/// Per-column z-scoring, fitted on one dataset and applied to others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &Matrix) -> Result<Self> {
        let n = features.rows();
        if n == 0 {
            return Err(Error::BadConfig("cannot standardize an empty matrix".into()));
        }
        let mut mean = vec![0.0; features.cols()];
        let mut std = vec![0.0; features.cols()];
        for j in 0..features.cols() {
            let col = features.col(j);
            let m = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
            mean[j] = m;
            // constant columns are centred only
            std[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    pub fn transform(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "standardizer fitted on {} columns, got {}",
                self.mean.len(),
                features.cols()
            )));
        }
        Ok(Matrix::from_fn(features.rows(), features.cols(), |i, j| {
            (features[(i, j)] - self.mean[j]) / self.std[j]
        }))
    }
}
