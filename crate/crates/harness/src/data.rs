//! Dataset ingestion from CSV and synthetic generators with known ground truth.

use std::collections::BTreeMap;
use std::path::Path;

use ngvi::linalg::{Matrix, Vector};
use ngvi::models::sigmoid;
use ngvi::{Dataset, TargetKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use thiserror::Error;

use crate::config::ModelChoice;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("line {line}, column {column:?}: cannot parse {value:?} as a number")]
    Parse { line: u64, column: String, value: String },
    #[error("line {line}: target {value} is not valid for a {kind:?} model")]
    Target { line: u64, value: f64, kind: ModelChoice },
    #[error("target column {0:?} not found in header")]
    MissingTarget(String),
    #[error("categorical column {0:?} not found in header")]
    MissingColumn(String),
    #[error("no data rows")]
    Empty,
    #[error(transparent)]
    Model(#[from] ngvi::Error),
}

#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub target: String,
    /// Columns to one-hot encode (one indicator per distinct value, sorted).
    pub categorical: Vec<String>,
    pub standardize: bool,
    pub model: ModelChoice,
}

/// Per-column affine map applied during standardization: `x' = (x - shift) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnScaling {
    pub shift: f64,
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct LoadedCsv {
    pub dataset: Dataset,
    pub feature_names: Vec<String>,
    /// `None` for one-hot and constant columns, which are left as they are.
    pub scaling: Vec<Option<ColumnScaling>>,
    /// Feature values outside `[-1, 1]` (only counted for logistic models).
    pub out_of_range: usize,
}

enum Column {
    Numeric(Vec<f64>),
    Categorical { name: String, values: Vec<String> },
}

pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<LoadedCsv, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file, opts)
}

/// Same as [`load_csv`] over any reader.
pub fn read_csv<R: std::io::Read>(reader: R, opts: &CsvOptions) -> Result<LoadedCsv, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| malformed(&e))?
        .iter()
        .map(str::to_owned)
        .collect();
    let target_idx = header
        .iter()
        .position(|h| *h == opts.target)
        .ok_or_else(|| DataError::MissingTarget(opts.target.clone()))?;
    for c in &opts.categorical {
        if !header.contains(c) {
            return Err(DataError::MissingColumn(c.clone()));
        }
    }

    let mut columns: Vec<Column> = header
        .iter()
        .map(|h| {
            if opts.categorical.contains(h) {
                Column::Categorical {
                    name: h.clone(),
                    values: Vec::new(),
                }
            } else {
                Column::Numeric(Vec::new())
            }
        })
        .collect();
    let mut targets = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| malformed(&e))?;
        let line = rec.position().map_or(0, |p| p.line());
        for (j, field) in rec.iter().enumerate() {
            if j == target_idx {
                let v = parse_number(field, line, &header[j])?;
                targets.push(map_target(v, line, opts.model)?);
                continue;
            }
            match &mut columns[j] {
                Column::Numeric(v) => v.push(parse_number(field, line, &header[j])?),
                Column::Categorical { values, .. } => values.push(field.to_owned()),
            }
        }
    }
    let n = targets.len();
    if n == 0 {
        return Err(DataError::Empty);
    }

    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    let mut numeric_mask = Vec::new();
    for (j, col) in columns.into_iter().enumerate() {
        if j == target_idx {
            continue;
        }
        match col {
            Column::Numeric(v) => {
                features.push(v);
                names.push(header[j].clone());
                numeric_mask.push(true);
            }
            Column::Categorical { name, values } => {
                let levels: BTreeMap<&str, ()> = values.iter().map(|v| (v.as_str(), ())).collect();
                for level in levels.keys() {
                    features.push(values.iter().map(|v| f64::from(u8::from(v == level))).collect());
                    names.push(format!("{name}={level}"));
                    numeric_mask.push(false);
                }
            }
        }
    }

    let scaling: Vec<Option<ColumnScaling>> = features
        .iter_mut()
        .zip(&numeric_mask)
        .map(|(col, &numeric)| {
            if !(opts.standardize && numeric) {
                return None;
            }
            let s = column_scaling(col)?;
            for v in col.iter_mut() {
                *v = (*v - s.shift) / s.scale;
            }
            Some(s)
        })
        .collect();

    let d = features.len();
    let x = Matrix::from_fn(n, d, |i, j| features[j][i]);
    let out_of_range = if opts.model == ModelChoice::Logistic {
        let count = x.iter().filter(|v| v.abs() > 1.0).count();
        if count > 0 {
            log::warn!("{count} feature values lie outside [-1, 1]; the logistic landscape results assume bounded features");
        }
        count
    } else {
        0
    };
    let dataset = Dataset::new(x, Vector::from_vec(targets), target_kind(opts.model))?;
    Ok(LoadedCsv {
        dataset,
        feature_names: names,
        scaling,
        out_of_range,
    })
}

fn malformed(e: &csv::Error) -> DataError {
    let line = e.position().map_or(0, |p| p.line());
    DataError::Malformed {
        line,
        message: e.to_string(),
    }
}

fn parse_number(field: &str, line: u64, column: &str) -> Result<f64, DataError> {
    field
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| DataError::Parse {
            line,
            column: column.to_owned(),
            value: field.to_owned(),
        })
}

fn map_target(v: f64, line: u64, model: ModelChoice) -> Result<f64, DataError> {
    let bad = || DataError::Target { line, value: v, kind: model };
    match model {
        ModelChoice::Linreg => Ok(v),
        ModelChoice::Logistic => match v {
            0.0 => Ok(-1.0),
            1.0 | -1.0 => Ok(v),
            _ => Err(bad()),
        },
        ModelChoice::Poisson if v >= 0.0 && v.fract() == 0.0 => Ok(v),
        ModelChoice::Poisson => Err(bad()),
    }
}

pub fn target_kind(model: ModelChoice) -> TargetKind {
    match model {
        ModelChoice::Linreg => TargetKind::Real,
        ModelChoice::Logistic => TargetKind::Binary,
        ModelChoice::Poisson => TargetKind::Count,
    }
}

/// Mean and population standard deviation, or `None` for a constant column.
fn column_scaling(col: &[f64]) -> Option<ColumnScaling> {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (var > 0.0).then(|| ColumnScaling {
        shift: mean,
        scale: var.sqrt(),
    })
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: Dataset,
    /// Weights the targets were drawn with (with a trailing bias for logistic data).
    pub truth: Vector,
}

/// Draws weights from `N(0, prior_var · I)`, features from `N(0, I)`, and targets from the
/// model likelihood.
///
/// Logistic features are divided by their largest magnitude so they lie in `[-1, 1]`.
/// Poisson features are divided by `√d` so that log-rates have unit-order spread.
pub fn synth(kind: ModelChoice, n: usize, d: usize, seed: u64, noise_var: f64, prior_var: f64) -> Result<Synthetic, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = if kind == ModelChoice::Logistic { d + 1 } else { d };
    let sd = prior_var.sqrt();
    let truth = Vector::from_fn(latent, |_, _| sd * rng.sample::<f64, _>(StandardNormal));
    let mut x = Matrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    match kind {
        ModelChoice::Logistic => {
            let m = x.amax();
            if m > 1.0 {
                x /= m;
            }
        }
        ModelChoice::Poisson => x /= (d as f64).sqrt(),
        ModelChoice::Linreg => {}
    }
    let w = truth.rows(0, d);
    let y = Vector::from_iterator(
        n,
        (0..n).map(|i| {
            let mut a = x.row(i).transpose().dot(&w);
            match kind {
                ModelChoice::Linreg => {
                    let noise = Normal::new(0.0, noise_var.sqrt()).expect("finite noise variance");
                    a + noise.sample(&mut rng)
                }
                ModelChoice::Logistic => {
                    a += truth[d];
                    if rng.random::<f64>() < sigmoid(a) {
                        1.0
                    } else {
                        -1.0
                    }
                }
                ModelChoice::Poisson => Poisson::new(a.exp()).expect("positive rate").sample(&mut rng),
            }
        }),
    );
    Ok(Synthetic {
        dataset: Dataset::new(x, y, target_kind(kind))?,
        truth,
    })
}
