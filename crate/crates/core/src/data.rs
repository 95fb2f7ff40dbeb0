//! Datasets: synthetic generation, CSV ingestion and norm preprocessing.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::CovMatrix;
use crate::oracles::{gaussian_factor, softplus};
use crate::sstats::Model;

/// Handling of records outside the feature ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipPolicy {
    /// Rescale onto the sphere of radius `R_x`.
    ScaleClip,
    /// Drop the record.
    Filter,
}

impl fmt::Display for ClipPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClipPolicy::ScaleClip => "scale-clip",
            ClipPolicy::Filter => "filter",
        })
    }
}

impl FromStr for ClipPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scale-clip" => Ok(ClipPolicy::ScaleClip),
            "filter" => Ok(ClipPolicy::Filter),
            other => Err(Error::InvalidArgument(format!("unknown clip policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub model: Model,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    /// Policy applied by [`preprocess`], if any.
    pub clipped: Option<ClipPolicy>,
    pub r_x: Option<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    /// Writes `x_1..x_d, y` with a header row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=self.dim()).map(|j| format!("x_{j}")).collect();
        header.push("y".into());
        w.write_record(&header)?;
        for (x, y) in self.x.iter().zip(&self.y) {
            let mut rec: Vec<String> = x.iter().map(|v| format!("{v:.16e}")).collect();
            rec.push(format!("{y}"));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `x ~ N(0, Sigma)`. Logistic labels take `+1` with probability
/// `1 / (1 + e^t)` so that `E[y | x] = (1 - e^t) / (1 + e^t)`; Poisson counts
/// have mean `softplus(t)`.
pub fn synth(model: Model, n: usize, theta: &[f64], sigma: &CovMatrix, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if theta.len() != sigma.dim() {
        return Err(Error::DimensionMismatch {
            expected: sigma.dim(),
            got: theta.len(),
        });
    }
    let a = gaussian_factor(sigma)?;
    let d = theta.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x: Vec<f64> = (0..d).map(|i| (0..d).map(|j| a[(i, j)] * z[j]).sum()).collect();
        let t: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum();
        let y = match model {
            Model::Logistic => {
                let p_plus = 1.0 / (1.0 + t.exp());
                if rng.random::<f64>() < p_plus {
                    1.0
                } else {
                    -1.0
                }
            }
            Model::Poisson => {
                let rate = softplus(t);
                Poisson::new(rate)
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?
                    .sample(&mut rng)
            }
        };
        xs.push(x);
        ys.push(y);
    }
    Ok(Dataset {
        model,
        x: xs,
        y: ys,
        clipped: None,
        r_x: None,
    })
}

/// Enforces `|x| <= R_x` by the chosen policy; Poisson responses above
/// `r_y` are capped at `r_y`.
pub fn preprocess(raw: &Dataset, policy: ClipPolicy, r_x: f64, r_y: Option<f64>) -> Result<Dataset> {
    if !(r_x > 0.0 && r_x.is_finite()) {
        return Err(Error::InvalidArgument(format!("R_x must be positive, got {r_x}")));
    }
    let mut xs = Vec::with_capacity(raw.len());
    let mut ys = Vec::with_capacity(raw.len());
    for (x, &y) in raw.x.iter().zip(&raw.y) {
        let n = norm(x);
        let x = if n <= r_x {
            x.clone()
        } else {
            match policy {
                ClipPolicy::Filter => continue,
                ClipPolicy::ScaleClip => x.iter().map(|v| v * r_x / n).collect(),
            }
        };
        let y = match (raw.model, r_y) {
            (Model::Poisson, Some(b)) => y.min(b),
            _ => y,
        };
        xs.push(x);
        ys.push(y);
    }
    if xs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(Dataset {
        model: raw.model,
        x: xs,
        y: ys,
        clipped: Some(policy),
        r_x: Some(r_x),
    })
}

/// Header and numeric rows of a CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn read_csv_raw<R: Read>(reader: R) -> Result<RawTable> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::EmptyDataset);
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::InvalidData(format!(
                "row {} has {} cells, header has {}",
                i + 1,
                rec.len(),
                header.len()
            )));
        }
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, cell)| {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::NonNumeric {
                        row: i + 1,
                        column: header[j].clone(),
                        value: cell.to_string(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(RawTable { header, rows })
}

/// Column-wise `(x - mean) / sd` with population moments; columns with
/// variance below `1e-12` become zeros.
pub fn standardize(x: &mut [Vec<f64>]) {
    if x.is_empty() {
        return;
    }
    let n = x.len() as f64;
    for j in 0..x[0].len() {
        let mean = x.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = x.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        for r in x.iter_mut() {
            r[j] = if var < 1e-12 { 0.0 } else { (r[j] - mean) / var.sqrt() };
        }
    }
}

/// Splits off `target`, standardizes the features and maps targets to the
/// model's response domain.
pub fn dataset_from_table(table: RawTable, target: &str, model: Model) -> Result<Dataset> {
    let t = table
        .header
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| Error::MissingTarget(target.to_string()))?;
    if table.header.len() < 2 {
        return Err(Error::InvalidData("no feature columns".into()));
    }
    let mut xs = Vec::with_capacity(table.rows.len());
    let mut ys = Vec::with_capacity(table.rows.len());
    for (i, row) in table.rows.into_iter().enumerate() {
        let v = row[t];
        let y = match model {
            Model::Logistic => match v {
                v if v == 0.0 || v == -1.0 => -1.0,
                v if v == 1.0 => 1.0,
                _ => {
                    return Err(Error::InvalidData(format!(
                        "row {}: logistic target must be 0/1 or -1/1, got {v}",
                        i + 1
                    )))
                }
            },
            Model::Poisson => {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::InvalidData(format!(
                        "row {}: Poisson target must be a non-negative integer, got {v}",
                        i + 1
                    )));
                }
                v
            }
        };
        let x: Vec<f64> = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != t)
            .map(|(_, &v)| v)
            .collect();
        xs.push(x);
        ys.push(y);
    }
    standardize(&mut xs);
    Ok(Dataset {
        model,
        x: xs,
        y: ys,
        clipped: None,
        r_x: None,
    })
}

pub fn load_csv(path: &Path, target: &str, model: Model) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    dataset_from_table(read_csv_raw(file)?, target, model)
}
