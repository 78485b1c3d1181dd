use std::io::Read;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::AssetError;

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-9;

/// Symmetric, unit-diagonal, positive semidefinite matrix of pairwise
/// return correlations, index-aligned with the system's pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct CorrelationMatrix {
    entries: Vec<Vec<f64>>,
}

impl TryFrom<Vec<Vec<f64>>> for CorrelationMatrix {
    type Error = AssetError;

    fn try_from(entries: Vec<Vec<f64>>) -> Result<Self, Self::Error> {
        Self::new(entries)
    }
}

impl From<CorrelationMatrix> for Vec<Vec<f64>> {
    fn from(m: CorrelationMatrix) -> Self {
        m.entries
    }
}

impl CorrelationMatrix {
    pub fn new(entries: Vec<Vec<f64>>) -> Result<Self, AssetError> {
        let n = entries.len();
        if n == 0 {
            return Err(AssetError::InvalidCorrelation("empty matrix".into()));
        }
        if let Some(row) = entries.iter().find(|r| r.len() != n) {
            return Err(AssetError::DimensionMismatch {
                expected: n,
                got: row.len(),
            });
        }
        for i in 0..n {
            if entries[i][i] != 1.0 {
                return Err(AssetError::InvalidCorrelation(format!(
                    "diagonal entry {i} is {}",
                    entries[i][i]
                )));
            }
            for j in 0..n {
                let x = entries[i][j];
                if !(-1.0..=1.0).contains(&x) {
                    return Err(AssetError::InvalidCorrelation(format!(
                        "entry ({i}, {j}) = {x} outside [-1, 1]"
                    )));
                }
                if (x - entries[j][i]).abs() > SYMMETRY_TOL {
                    return Err(AssetError::InvalidCorrelation(format!(
                        "entry ({i}, {j}) breaks symmetry"
                    )));
                }
            }
        }
        let m = Self { entries };
        let smallest = m.smallest_eigenvalue();
        if smallest < -PSD_TOL {
            return Err(AssetError::InvalidCorrelation(format!(
                "not positive semidefinite (smallest eigenvalue {smallest})"
            )));
        }
        Ok(m)
    }

    pub fn identity(n: usize) -> Self {
        let entries = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self { entries }
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i][j]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.entries
    }

    pub fn smallest_eigenvalue(&self) -> f64 {
        let n = self.dim();
        let m = DMatrix::from_fn(n, n, |i, j| self.entries[i][j]);
        m.symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Sample Pearson correlations of a return window (rows are epochs,
    /// columns are assets). Columns without variation are uncorrelated with
    /// everything else.
    pub fn from_returns(window: &[Vec<f64>], n_assets: usize) -> Self {
        let mut m = Self::identity(n_assets);
        let t = window.len();
        if t < 2 {
            return m;
        }
        let mean: Vec<f64> = (0..n_assets)
            .map(|k| window.iter().map(|r| r[k]).sum::<f64>() / t as f64)
            .collect();
        let mean = &mean;
        let dev = |k: usize| window.iter().map(move |r| r[k] - mean[k]);
        let ss: Vec<f64> = (0..n_assets).map(|k| dev(k).map(|d| d * d).sum()).collect();
        for i in 0..n_assets {
            for j in (i + 1)..n_assets {
                if ss[i] <= 0.0 || ss[j] <= 0.0 {
                    continue;
                }
                let cov: f64 = dev(i).zip(dev(j)).map(|(a, b)| a * b).sum();
                let rho = (cov / (ss[i] * ss[j]).sqrt()).clamp(-1.0, 1.0);
                m.entries[i][j] = rho;
                m.entries[j][i] = rho;
            }
        }
        m
    }

    /// Reads a square matrix whose header row names the asset symbols, and
    /// reorders it to follow `symbols`.
    pub fn from_csv<R: Read>(reader: R, symbols: &[String]) -> Result<Self, AssetError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| AssetError::File(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| AssetError::File(e.to_string()))?;
            let row = rec
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| AssetError::File(format!("row {}: {e}", line + 1)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        if rows.len() != header.len() {
            return Err(AssetError::File(format!(
                "{} header symbols but {} rows",
                header.len(),
                rows.len()
            )));
        }
        let position = |s: &String| {
            header
                .iter()
                .position(|h| h == s)
                .ok_or_else(|| AssetError::File(format!("symbol {s} missing from header")))
        };
        let idx = symbols
            .iter()
            .map(position)
            .collect::<Result<Vec<_>, _>>()?;
        let entries = idx
            .iter()
            .map(|&i| {
                idx.iter()
                    .map(|&j| rows[i].get(j).copied().unwrap_or(f64::NAN))
                    .collect()
            })
            .collect();
        Self::new(entries)
    }

    #[cfg(test)]
    pub(crate) fn random_for_tests(n: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = crate::market::stream_rng(seed, 99);
        let a = DMatrix::<f64>::from_fn(n, n + 1, |_, _| rng.random_range(-1.0..1.0));
        let cov = &a * a.transpose();
        let entries = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if i == j {
                            1.0
                        } else {
                            (cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt()).clamp(-1.0, 1.0)
                        }
                    })
                    .collect()
            })
            .collect::<Vec<Vec<f64>>>();
        let mut sym = entries.clone();
        for i in 0..n {
            for j in 0..i {
                sym[i][j] = entries[j][i];
            }
        }
        Self::new(sym).expect("normalized Gram matrix is a correlation matrix")
    }
}
