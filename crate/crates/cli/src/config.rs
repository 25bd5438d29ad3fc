//! Structured-text run configuration: a single TOML document of nested
//! key-value pairs. Numbers are read as 64-bit floats, matrices as
//! row-major nested arrays.

use nalgebra::{DMatrix, DVector};
use toml::Value;

use crate::CliError;

/// Parsed configuration document plus the raw text for artifact echoing.
pub struct Config {
    pub raw: String,
    table: toml::Table,
}

impl Config {
    pub fn empty() -> Self {
        Self {
            raw: String::new(),
            table: toml::Table::new(),
        }
    }

    pub fn parse(raw: String) -> Result<Self, CliError> {
        let table = raw
            .parse::<toml::Table>()
            .map_err(|e| CliError::Config(format!("malformed config: {e}")))?;
        Ok(Self { raw, table })
    }

    fn get(&self, key: &str) -> Option<&Value> {
        self.table.get(key)
    }

    pub fn f64(&self, key: &str, default: f64) -> Result<f64, CliError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => as_f64(v).ok_or_else(|| bad(key, "a number")),
        }
    }

    pub fn usize(&self, key: &str, default: usize) -> Result<usize, CliError> {
        match self.get(key) {
            None => Ok(default),
            Some(Value::Integer(i)) if *i >= 0 => Ok(*i as usize),
            Some(_) => Err(bad(key, "a nonnegative integer")),
        }
    }

    pub fn string(&self, key: &str, default: &str) -> Result<String, CliError> {
        match self.get(key) {
            None => Ok(default.to_string()),
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(bad(key, "a string")),
        }
    }

    /// Row-major nested-array matrix, e.g. `a = [[0, 1], [0, 0]]`.
    pub fn matrix(&self, key: &str, default: &[&[f64]]) -> Result<DMatrix<f64>, CliError> {
        match self.get(key) {
            None => Ok(DMatrix::from_fn(default.len(), default[0].len(), |i, j| {
                default[i][j]
            })),
            Some(Value::Array(rows)) if !rows.is_empty() => {
                let mut data: Vec<Vec<f64>> = Vec::with_capacity(rows.len());
                for row in rows {
                    let Value::Array(entries) = row else {
                        return Err(bad(key, "a nested array of rows"));
                    };
                    let parsed: Option<Vec<f64>> = entries.iter().map(as_f64).collect();
                    data.push(parsed.ok_or_else(|| bad(key, "numeric rows"))?);
                }
                let cols = data[0].len();
                if cols == 0 || data.iter().any(|r| r.len() != cols) {
                    return Err(bad(key, "rows of equal positive length"));
                }
                Ok(DMatrix::from_fn(data.len(), cols, |i, j| data[i][j]))
            }
            Some(_) => Err(bad(key, "a nested array of rows")),
        }
    }

    pub fn vector(&self, key: &str, default: &[f64]) -> Result<DVector<f64>, CliError> {
        match self.get(key) {
            None => Ok(DVector::from_row_slice(default)),
            Some(Value::Array(entries)) if !entries.is_empty() => {
                let parsed: Option<Vec<f64>> = entries.iter().map(as_f64).collect();
                Ok(DVector::from_vec(parsed.ok_or_else(|| bad(key, "numbers"))?))
            }
            Some(_) => Err(bad(key, "an array of numbers")),
        }
    }

    pub fn f64_list(&self, key: &str, default: &[f64]) -> Result<Vec<f64>, CliError> {
        Ok(self.vector(key, default)?.iter().copied().collect())
    }

    /// A list of `(start, end)` pairs, e.g. `e = [[0.0, 0.4], [0.5, 1.0]]`.
    pub fn intervals(
        &self,
        key: &str,
        default: &[(f64, f64)],
    ) -> Result<Vec<(f64, f64)>, CliError> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(_) => {
                let m = self.matrix(key, &[&[]])?;
                if m.ncols() != 2 {
                    return Err(bad(key, "an array of [start, end] pairs"));
                }
                Ok((0..m.nrows()).map(|i| (m[(i, 0)], m[(i, 1)])).collect())
            }
        }
    }

    pub fn pair(&self, key: &str, default: (f64, f64)) -> Result<(f64, f64), CliError> {
        let v = self.f64_list(key, &[default.0, default.1])?;
        if v.len() != 2 {
            return Err(bad(key, "a [lo, hi] pair"));
        }
        Ok((v[0], v[1]))
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn bad(key: &str, expected: &str) -> CliError {
    CliError::Config(format!("config key `{key}` must be {expected}"))
}
