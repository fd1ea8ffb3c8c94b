//! Readers for the CSV files that earlier phases persisted.

use std::fs;
use std::path::{Path, PathBuf};

use coed::bayes::Design;
use nalgebra::DVector;

use crate::error::CliError;

pub struct Table {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(root: &Path, rel: &str, hint: &str) -> Result<Self, CliError> {
        let path = root.join(rel);
        let text = fs::read_to_string(&path).map_err(|_| {
            CliError::Config(format!("missing artifact {} (run `coed {hint}` first)", path.display()))
        })?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| CliError::Config(format!("{} is empty", path.display())))?
            .split(',')
            .map(str::to_string)
            .collect();
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect();
        Ok(Self { path, header, rows })
    }

    fn bad(&self, msg: impl std::fmt::Display) -> CliError {
        CliError::Config(format!("{}: {msg}", self.path.display()))
    }

    pub fn column(&self, name: &str) -> Result<Vec<&str>, CliError> {
        let j = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| self.bad(format!("no column '{name}'")))?;
        self.rows
            .iter()
            .map(|r| r.get(j).map(String::as_str).ok_or_else(|| self.bad("short row")))
            .collect()
    }

    pub fn numbers(&self, name: &str) -> Result<Vec<f64>, CliError> {
        self.column(name)?
            .into_iter()
            .map(|s| s.parse::<f64>().map_err(|_| self.bad(format!("'{s}' in column '{name}' is not a number"))))
            .collect()
    }

    /// Value of `key` in a two-column key/value table.
    pub fn value(&self, key: &str) -> Result<f64, CliError> {
        let keys = self.column("key")?;
        let values = self.column("value")?;
        let i = keys
            .iter()
            .position(|k| *k == key)
            .ok_or_else(|| self.bad(format!("no entry '{key}'")))?;
        values[i].parse().map_err(|_| self.bad(format!("entry '{key}' is not a number")))
    }
}

/// Noise level of the persisted inversion.
pub fn sigma(root: &Path) -> Result<f64, CliError> {
    Table::read(root, "invert/summary.csv", "invert")?.value("sigma")
}

pub fn data(root: &Path, file: &str, n_s: usize) -> Result<DVector<f64>, CliError> {
    let t = Table::read(root, &format!("invert/{file}"), "invert")?;
    let v = t.numbers("value")?;
    if v.len() != n_s {
        return Err(t.bad(format!("{} values for {n_s} sensors", v.len())));
    }
    Ok(DVector::from_vec(v))
}

pub fn design(root: &Path, label: &str, n_s: usize, sigma: f64) -> Result<Design, CliError> {
    let t = Table::read(root, "oed/designs.csv", "oed")?;
    let w = t.numbers(label)?;
    if w.len() != n_s {
        return Err(t.bad(format!("{} weights for {n_s} sensors", w.len())));
    }
    Ok(Design::new(w, sigma)?)
}

pub fn random_designs(root: &Path, n_s: usize, sigma: f64) -> Result<Vec<Design>, CliError> {
    let t = Table::read(root, "oed/random_designs.csv", "oed")?;
    t.column("sensors")?
        .into_iter()
        .map(|s| {
            let idx = s
                .split(' ')
                .map(|i| i.parse::<usize>().map_err(|_| t.bad(format!("bad sensor list '{s}'"))))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Design::from_indices(n_s, &idx, sigma)?)
        })
        .collect()
}
