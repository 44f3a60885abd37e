//! CSV ingestion and emission. The input dialect is plain comma-separated
//! UTF-8 with a header row; binary columns must be exactly 0 or 1 and rows
//! with missing cells are rejected.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ComplianceClass, Dataset, SubjectRecord};
use crate::sim::SimulatedDataset;

/// Which CSV column feeds each required variable, plus the covariate
/// columns to keep.
#[derive(Debug, Clone)]
pub struct ColumnMapping {
    pub y1: String,
    pub y2: String,
    pub z: String,
    pub x: String,
    pub covariates: Vec<String>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            y1: "y1".into(),
            y2: "y2".into(),
            z: "z".into(),
            x: "x".into(),
            covariates: Vec::new(),
        }
    }
}

fn parse_binary(raw: &str, row: usize, column: &str) -> Result<bool> {
    match raw.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Validation(format!(
            "row {row}, column '{column}': expected 0 or 1, got '{other}'"
        ))),
    }
}

fn parse_real(raw: &str, row: usize, column: &str) -> Result<f64> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(Error::Validation(format!(
            "row {row}, column '{column}': missing value"
        )));
    }
    let value: f64 = trimmed.parse().map_err(|_| {
        Error::Validation(format!(
            "row {row}, column '{column}': '{trimmed}' is not a number"
        ))
    })?;
    if !value.is_finite() {
        return Err(Error::Validation(format!(
            "row {row}, column '{column}': non-finite value"
        )));
    }
    Ok(value)
}

/// Reads a dataset from CSV. Returns the dataset together with the names of
/// mapped-but-unused columns (the caller may warn about them).
pub fn load_csv(path: &Path, mapping: &ColumnMapping) -> Result<(Dataset, Vec<String>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Io(e.to_string()))?
        .iter()
        .map(|h| h.to_string())
        .collect();
    if headers.is_empty() {
        return Err(Error::Validation("empty CSV file".into()));
    }

    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Validation(format!("missing column '{name}'")))
    };
    let iy1 = col(&mapping.y1)?;
    let iy2 = col(&mapping.y2)?;
    let iz = col(&mapping.z)?;
    let ix = col(&mapping.x)?;
    let icovs: Vec<usize> = mapping
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;

    let used: HashSet<usize> = [iy1, iy2, iz, ix]
        .into_iter()
        .chain(icovs.iter().copied())
        .collect();
    let ignored: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| !used.contains(i))
        .map(|(_, h)| h.clone())
        .collect();

    let mut records = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Validation(format!("row {}: {e}", idx + 1)))?;
        let cell = |i: usize, name: &str| -> Result<&str> {
            row.get(i).ok_or_else(|| {
                Error::Validation(format!("row {}: missing cell for '{name}'", idx + 1))
            })
        };
        let y1 = parse_binary(cell(iy1, &mapping.y1)?, idx + 1, &mapping.y1)?;
        let y2 = parse_binary(cell(iy2, &mapping.y2)?, idx + 1, &mapping.y2)?;
        let z = parse_binary(cell(iz, &mapping.z)?, idx + 1, &mapping.z)?;
        let x = parse_binary(cell(ix, &mapping.x)?, idx + 1, &mapping.x)?;
        let mut covariates = Vec::with_capacity(icovs.len());
        for (k, &ci) in icovs.iter().enumerate() {
            covariates.push(parse_real(
                cell(ci, &mapping.covariates[k])?,
                idx + 1,
                &mapping.covariates[k],
            )?);
        }
        records.push(SubjectRecord {
            id: (idx + 1).to_string(),
            y1,
            y2,
            z,
            x,
            covariates,
        });
    }
    let dataset = Dataset::new(records, mapping.covariates.clone())?;
    Ok((dataset, ignored))
}

/// Writes a dataset in the same dialect `load_csv` reads.
pub fn write_dataset_csv(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut out = std::fs::File::create(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut header = vec!["y1", "y2", "z", "x"]
        .into_iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    header.extend(dataset.covariate_names().iter().cloned());
    writeln!(out, "{}", header.join(","))?;
    for r in dataset.records() {
        let mut cells = vec![
            (r.y1 as u8).to_string(),
            (r.y2 as u8).to_string(),
            (r.z as u8).to_string(),
            (r.x as u8).to_string(),
        ];
        cells.extend(r.covariates.iter().map(|v| format!("{v}")));
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Writes the hidden truth of a simulated dataset (latent u, true class).
pub fn write_truth_csv(path: &Path, sim: &SimulatedDataset) -> Result<()> {
    let mut out = std::fs::File::create(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    writeln!(out, "u,true_class")?;
    for (u, c) in sim.latent_u.iter().zip(sim.true_class.iter()) {
        writeln!(out, "{u},{}", c.code())?;
    }
    Ok(())
}

/// Reads a truth file back (used by tests).
pub fn load_truth_csv(path: &Path) -> Result<Vec<(f64, ComplianceClass)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Validation(format!("row {}: {e}", idx + 1)))?;
        let u = parse_real(row.get(0).unwrap_or(""), idx + 1, "u")?;
        let code: u8 = row
            .get(1)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::Validation(format!("row {}: bad class code", idx + 1)))?;
        let class = ComplianceClass::from_code(code)
            .ok_or_else(|| Error::Validation(format!("row {}: class code {code}", idx + 1)))?;
        rows.push((u, class));
    }
    Ok(rows)
}
