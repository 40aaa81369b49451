//! Clinical tabular features: CSV ingest and train-split standardization.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature order of the tabular vector.
pub const FEATURES: [&str; 19] = [
    "Seminal plasma anti-Mullerian hormone",
    "Serum total testosterone",
    "Serum oestradiol",
    "Serum sex hormone-binding globulin",
    "Serum follicle-stimulating hormone",
    "Serum Luteinizing hormone",
    "Serum inhibin B",
    "Serum anti-Mullerian hormone",
    "Abstinence time",
    "Body mass index",
    "Age",
    "Sperm concentration",
    "Ejaculate volume",
    "Sperm vitality",
    "Normal spermatozoa",
    "Head defects",
    "Midpiece and neck defects",
    "Tail defects",
    "Teratozoospermia index",
];

const ID_COLUMNS: [&str; 2] = ["participantid", "id"];
pub const STD_FLOOR: f64 = 1e-8;

/// Lowercase ASCII alphanumerics only; folds umlauts so that
/// "Müllerian" and "Mullerian" match.
pub fn normalize_name(name: &str) -> String {
    name.chars()
        .map(|c| match c {
            'ü' | 'Ü' => 'u',
            'ö' | 'Ö' => 'o',
            'ä' | 'Ä' => 'a',
            c => c,
        })
        .filter(char::is_ascii_alphanumeric)
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularRecord {
    pub participant_id: String,
    /// `None` marks a missing value.
    pub values: Vec<Option<f64>>,
}

impl TabularRecord {
    pub fn missing(&self) -> Vec<bool> {
        self.values.iter().map(Option::is_none).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TabularTable {
    pub records: Vec<TabularRecord>,
}

impl TabularTable {
    pub fn get(&self, id: &str) -> Option<&TabularRecord> {
        self.records.iter().find(|r| r.participant_id == id)
    }
}

/// Read a delimited file whose header names a participant-id column and all
/// [`FEATURES`]. Extra columns are ignored; empty cells are missing values.
pub fn read_tabular(path: &Path, delimiter: u8) -> Result<TabularTable> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let normalized: Vec<String> = headers.iter().map(normalize_name).collect();
    let schema = |detail: String| Error::Schema {
        path: path.to_path_buf(),
        detail,
    };
    let id_col = ID_COLUMNS
        .iter()
        .find_map(|id| normalized.iter().position(|h| h == id))
        .ok_or_else(|| schema("no participant id column".into()))?;
    let mut cols = Vec::with_capacity(FEATURES.len());
    for feature in FEATURES {
        let key = normalize_name(feature);
        let col = normalized
            .iter()
            .position(|h| *h == key)
            .ok_or_else(|| schema(format!("missing column '{feature}'")))?;
        cols.push(col);
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map_or(i + 2, |p| p.line() as usize);
        let id = row.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(schema(format!("row {line}: empty participant id")));
        }
        if !seen.insert(id.clone()) {
            return Err(schema(format!("row {line}: duplicate participant id '{id}'")));
        }
        let mut values = Vec::with_capacity(cols.len());
        for &c in &cols {
            let cell = row.get(c).unwrap_or("");
            if cell.is_empty() {
                values.push(None);
                continue;
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => values.push(Some(v)),
                _ => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        row: line,
                        column: headers[c].to_string(),
                        value: cell.to_string(),
                    })
                }
            }
        }
        records.push(TabularRecord {
            participant_id: id,
            values,
        });
    }
    Ok(TabularTable { records })
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Schema {
            path: path.to_path_buf(),
            detail: e.to_string(),
        }
    }
}

/// Per-feature standardization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularStats {
    pub mean: Vec<f64>,
    /// Population standard deviation, floored at [`STD_FLOOR`].
    pub std: Vec<f64>,
}

impl TabularStats {
    /// Fit on the observed values of the rows whose ids are in `train_ids`.
    pub fn fit(table: &TabularTable, train_ids: &[String]) -> Result<Self> {
        let train: HashSet<&str> = train_ids.iter().map(String::as_str).collect();
        let rows: Vec<&TabularRecord> = table
            .records
            .iter()
            .filter(|r| train.contains(r.participant_id.as_str()))
            .collect();
        let mut mean = Vec::with_capacity(FEATURES.len());
        let mut std = Vec::with_capacity(FEATURES.len());
        for (j, name) in FEATURES.iter().enumerate() {
            let observed: Vec<f64> = rows.iter().filter_map(|r| r.values[j]).collect();
            if observed.is_empty() {
                return Err(Error::DegenerateFeature(name.to_string()));
            }
            let n = observed.len() as f64;
            let m = observed.iter().sum::<f64>() / n;
            let var = observed.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean.push(m);
            std.push(var.sqrt().max(STD_FLOOR));
        }
        Ok(TabularStats { mean, std })
    }

    /// z-scores, with missing values imputed by the mean (z = 0).
    pub fn transform(&self, record: &TabularRecord) -> Vec<f32> {
        record
            .values
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v.map_or(0.0, |v| ((v - m) / s) as f32))
            .collect()
    }
}

/// z-scored vectors keyed by participant id.
pub fn standardize(table: &TabularTable, stats: &TabularStats) -> HashMap<String, Vec<f32>> {
    table
        .records
        .iter()
        .map(|r| (r.participant_id.clone(), stats.transform(r)))
        .collect()
}
