//! Sample batches, dataset schemas and the CSV dataset format.
//!
//! CSV layout: a header `feature_0,...,feature_{d-1},label,group` followed by
//! one row per sample. Features are written in scientific notation with 17
//! significant digits so a save/load cycle is bitwise exact.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSchema {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub num_groups: usize,
    pub class_names: Vec<String>,
    pub group_names: Vec<String>,
}

impl DatasetSchema {
    pub fn with_default_names(feature_dim: usize, num_classes: usize, num_groups: usize) -> Self {
        DatasetSchema {
            feature_dim,
            num_classes,
            num_groups,
            class_names: (0..num_classes).map(|c| format!("class_{c}")).collect(),
            group_names: (0..num_groups).map(|g| format!("group_{g}")).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_groups < 2 {
            return Err(Error::Config("schema needs at least 2 classes and 2 groups".into()));
        }
        if self.class_names.len() != self.num_classes || self.group_names.len() != self.num_groups {
            return Err(Error::Config("schema name lists do not match class/group counts".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("schema feature_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    /// `N x d`
    pub features: Array2<f64>,
    pub class_labels: Vec<usize>,
    pub group_labels: Vec<usize>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> SampleBatch {
        SampleBatch {
            features: self.features.select(Axis(0), indices),
            class_labels: indices.iter().map(|&i| self.class_labels[i]).collect(),
            group_labels: indices.iter().map(|&i| self.group_labels[i]).collect(),
        }
    }

    pub fn validate(&self, schema: &DatasetSchema) -> Result<()> {
        let n = self.len();
        if self.class_labels.len() != n || self.group_labels.len() != n {
            return Err(Error::Argument("label vectors not aligned with features".into()));
        }
        if self.features.ncols() != schema.feature_dim {
            return Err(Error::Argument(format!(
                "batch has {} features, schema expects {}",
                self.features.ncols(),
                schema.feature_dim
            )));
        }
        if let Some(i) = self.class_labels.iter().position(|&c| c >= schema.num_classes) {
            return Err(Error::Argument(format!("class label out of range at row {i}")));
        }
        if let Some(i) = self.group_labels.iter().position(|&g| g >= schema.num_groups) {
            return Err(Error::Argument(format!("group label out of range at row {i}")));
        }
        Ok(())
    }

    pub fn group_counts(&self, num_groups: usize) -> Vec<usize> {
        let mut counts = vec![0; num_groups];
        for &g in &self.group_labels {
            counts[g] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: DatasetSchema,
    pub samples: SampleBatch,
}

impl Dataset {
    /// Seeded split into (train, held-out) with `train_fraction` of samples in train.
    pub fn split(&self, train_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut idx: Vec<usize> = (0..self.samples.len()).collect();
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.samples.len() as f64) * train_fraction).round() as usize;
        let (a, b) = idx.split_at(cut.min(idx.len()));
        (
            Dataset {
                schema: self.schema.clone(),
                samples: self.samples.select(a),
            },
            Dataset {
                schema: self.schema.clone(),
                samples: self.samples.select(b),
            },
        )
    }
}

pub fn schema_path_for(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".schema.toml");
    PathBuf::from(s)
}

pub fn save_schema(schema: &DatasetSchema, path: &Path) -> Result<()> {
    let text = toml::to_string(schema).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_schema(path: &Path) -> Result<DatasetSchema> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let schema: DatasetSchema =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    schema.validate()?;
    Ok(schema)
}

pub fn format_feature(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn save_csv(data: &Dataset, path: &Path) -> Result<()> {
    let io = |e: csv::Error| Error::Ingestion {
        path: path.to_path_buf(),
        problems: vec![e.to_string()],
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let d = data.samples.features.ncols();
    let mut header: Vec<String> = (0..d).map(|i| format!("feature_{i}")).collect();
    header.push("label".into());
    header.push("group".into());
    w.write_record(&header).map_err(io)?;
    for (i, row) in data.samples.features.rows().into_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|&v| format_feature(v)).collect();
        rec.push(data.samples.class_labels[i].to_string());
        rec.push(data.samples.group_labels[i].to_string());
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a dataset CSV. With a schema, labels are range-checked against it;
/// without one, class and group counts are inferred from the largest label.
pub fn load_csv(path: &Path, schema: Option<&DatasetSchema>) -> Result<Dataset> {
    let fail = |problems: Vec<String>| Error::Ingestion {
        path: path.to_path_buf(),
        problems,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| fail(vec![e.to_string()]))?;
    let header = rdr.headers().map_err(|e| fail(vec![format!("line 1: {e}")]))?.clone();
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols.len() < 3 || cols[cols.len() - 2] != "label" || cols[cols.len() - 1] != "group" {
        return Err(fail(vec!["line 1: header must be feature_0,...,feature_{d-1},label,group".into()]));
    }
    let d = cols.len() - 2;
    if let Some((i, c)) = cols[..d].iter().enumerate().find(|(i, c)| **c != format!("feature_{i}")) {
        return Err(fail(vec![format!("line 1: column {i} is '{c}', expected 'feature_{i}'")]));
    }
    if let Some(s) = schema {
        s.validate()?;
        if s.feature_dim != d {
            return Err(fail(vec![format!(
                "line 1: {d} feature columns, schema expects {}",
                s.feature_dim
            )]));
        }
    }

    let mut problems = Vec::new();
    let mut features = Vec::new();
    let mut classes = Vec::new();
    let mut groups = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("line {line}: {e}"));
                continue;
            }
        };
        if rec.len() != d + 2 {
            problems.push(format!("line {line}: expected {} columns, found {}", d + 2, rec.len()));
            continue;
        }
        let mut row = Vec::with_capacity(d);
        let mut ok = true;
        for (j, cell) in rec.iter().take(d).enumerate() {
            match cell.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => row.push(v),
                _ => {
                    problems.push(format!("line {line}: feature_{j} '{cell}' is not a finite number"));
                    ok = false;
                }
            }
        }
        let mut label = |name: &str, cell: &str, limit: Option<usize>| -> Option<usize> {
            match cell.trim().parse::<usize>() {
                Ok(v) if limit.is_none_or(|l| v < l) => Some(v),
                Ok(v) => {
                    problems.push(format!(
                        "line {line}: {name} {v} out of range 0..{}",
                        limit.unwrap_or_default()
                    ));
                    None
                }
                Err(_) => {
                    problems.push(format!("line {line}: {name} '{cell}' is not a non-negative integer"));
                    None
                }
            }
        };
        let c = label("label", &rec[d], schema.map(|s| s.num_classes));
        let g = label("group", &rec[d + 1], schema.map(|s| s.num_groups));
        if let (true, Some(c), Some(g)) = (ok, c, g) {
            features.extend(row);
            classes.push(c);
            groups.push(g);
        }
    }
    if !problems.is_empty() {
        return Err(fail(problems));
    }
    let n = classes.len();
    let schema = match schema {
        Some(s) => s.clone(),
        None => {
            let k = classes.iter().max().map_or(2, |&m| (m + 1).max(2));
            let z = groups.iter().max().map_or(2, |&m| (m + 1).max(2));
            DatasetSchema::with_default_names(d, k, z)
        }
    };
    Ok(Dataset {
        schema,
        samples: SampleBatch {
            features: Array2::from_shape_vec((n, d), features).expect("row-major features"),
            class_labels: classes,
            group_labels: groups,
        },
    })
}

/// Reads a plain numeric CSV with a header row. When `columns` is empty all
/// columns are used; otherwise only the named ones, in the given order.
pub fn load_numeric_csv(path: &Path, columns: &[String]) -> Result<Array2<f64>> {
    let fail = |problems: Vec<String>| Error::Ingestion {
        path: path.to_path_buf(),
        problems,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| fail(vec![e.to_string()]))?;
    let header = rdr.headers().map_err(|e| fail(vec![format!("line 1: {e}")]))?.clone();
    let picks: Vec<usize> = if columns.is_empty() {
        (0..header.len()).collect()
    } else {
        columns
            .iter()
            .map(|c| {
                header
                    .iter()
                    .position(|h| h.trim() == c)
                    .ok_or_else(|| fail(vec![format!("line 1: no column named '{c}'")]))
            })
            .collect::<Result<_>>()?
    };
    let mut values = Vec::new();
    let mut rows = 0;
    let mut problems = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        match rec {
            Ok(rec) => {
                for &p in &picks {
                    match rec.get(p).map(|c| c.trim().parse::<f64>()) {
                        Some(Ok(v)) if v.is_finite() => values.push(v),
                        _ => problems.push(format!("line {line}: column {p} is not a finite number")),
                    }
                }
                rows += 1;
            }
            Err(e) => problems.push(format!("line {line}: {e}")),
        }
    }
    if !problems.is_empty() {
        return Err(fail(problems));
    }
    if rows == 0 {
        return Err(fail(vec!["no data rows".into()]));
    }
    Ok(Array2::from_shape_vec((rows, picks.len()), values).expect("rectangular"))
}
