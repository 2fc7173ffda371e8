use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Categorical,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    /// Number of distinct codes; 0 for continuous columns.
    #[serde(default)]
    pub cardinality: usize,
    /// Training statistics used for z-scoring (continuous only).
    #[serde(default)]
    pub mean: f64,
    #[serde(default)]
    pub std: f64,
    /// Raw category labels in code order (categorical only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

impl Column {
    pub fn categorical(name: impl Into<String>, categories: Vec<String>) -> Self {
        Column {
            name: name.into(),
            kind: ColumnKind::Categorical,
            cardinality: categories.len(),
            mean: 0.0,
            std: 0.0,
            categories,
        }
    }

    pub fn continuous(name: impl Into<String>, mean: f64, std: f64) -> Self {
        Column {
            name: name.into(),
            kind: ColumnKind::Continuous,
            cardinality: 0,
            mean,
            std,
            categories: Vec::new(),
        }
    }
}

/// Column metadata. Categorical columns come first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularSchema {
    pub columns: Vec<Column>,
}

impl TabularSchema {
    pub fn new(columns: Vec<Column>) -> Result<Self> {
        let schema = TabularSchema { columns };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns.is_empty() {
            return Err(Error::config("schema has no columns"));
        }
        let mut seen_continuous = false;
        for c in &self.columns {
            match c.kind {
                ColumnKind::Categorical => {
                    if seen_continuous {
                        return Err(Error::config(format!(
                            "categorical column {} follows a continuous column",
                            c.name
                        )));
                    }
                    if c.cardinality < 2 {
                        return Err(Error::DegenerateColumn(c.name.clone()));
                    }
                }
                ColumnKind::Continuous => {
                    seen_continuous = true;
                    if !(c.std > 0.0 && c.std.is_finite()) {
                        return Err(Error::DegenerateColumn(c.name.clone()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Total column count `N`.
    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn n_categorical(&self) -> usize {
        self.columns
            .iter()
            .take_while(|c| c.kind == ColumnKind::Categorical)
            .count()
    }

    pub fn n_continuous(&self) -> usize {
        self.len() - self.n_categorical()
    }

    pub fn is_categorical(&self, col: usize) -> bool {
        col < self.n_categorical()
    }

    /// Sum of categorical cardinalities, i.e. the rows of the category table.
    pub fn total_categories(&self) -> usize {
        self.columns.iter().map(|c| c.cardinality).sum()
    }

    /// Start of each categorical column's block in the category table.
    pub fn category_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.columns[..self.n_categorical()]
            .iter()
            .map(|c| {
                let o = off;
                off += c.cardinality;
                o
            })
            .collect()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.columns[..self.n_categorical()]
            .iter()
            .map(|c| c.cardinality)
            .collect()
    }
}

/// Row-major `rows × cols` table of encoded values with a missing mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularBatch {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
    /// `true` marks a missing or masked cell.
    pub mask: Vec<bool>,
    pub labels: Option<Vec<usize>>,
}

impl TabularBatch {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>, labels: Option<Vec<usize>>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape(
                "TabularBatch::new",
                format!("{} values for {rows}x{cols}", values.len()),
            ));
        }
        if let Some(l) = &labels {
            if l.len() != rows {
                return Err(Error::shape(
                    "TabularBatch::new",
                    format!("{} labels for {rows} rows", l.len()),
                ));
            }
        }
        Ok(TabularBatch {
            rows,
            cols,
            values,
            mask: vec![false; rows * cols],
            labels,
        })
    }

    pub fn value(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.cols + col]
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.cols + col]
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Checks codes against the schema's cardinalities.
    pub fn check_schema(&self, schema: &TabularSchema) -> Result<()> {
        if self.cols != schema.len() {
            return Err(Error::shape(
                "TabularBatch::check_schema",
                format!("{} columns, schema has {}", self.cols, schema.len()),
            ));
        }
        for r in 0..self.rows {
            for (c, col) in schema.columns[..schema.n_categorical()].iter().enumerate() {
                let v = self.value(r, c);
                if v < 0.0 || v.fract() != 0.0 || v as usize >= col.cardinality {
                    return Err(Error::Index {
                        op: "TabularBatch::check_schema",
                        index: v.max(0.0) as usize,
                        bound: col.cardinality,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn select(&self, rows: &[usize]) -> TabularBatch {
        let mut values = Vec::with_capacity(rows.len() * self.cols);
        let mut mask = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            values.extend_from_slice(&self.values[r * self.cols..(r + 1) * self.cols]);
            mask.extend_from_slice(&self.mask[r * self.cols..(r + 1) * self.cols]);
        }
        TabularBatch {
            rows: rows.len(),
            cols: self.cols,
            values,
            mask,
            labels: self.labels.as_ref().map(|l| rows.iter().map(|&r| l[r]).collect()),
        }
    }

    /// Replaces masked cells with the sentinel 0.
    pub fn zero_masked(&mut self) {
        for (v, &m) in self.values.iter_mut().zip(&self.mask) {
            if m {
                *v = 0.0;
            }
        }
    }
}

/// Lexicographic ordinal coding of one categorical column.
#[derive(Debug, Clone, PartialEq)]
pub struct OrdinalCodec {
    name: String,
    categories: Vec<String>,
}

impl OrdinalCodec {
    pub fn fit<S: AsRef<str>>(name: &str, column: &[S]) -> Result<Self> {
        if column.is_empty() {
            return Err(Error::config(format!("column {name} is empty")));
        }
        let mut categories: Vec<String> = column.iter().map(|s| s.as_ref().to_owned()).collect();
        categories.sort();
        categories.dedup();
        if categories.len() < 2 {
            return Err(Error::DegenerateColumn(name.to_owned()));
        }
        Ok(OrdinalCodec {
            name: name.to_owned(),
            categories,
        })
    }

    pub fn cardinality(&self) -> usize {
        self.categories.len()
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn encode(&self, value: &str) -> Result<usize> {
        self.categories
            .binary_search_by(|c| c.as_str().cmp(value))
            .map_err(|_| Error::UnknownCategory {
                column: self.name.clone(),
                value: value.to_owned(),
            })
    }

    pub fn decode(&self, code: usize) -> Option<&str> {
        self.categories.get(code).map(String::as_str)
    }
}

/// Population mean/std of a training column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZScore {
    pub mean: f64,
    pub std: f64,
}

impl ZScore {
    pub fn fit(name: &str, train: &[f64]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::DegenerateColumn(name.to_owned()));
        }
        let n = train.len() as f64;
        let mean = train.iter().sum::<f64>() / n;
        let var = train.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::DegenerateColumn(name.to_owned()));
        }
        Ok(ZScore { mean, std })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }
}

/// Fits on `train` and normalizes both columns with the training statistics.
pub fn zscore_fit_transform(name: &str, train: &[f64], eval: &[f64]) -> Result<(Vec<f64>, Vec<f64>, ZScore)> {
    let z = ZScore::fit(name, train)?;
    Ok((
        train.iter().map(|&x| z.apply(x)).collect(),
        eval.iter().map(|&x| z.apply(x)).collect(),
        z,
    ))
}
