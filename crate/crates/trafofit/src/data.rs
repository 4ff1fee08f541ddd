//! In-memory datasets: rectangular frames of typed columns.
//!
//! Factor columns store integer level codes next to their level table, so
//! a factor with a thousand levels costs one `u32` per row, never an
//! n-by-levels indicator matrix.

use std::collections::HashMap;

use crate::error::{Result, TrafoError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub enum Column<S> {
    Real(Vec<S>),
    /// Integer-valued column (counts, event indicators).
    Int(Vec<i64>),
    Categorical { levels: Vec<String>, codes: Vec<u32> },
}

impl<S: Scalar> Column<S> {
    pub fn len(&self) -> usize {
        match self {
            Column::Real(v) => v.len(),
            Column::Int(v) => v.len(),
            Column::Categorical { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Column::Real(_) => "real",
            Column::Int(_) => "integer",
            Column::Categorical { .. } => "categorical",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset<S> {
    names: Vec<String>,
    columns: Vec<Column<S>>,
    index: HashMap<String, usize>,
    n_rows: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            columns: Vec::new(),
            index: HashMap::new(),
            n_rows: 0,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn column_names(&self) -> &[String] {
        &self.names
    }

    pub fn add_column(&mut self, name: impl Into<String>, column: Column<S>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TrafoError::Data(format!("duplicate column `{name}`")));
        }
        if self.columns.is_empty() {
            self.n_rows = column.len();
        } else if column.len() != self.n_rows {
            return Err(TrafoError::Data(format!(
                "column `{name}` has {} rows, expected {}",
                column.len(),
                self.n_rows
            )));
        }
        self.index.insert(name.clone(), self.columns.len());
        self.names.push(name);
        self.columns.push(column);
        Ok(())
    }

    pub fn add_real(&mut self, name: impl Into<String>, values: Vec<S>) -> Result<()> {
        self.add_column(name, Column::Real(values))
    }

    pub fn add_int(&mut self, name: impl Into<String>, values: Vec<i64>) -> Result<()> {
        self.add_column(name, Column::Int(values))
    }

    /// Add a factor column from raw string values. When `level_order` is
    /// given it fixes the level coding; otherwise levels are collected in
    /// sorted order.
    pub fn add_categorical(
        &mut self,
        name: impl Into<String>,
        values: &[String],
        level_order: Option<Vec<String>>,
    ) -> Result<()> {
        let name = name.into();
        let levels = match level_order {
            Some(l) => l,
            None => {
                let mut l: Vec<String> = values.to_vec();
                l.sort();
                l.dedup();
                l
            }
        };
        let lookup: HashMap<&str, u32> = levels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i as u32))
            .collect();
        let mut codes = Vec::with_capacity(values.len());
        for v in values {
            match lookup.get(v.as_str()) {
                Some(&c) => codes.push(c),
                None => {
                    return Err(TrafoError::UnseenLevel {
                        column: name,
                        level: v.clone(),
                    })
                }
            }
        }
        self.add_column(name, Column::Categorical { levels, codes })
    }

    pub fn column(&self, name: &str) -> Result<&Column<S>> {
        self.index
            .get(name)
            .map(|&i| &self.columns[i])
            .ok_or_else(|| TrafoError::MissingColumn(name.to_string()))
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Numeric value of a real or integer column at a row.
    pub fn numeric(&self, name: &str, row: usize) -> Result<f64> {
        match self.column(name)? {
            Column::Real(v) => Ok(v[row].as_f64()),
            Column::Int(v) => Ok(v[row] as f64),
            Column::Categorical { .. } => Err(TrafoError::ColumnType {
                column: name.to_string(),
                expected: "a numeric column, found a categorical one".into(),
            }),
        }
    }

    /// Level code of a categorical column at a row.
    pub fn level_code(&self, name: &str, row: usize) -> Result<usize> {
        match self.column(name)? {
            Column::Categorical { codes, .. } => Ok(codes[row] as usize),
            other => Err(TrafoError::ColumnType {
                column: name.to_string(),
                expected: format!("a categorical column, found a {} one", other.type_name()),
            }),
        }
    }

    pub fn levels(&self, name: &str) -> Result<&[String]> {
        match self.column(name)? {
            Column::Categorical { levels, .. } => Ok(levels),
            other => Err(TrafoError::ColumnType {
                column: name.to_string(),
                expected: format!("a categorical column, found a {} one", other.type_name()),
            }),
        }
    }

    pub fn is_categorical(&self, name: &str) -> Result<bool> {
        Ok(matches!(self.column(name)?, Column::Categorical { .. }))
    }

    /// Rough heap footprint in bytes, for memory-bound assertions.
    pub fn approx_bytes(&self) -> usize {
        self.columns
            .iter()
            .map(|c| match c {
                Column::Real(v) => v.len() * std::mem::size_of::<S>(),
                Column::Int(v) => v.len() * 8,
                Column::Categorical { levels, codes } => {
                    codes.len() * 4 + levels.iter().map(|l| l.len() + 24).sum::<usize>()
                }
            })
            .sum()
    }

    /// Row subset as a new dataset (used by validation splits, CV folds
    /// and lag construction).
    pub fn select_rows(&self, rows: &[usize]) -> Dataset<S> {
        let mut out = Dataset::new();
        for (name, col) in self.names.iter().zip(&self.columns) {
            let new_col = match col {
                Column::Real(v) => Column::Real(rows.iter().map(|&r| v[r]).collect()),
                Column::Int(v) => Column::Int(rows.iter().map(|&r| v[r]).collect()),
                Column::Categorical { levels, codes } => Column::Categorical {
                    levels: levels.clone(),
                    codes: rows.iter().map(|&r| codes[r]).collect(),
                },
            };
            out.add_column(name.clone(), new_col).expect("fresh frame");
        }
        out
    }
}
