use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::DatasetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnType {
    Bool,
    Int,
    Float,
    Categorical,
    Date,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ColumnType,
    pub nullable: bool,
}

impl ColumnSchema {
    pub fn new(name: &str, ty: ColumnType, nullable: bool) -> Self {
        Self {
            name: name.to_string(),
            ty,
            nullable,
        }
    }
}

/// Columns every encounter table must carry, in canonical order.
pub fn required_columns() -> Vec<ColumnSchema> {
    use ColumnType::*;
    vec![
        ColumnSchema::new("patient_id", Text, false),
        ColumnSchema::new("variant", Categorical, false),
        ColumnSchema::new("clicked", Bool, false),
        ColumnSchema::new("authenticated", Bool, false),
        ColumnSchema::new("opted_out", Bool, false),
        ColumnSchema::new("redeemed", Bool, false),
        ColumnSchema::new("age", Int, true),
        ColumnSchema::new("gender", Categorical, true),
        ColumnSchema::new("state", Categorical, true),
        ColumnSchema::new("drug_category", Categorical, true),
        ColumnSchema::new("sent_at", Date, true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Cell {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
    Date(NaiveDate),
}

impl Cell {
    pub fn is_null(&self) -> bool {
        matches!(self, Cell::Null)
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Cell::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Cell::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Cell::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_date(&self) -> Option<NaiveDate> {
        match self {
            Cell::Date(d) => Some(*d),
            _ => None,
        }
    }

    /// Numeric view: booleans map to 0/1.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Bool(b) => Some(if *b { 1.0 } else { 0.0 }),
            Cell::Int(i) => Some(*i as f64),
            Cell::Float(x) => Some(*x),
            _ => None,
        }
    }

    /// JSON value used in the canonical row serialization.
    pub fn to_json(&self) -> serde_json::Value {
        use serde_json::Value;
        match self {
            Cell::Null => Value::Null,
            Cell::Bool(b) => Value::Bool(*b),
            Cell::Int(i) => Value::from(*i),
            Cell::Float(x) => serde_json::Number::from_f64(*x)
                .map(Value::Number)
                .unwrap_or(Value::Null),
            Cell::Text(s) => Value::String(s.clone()),
            Cell::Date(d) => Value::String(d.format("%Y-%m-%d").to_string()),
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Null => Ok(()),
            Cell::Bool(b) => write!(f, "{b}"),
            Cell::Int(i) => write!(f, "{i}"),
            Cell::Float(x) => write!(f, "{x}"),
            Cell::Text(s) => f.write_str(s),
            Cell::Date(d) => write!(f, "{}", d.format("%Y-%m-%d")),
        }
    }
}

/// The experiment dataset, stored column-major. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EncounterTable {
    schema: Vec<ColumnSchema>,
    columns: Vec<Vec<Cell>>,
    index: HashMap<String, usize>,
    rows: usize,
}

impl EncounterTable {
    /// Builds a table from column-major data, checking the required schema.
    pub fn from_columns(
        schema: Vec<ColumnSchema>,
        columns: Vec<Vec<Cell>>,
    ) -> Result<Self, DatasetError> {
        if schema.len() != columns.len() {
            return Err(DatasetError::Shape(format!(
                "{} schema entries for {} columns",
                schema.len(),
                columns.len()
            )));
        }
        let rows = columns.first().map_or(0, Vec::len);
        let mut index = HashMap::new();
        for (i, (col, cells)) in schema.iter().zip(&columns).enumerate() {
            if index.insert(col.name.clone(), i).is_some() {
                return Err(DatasetError::DuplicateHeaderName(col.name.clone()));
            }
            if cells.len() != rows {
                return Err(DatasetError::Shape(format!(
                    "column `{}` has {} cells, expected {rows}",
                    col.name,
                    cells.len()
                )));
            }
        }
        for req in required_columns() {
            let Some(&i) = index.get(&req.name) else {
                return Err(DatasetError::MissingColumn(req.name));
            };
            if schema[i].ty != req.ty {
                return Err(DatasetError::Shape(format!(
                    "column `{}` has type {:?}, expected {:?}",
                    req.name, schema[i].ty, req.ty
                )));
            }
            if !req.nullable {
                if let Some(row) = columns[i].iter().position(Cell::is_null) {
                    return Err(DatasetError::TypeCoercionFailure {
                        row,
                        column: req.name,
                        value: String::new(),
                        expected: req.ty,
                    });
                }
            }
        }
        Ok(Self {
            schema,
            columns,
            index,
            rows,
        })
    }

    pub fn row_count(&self) -> usize {
        self.rows
    }

    pub fn schema(&self) -> &[ColumnSchema] {
        &self.schema
    }

    pub fn column_names(&self) -> Vec<String> {
        self.schema.iter().map(|c| c.name.clone()).collect()
    }

    pub fn column_schema(&self, name: &str) -> Option<&ColumnSchema> {
        self.index.get(name).map(|&i| &self.schema[i])
    }

    pub fn column(&self, name: &str) -> Option<&[Cell]> {
        self.index.get(name).map(|&i| self.columns[i].as_slice())
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn cell(&self, row: usize, name: &str) -> Option<&Cell> {
        self.column(name).and_then(|c| c.get(row))
    }

    /// Required boolean column, panics only if the schema invariant was broken.
    pub fn bool_column(&self, name: &str) -> Vec<bool> {
        self.column(name)
            .map(|c| c.iter().map(|x| x.as_bool().unwrap_or(false)).collect())
            .unwrap_or_default()
    }

    pub fn variants(&self) -> &[Cell] {
        self.column("variant").expect("variant column is required")
    }

    /// Distinct variant names in first-seen order.
    pub fn distinct_variants(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        self.variants()
            .iter()
            .filter_map(|c| c.as_str())
            .filter(|v| seen.insert(v.to_string()))
            .map(str::to_string)
            .collect()
    }

    /// Row as `(column, cell)` pairs in schema order.
    pub fn row(&self, row: usize) -> Vec<(&str, &Cell)> {
        self.schema
            .iter()
            .zip(&self.columns)
            .map(|(s, c)| (s.name.as_str(), &c[row]))
            .collect()
    }

    /// Writes the table as CSV with a header row, in schema order.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.schema.iter().map(|c| c.name.as_str()))?;
        for r in 0..self.rows {
            w.write_record(self.columns.iter().map(|c| c[r].to_string()))?;
        }
        w.flush().map_err(|e| DatasetError::io(Path::new("<csv writer>"), e))?;
        Ok(())
    }
}

/// Row-major builder for tables with the required schema plus extras.
#[derive(Debug, Default)]
pub struct TableBuilder {
    schema: Vec<ColumnSchema>,
    columns: Vec<Vec<Cell>>,
}

impl TableBuilder {
    pub fn with_required() -> Self {
        let schema = required_columns();
        let columns = vec![Vec::new(); schema.len()];
        Self { schema, columns }
    }

    pub fn reserve(&mut self, rows: usize) {
        for c in &mut self.columns {
            c.reserve(rows);
        }
    }

    /// Appends one row; cells must follow the schema order.
    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width mismatch");
        for (col, cell) in self.columns.iter_mut().zip(row) {
            col.push(cell);
        }
    }

    pub fn build(self) -> Result<EncounterTable, DatasetError> {
        EncounterTable::from_columns(self.schema, self.columns)
    }
}
