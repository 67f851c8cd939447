//! Encounter table ingestion, the message catalog and dataset fingerprints.

mod catalog;
mod table;

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use catalog::{
    char_count, CatalogEntry, CharCountMismatch, Generation, MessageCatalog, StrategyTag,
};
pub use table::{required_columns, Cell, ColumnSchema, ColumnType, EncounterTable, TableBuilder};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("duplicate header name `{0}`")]
    DuplicateHeaderName(String),
    #[error("row {row}, column `{column}`: cannot read `{value}` as {expected:?}")]
    TypeCoercionFailure {
        row: usize,
        column: String,
        value: String,
        expected: ColumnType,
    },
    #[error("duplicate catalog entry `{0}`")]
    DuplicateName(String),
    #[error("catalog entry `{0}` has empty text")]
    EmptyText(String),
    #[error("variant `{0}` does not appear in the message catalog")]
    UnknownVariant(String),
    #[error("invalid schema descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("malformed table: {0}")]
    Shape(String),
}

impl DatasetError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtraColumn {
    #[serde(rename = "type")]
    pub ty: ColumnType,
    #[serde(default = "default_true")]
    pub nullable: bool,
}

fn default_true() -> bool {
    true
}

fn default_date_format() -> String {
    "%Y-%m-%d".to_string()
}

/// How to read a CSV export: header renames, date format and optional
/// typing for non-required columns (untyped extras are nullable text).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaDescriptor {
    /// Source header name to canonical column name.
    #[serde(default)]
    pub rename: BTreeMap<String, String>,
    #[serde(default = "default_date_format")]
    pub date_format: String,
    #[serde(default)]
    pub columns: BTreeMap<String, ExtraColumn>,
}

impl Default for SchemaDescriptor {
    fn default() -> Self {
        Self {
            rename: BTreeMap::new(),
            date_format: default_date_format(),
            columns: BTreeMap::new(),
        }
    }
}

impl SchemaDescriptor {
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let s = std::fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

const NULL_TOKENS: [&str; 7] = ["", "na", "n/a", "nan", "null", "none", "nil"];

/// Boolean coercion table, case-insensitive.
pub fn coerce_bool(raw: &str) -> Option<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "y" | "t" => Some(true),
        "0" | "false" | "no" | "n" | "f" => Some(false),
        _ => None,
    }
}

fn coerce(raw: &str, ty: ColumnType, date_format: &str) -> Option<Cell> {
    let s = raw.trim();
    match ty {
        ColumnType::Bool => coerce_bool(s).map(Cell::Bool),
        ColumnType::Int => s.parse().ok().map(Cell::Int),
        ColumnType::Float => s.parse::<f64>().ok().filter(|x| x.is_finite()).map(Cell::Float),
        ColumnType::Categorical | ColumnType::Text => {
            (!s.is_empty()).then(|| Cell::Text(s.to_string()))
        }
        ColumnType::Date => NaiveDate::parse_from_str(s, date_format).ok().map(Cell::Date),
    }
}

/// Reads a CSV export (RFC-4180 quoting, header row) into a typed table.
///
/// Unreadable cells in nullable columns become null; in non-nullable
/// columns they are a [`DatasetError::TypeCoercionFailure`].
pub fn ingest_reader<R: Read>(
    reader: R,
    descriptor: &SchemaDescriptor,
) -> Result<EncounterTable, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| {
            let h = h.trim();
            descriptor.rename.get(h).cloned().unwrap_or_else(|| h.to_string())
        })
        .collect();

    let mut seen = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        if seen.insert(h.clone(), i).is_some() {
            return Err(DatasetError::DuplicateHeaderName(h.clone()));
        }
    }
    let required = required_columns();
    for req in &required {
        if !seen.contains_key(&req.name) {
            return Err(DatasetError::MissingColumn(req.name.clone()));
        }
    }

    // Required columns first in canonical order, then extras in file order.
    let mut schema: Vec<ColumnSchema> = required.clone();
    let mut source_idx: Vec<usize> = required.iter().map(|r| seen[&r.name]).collect();
    for (i, h) in headers.iter().enumerate() {
        if required.iter().any(|r| &r.name == h) {
            continue;
        }
        let (ty, nullable) = descriptor
            .columns
            .get(h)
            .map(|c| (c.ty, c.nullable))
            .unwrap_or((ColumnType::Text, true));
        schema.push(ColumnSchema::new(h, ty, nullable));
        source_idx.push(i);
    }

    let mut columns: Vec<Vec<Cell>> = vec![Vec::new(); schema.len()];
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        for (c, col) in schema.iter().enumerate() {
            let raw = record.get(source_idx[c]).unwrap_or("");
            let is_null_token = NULL_TOKENS.contains(&raw.trim().to_ascii_lowercase().as_str());
            let cell = if col.nullable && is_null_token {
                Cell::Null
            } else {
                match coerce(raw, col.ty, &descriptor.date_format) {
                    Some(cell) => cell,
                    None if col.nullable => Cell::Null,
                    None => {
                        return Err(DatasetError::TypeCoercionFailure {
                            row,
                            column: col.name.clone(),
                            value: raw.to_string(),
                            expected: col.ty,
                        })
                    }
                }
            };
            columns[c].push(cell);
        }
    }
    EncounterTable::from_columns(schema, columns)
}

pub fn ingest(csv_path: &Path, descriptor: &SchemaDescriptor) -> Result<EncounterTable, DatasetError> {
    let file = std::fs::File::open(csv_path).map_err(|e| DatasetError::io(csv_path, e))?;
    ingest_reader(std::io::BufReader::new(file), descriptor)
}

/// Digest over the canonical row serialization of a table.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub digest: String,
    pub row_count: usize,
    pub column_names: Vec<String>,
}

/// SHA-256 over: the compact JSON of the schema list, then one compact JSON
/// array per row, each followed by `\n`.
pub fn fingerprint(table: &EncounterTable) -> DatasetFingerprint {
    let mut hasher = Sha256::new();
    let schema = serde_json::to_vec(&crate::canonical::to_canonical_value(&table.schema()).unwrap())
        .expect("schema serializes");
    hasher.update(&schema);
    hasher.update(b"\n");
    let names = table.column_names();
    let cols: Vec<&[Cell]> = names.iter().map(|n| table.column(n).unwrap()).collect();
    let mut buf = Vec::with_capacity(256);
    for r in 0..table.row_count() {
        buf.clear();
        let row: Vec<serde_json::Value> = cols.iter().map(|c| c[r].to_json()).collect();
        serde_json::to_writer(&mut buf, &row).expect("row serializes");
        buf.push(b'\n');
        hasher.update(&buf);
    }
    DatasetFingerprint {
        digest: hex::encode(hasher.finalize()),
        row_count: table.row_count(),
        column_names: names,
    }
}

/// A table checked against its catalog, with its fingerprint computed once.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub table: EncounterTable,
    pub catalog: MessageCatalog,
    pub fingerprint: DatasetFingerprint,
}

impl Dataset {
    pub fn new(table: EncounterTable, catalog: MessageCatalog) -> Result<Self, DatasetError> {
        for v in table.distinct_variants() {
            if !catalog.contains(&v) {
                return Err(DatasetError::UnknownVariant(v));
            }
        }
        let fingerprint = fingerprint(&table);
        Ok(Self {
            table,
            catalog,
            fingerprint,
        })
    }

    /// The catalog restricted to variants that occur in the table.
    pub fn observed_catalog(&self) -> MessageCatalog {
        let seen: std::collections::BTreeSet<String> = self.table.distinct_variants().into_iter().collect();
        let entries = self
            .catalog
            .entries
            .iter()
            .filter(|e| seen.contains(&e.name))
            .cloned()
            .collect();
        MessageCatalog::from_entries(entries).expect("subset of a valid catalog")
    }
}
