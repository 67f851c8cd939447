//! Data layer: validation and metadata over the raw table, with no
//! statistical interpretation. Payload types have no field for p-values,
//! effect sizes or cross-variant outcome comparisons.

use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{Artifact, Payload, Provenance};
use crate::dataset::{
    CharCountMismatch, ColumnSchema, Dataset, EncounterTable, Generation, MessageCatalog,
    StrategyTag,
};
use crate::topic::{canonical_hash, DataTopic, DataTopicKind, Topic, TopicError};

pub const DEFAULT_SMS_LIMIT: usize = 160;
pub const DEFAULT_BALANCE_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error(transparent)]
    InvalidTopic(#[from] TopicError),
    #[error("table has no rows")]
    EmptyTable,
    #[error("column `{0}` not found")]
    UnknownColumn(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMissingness {
    pub column: String,
    pub null_count: usize,
    pub non_null_count: usize,
    pub null_fraction: f64,
    pub null_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingnessReport {
    pub row_count: usize,
    pub columns: Vec<ColumnMissingness>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub variant_count: usize,
    pub row_count: usize,
    pub expected_share: f64,
    pub tolerance: f64,
    pub shares: BTreeMap<String, f64>,
    pub max_abs_deviation: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuplicateId {
    pub id: String,
    pub rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageLength {
    pub name: String,
    pub char_count: usize,
    pub within_limit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantDefinition {
    pub name: String,
    pub text: String,
    pub char_count: usize,
    pub strategy_tags: Vec<StrategyTag>,
    pub generation: Generation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFindings {
    SchemaVerification {
        columns: Vec<ColumnSchema>,
        required_present: Vec<String>,
        missing: Vec<String>,
    },
    MissingValueMap(MissingnessReport),
    ExperimentDimensioning {
        rows: usize,
        variants: usize,
        columns: usize,
        per_variant_counts: BTreeMap<String, usize>,
    },
    IdUniqueness {
        id_column: String,
        distinct_ids: usize,
        duplicates: Vec<DuplicateId>,
    },
    FormatCompliance {
        limit: usize,
        max_char_count: usize,
        longest: String,
        messages: Vec<MessageLength>,
        /// Printed counts that disagree with recomputation; informational.
        char_count_mismatches: Vec<CharCountMismatch>,
    },
    Provenance {
        source: String,
        dataset_digest: String,
        row_count: usize,
        column_names: Vec<String>,
        catalog_entries: usize,
    },
    ExperimentConfig {
        assignment_column: String,
        variants: Vec<VariantDefinition>,
        balance: BalanceReport,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataReportPayload {
    pub kind: DataTopicKind,
    pub findings: DataFindings,
    pub violations: Vec<String>,
    /// True iff `violations` is empty.
    pub passed: bool,
}

/// Per-column null counts plus the row indices of every null.
pub fn check_missingness(t: &EncounterTable) -> MissingnessReport {
    let n = t.row_count();
    let columns = t
        .schema()
        .iter()
        .map(|s| {
            let cells = t.column(&s.name).expect("schema column exists");
            let null_rows: Vec<usize> = cells
                .iter()
                .enumerate()
                .filter(|(_, c)| c.is_null())
                .map(|(i, _)| i)
                .collect();
            let null_count = null_rows.len();
            ColumnMissingness {
                column: s.name.clone(),
                null_count,
                non_null_count: n - null_count,
                null_fraction: if n == 0 { 0.0 } else { null_count as f64 / n as f64 },
                null_rows,
            }
        })
        .collect();
    MissingnessReport { row_count: n, columns }
}

fn variant_counts(t: &EncounterTable) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for v in t.variants().iter().filter_map(|c| c.as_str()) {
        *counts.entry(v.to_string()).or_insert(0) += 1;
    }
    counts
}

/// Assignment share per variant; passes iff every share lies within
/// `tolerance` of `1 / variant_count`. No outcome is looked at.
pub fn check_randomization_balance(
    t: &EncounterTable,
    tolerance: f64,
) -> Result<BalanceReport, DataError> {
    let n = t.row_count();
    if n == 0 {
        return Err(DataError::EmptyTable);
    }
    let counts = variant_counts(t);
    let k = counts.len();
    let expected = 1.0 / k as f64;
    let shares: BTreeMap<String, f64> = counts
        .into_iter()
        .map(|(v, c)| (v, c as f64 / n as f64))
        .collect();
    let max_abs_deviation = shares
        .values()
        .map(|s| (s - expected).abs())
        .fold(0.0, f64::max);
    Ok(BalanceReport {
        variant_count: k,
        row_count: n,
        expected_share: expected,
        tolerance,
        shares,
        max_abs_deviation,
        passed: max_abs_deviation <= tolerance,
    })
}

pub fn check_id_uniqueness(t: &EncounterTable, id_column: &str) -> Result<Vec<DuplicateId>, DataError> {
    let col = t
        .column(id_column)
        .ok_or_else(|| DataError::UnknownColumn(id_column.to_string()))?;
    let mut rows_by_id: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, c) in col.iter().enumerate() {
        if c.is_null() {
            continue;
        }
        rows_by_id.entry(c.to_string()).or_default().push(i);
    }
    let mut dups: Vec<DuplicateId> = rows_by_id
        .into_iter()
        .filter(|(_, rows)| rows.len() > 1)
        .map(|(id, rows)| DuplicateId { id, rows })
        .collect();
    dups.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(dups)
}

pub fn check_format_compliance(catalog: &MessageCatalog, limit: usize) -> DataFindings {
    let messages: Vec<MessageLength> = catalog
        .entries
        .iter()
        .map(|e| MessageLength {
            name: e.name.clone(),
            char_count: e.char_count,
            within_limit: e.char_count <= limit,
        })
        .collect();
    let longest = catalog
        .entries
        .iter()
        .max_by_key(|e| e.char_count)
        .map(|e| (e.char_count, e.name.clone()))
        .unwrap_or((0, String::new()));
    DataFindings::FormatCompliance {
        limit,
        max_char_count: longest.0,
        longest: longest.1,
        messages,
        char_count_mismatches: catalog.char_count_mismatches(),
    }
}

fn param<T: std::str::FromStr>(topic: &DataTopic, key: &str, default: T) -> T {
    topic
        .params
        .get(key)
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(default)
}

/// Computes the payload and the plain-text report for a data topic.
pub fn run_data_topic(ds: &Dataset, topic: &DataTopic) -> Result<(DataReportPayload, String), DataError> {
    topic.validate()?;
    let t = &ds.table;
    let mut violations = Vec::new();
    let mut lines = Vec::new();
    let findings = match topic.kind {
        DataTopicKind::SchemaVerification => {
            let required = crate::dataset::required_columns();
            let (present, missing): (Vec<_>, Vec<_>) = required
                .iter()
                .map(|r| r.name.clone())
                .partition(|n| t.has_column(n));
            for m in &missing {
                violations.push(format!("missing required column {m}"));
            }
            lines.push(format!(
                "{} columns; {} of {} required columns present",
                t.schema().len(),
                present.len(),
                required.len()
            ));
            for c in t.schema() {
                lines.push(format!(
                    "column {}: {:?}{}",
                    c.name,
                    c.ty,
                    if c.nullable { ", nullable" } else { "" }
                ));
            }
            DataFindings::SchemaVerification {
                columns: t.schema().to_vec(),
                required_present: present,
                missing,
            }
        }
        DataTopicKind::MissingValueMap => {
            let report = check_missingness(t);
            for (c, s) in report.columns.iter().zip(t.schema()) {
                if !s.nullable && c.null_count > 0 {
                    violations.push(format!("{} nulls in non-nullable column {}", c.null_count, c.column));
                }
                lines.push(format!(
                    "column {}: {} null of {} ({:.4})",
                    c.column, c.null_count, report.row_count, c.null_fraction
                ));
            }
            DataFindings::MissingValueMap(report)
        }
        DataTopicKind::ExperimentDimensioning => {
            let counts = variant_counts(t);
            lines.push(format!("rows: {}", t.row_count()));
            lines.push(format!("variants: {}", counts.len()));
            lines.push(format!("columns: {}", t.schema().len()));
            for (v, c) in &counts {
                lines.push(format!("variant {v}: {c} rows"));
            }
            DataFindings::ExperimentDimensioning {
                rows: t.row_count(),
                variants: counts.len(),
                columns: t.schema().len(),
                per_variant_counts: counts,
            }
        }
        DataTopicKind::IdUniqueness => {
            let id_column = topic
                .params
                .get("id_column")
                .cloned()
                .unwrap_or_else(|| "patient_id".to_string());
            let dups = check_id_uniqueness(t, &id_column)?;
            let distinct = t
                .column(&id_column)
                .map(|c| {
                    c.iter()
                        .filter(|x| !x.is_null())
                        .map(|x| x.to_string())
                        .collect::<std::collections::HashSet<_>>()
                        .len()
                })
                .unwrap_or(0);
            lines.push(format!("{distinct} distinct values of {id_column} over {} rows", t.row_count()));
            for d in &dups {
                let msg = format!("duplicate {id_column} {} at rows {:?}", d.id, d.rows);
                lines.push(msg.clone());
                violations.push(msg);
            }
            DataFindings::IdUniqueness {
                id_column,
                distinct_ids: distinct,
                duplicates: dups,
            }
        }
        DataTopicKind::FormatCompliance => {
            let limit = param(topic, "limit", DEFAULT_SMS_LIMIT);
            let findings = check_format_compliance(&ds.catalog, limit);
            if let DataFindings::FormatCompliance {
                messages,
                max_char_count,
                longest,
                char_count_mismatches,
                ..
            } = &findings
            {
                lines.push(format!("limit: {limit} characters"));
                lines.push(format!("longest message: {longest} ({max_char_count} characters)"));
                for m in messages {
                    if !m.within_limit {
                        let msg = format!("message {} has {} characters, over {limit}", m.name, m.char_count);
                        lines.push(msg.clone());
                        violations.push(msg);
                    }
                }
                for mm in char_count_mismatches {
                    lines.push(format!(
                        "message {}: printed count {} differs from recomputed {}",
                        mm.name, mm.printed, mm.recomputed
                    ));
                }
            }
            findings
        }
        DataTopicKind::Provenance => {
            let source = topic
                .params
                .get("source")
                .cloned()
                .unwrap_or_else(|| "unspecified".to_string());
            lines.push(format!("source: {source}"));
            lines.push(format!("dataset digest: {}", ds.fingerprint.digest));
            lines.push(format!("rows: {}", ds.fingerprint.row_count));
            lines.push(format!("columns: {}", ds.fingerprint.column_names.join(", ")));
            lines.push(format!("catalog entries: {}", ds.catalog.len()));
            DataFindings::Provenance {
                source,
                dataset_digest: ds.fingerprint.digest.clone(),
                row_count: ds.fingerprint.row_count,
                column_names: ds.fingerprint.column_names.clone(),
                catalog_entries: ds.catalog.len(),
            }
        }
        DataTopicKind::ExperimentConfig => {
            let tolerance = param(topic, "tolerance", DEFAULT_BALANCE_TOLERANCE);
            let balance = check_randomization_balance(t, tolerance)?;
            let used = variant_counts(t);
            let variants: Vec<VariantDefinition> = ds
                .catalog
                .entries
                .iter()
                .filter(|e| used.contains_key(&e.name))
                .map(|e| VariantDefinition {
                    name: e.name.clone(),
                    text: e.text.clone(),
                    char_count: e.char_count,
                    strategy_tags: e.strategy_tags.iter().copied().collect(),
                    generation: e.generation,
                })
                .collect();
            lines.push("assignment column: variant".to_string());
            lines.push(format!(
                "{} variants, expected share {:.4}, tolerance {tolerance}",
                balance.variant_count, balance.expected_share
            ));
            for (v, s) in &balance.shares {
                lines.push(format!("variant {v}: share {s:.4}"));
            }
            if !balance.passed {
                violations.push(format!(
                    "assignment imbalance: max deviation {:.4} exceeds {tolerance}",
                    balance.max_abs_deviation
                ));
            }
            DataFindings::ExperimentConfig {
                assignment_column: "variant".to_string(),
                variants,
                balance,
            }
        }
    };
    lines.push(if violations.is_empty() {
        "status: passed".to_string()
    } else {
        format!("status: failed ({} violations)", violations.len())
    });
    let passed = violations.is_empty();
    Ok((
        DataReportPayload {
            kind: topic.kind,
            findings,
            violations,
            passed,
        },
        lines.join("\n"),
    ))
}

/// Resolves a data topic into an artifact.
pub fn resolve_data_topic(
    ds: &Dataset,
    topic: &DataTopic,
    created_at: DateTime<Utc>,
) -> Result<Artifact, DataError> {
    let id = canonical_hash(&Topic::Data(topic.clone()))?;
    let (payload, report) = run_data_topic(ds, topic)?;
    Ok(Artifact::new(
        id,
        Payload::Data(payload),
        report,
        Provenance::new(&ds.fingerprint.digest),
        created_at,
    ))
}
