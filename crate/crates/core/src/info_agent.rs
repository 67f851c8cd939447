//! Information layer: deterministic statistics over a slice of the table.
//!
//! Results are facts about the current dataset. No payload field carries a
//! verdict, a significance label or a recommendation.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Datelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{Artifact, Payload, Provenance};
use crate::dataset::{Cell, ColumnType, Dataset};
use crate::stats::{self, StatsError};
use crate::topic::{
    canonical_hash, default_age_bins, ContextSpec, InfoTopic, IntBin, Predicate, PredicateOp,
    PredicateValue, QueryKind, Scalar, SliceSpec, Topic, TopicError, TopicId,
};

pub use crate::stats::{absolute_lift, relative_lift};

/// Names accepted as subjects or predicate columns without being table columns.
pub const DERIVED_METRICS: [&str; 4] = ["age_band", "char_count", "strategy_tag", "sent_weekday"];

pub const FUNNEL_STAGES: [&str; 3] = ["clicked", "authenticated", "redeemed"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InfoError {
    #[error(transparent)]
    InvalidTopic(#[from] TopicError),
    #[error("unknown column or metric `{0}`")]
    UnknownColumn(String),
    #[error("slice matches no rows with a value for `{0}`")]
    EmptySlice(String),
    #[error("degenerate group: {0}")]
    DegenerateGroup(String),
    #[error("column `{column}` is not {expected}")]
    SubjectType { column: String, expected: String },
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub label: String,
    pub n: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub successes: Option<u64>,
    pub estimate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci_low: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci_high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contingency {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelStage {
    pub stage: String,
    pub count: u64,
    /// Over the whole slice.
    pub rate: f64,
    /// Over the previous stage; `None` when that stage is empty.
    pub conditional_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatResult {
    pub query: QueryKind,
    pub subject: String,
    pub estimate: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub ci_level: Option<f64>,
    pub test_statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub degrees_of_freedom: Option<f64>,
    pub n: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub successes: Option<u64>,
    /// The test statistic is undefined for these data.
    #[serde(default)]
    pub degenerate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_results: Option<Vec<GroupResult>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contingency: Option<Contingency>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub funnel: Option<Vec<FunnelStage>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded_groups: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl StatResult {
    fn bare(query: QueryKind, subject: &str, estimate: f64, n: u64) -> Self {
        Self {
            query,
            subject: subject.to_string(),
            estimate,
            ci_low: None,
            ci_high: None,
            ci_level: None,
            test_statistic: None,
            p_value: None,
            degrees_of_freedom: None,
            n,
            successes: None,
            degenerate: false,
            group_results: None,
            contingency: None,
            funnel: None,
            excluded_groups: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Group lookup by label.
    pub fn group(&self, label: &str) -> Option<&GroupResult> {
        self.group_results.as_ref()?.iter().find(|g| g.label == label)
    }
}

// ---------------------------------------------------------------------------
// Count-level operations

/// Proportion `k / n` with a Wilson score interval.
pub fn rate_with_ci(k: u64, n: u64, level: f64) -> Result<StatResult, InfoError> {
    let (lo, hi) = stats::wilson_interval(k, n, level)?;
    let mut r = StatResult::bare(QueryKind::Rate, "", k as f64 / n as f64, n);
    r.ci_low = Some(lo);
    r.ci_high = Some(hi);
    r.ci_level = Some(level);
    r.successes = Some(k);
    Ok(r)
}

/// Pooled two-sided z-test of `k1/n1` against `k2/n2`. The estimate is the
/// difference `p1 - p2` with an unpooled Wald interval.
pub fn two_proportion_test(k1: u64, n1: u64, k2: u64, n2: u64, level: f64) -> Result<StatResult, InfoError> {
    let t = stats::two_proportion_test(k1, n1, k2, n2, level)?;
    let mut r = StatResult::bare(QueryKind::TwoProportionTest, "", t.difference, n1 + n2);
    r.ci_low = Some(t.ci.0);
    r.ci_high = Some(t.ci.1);
    r.ci_level = Some(level);
    r.test_statistic = t.z;
    r.p_value = t.p_value;
    r.degenerate = t.degenerate;
    Ok(r)
}

/// Pearson correlation over complete pairs.
pub fn pearson_correlation(xs: &[f64], ys: &[f64], level: f64) -> Result<StatResult, InfoError> {
    let c = stats::pearson(xs, ys, level).ok_or_else(|| {
        InfoError::DegenerateGroup(format!(
            "correlation needs at least 3 pairs and nonzero variance, got {} pairs",
            xs.len().min(ys.len())
        ))
    })?;
    let mut r = StatResult::bare(QueryKind::PearsonCorrelation, "", c.r, c.n as u64);
    if let Some((lo, hi)) = c.ci {
        r.ci_low = Some(lo.min(c.r));
        r.ci_high = Some(hi.max(c.r));
        r.ci_level = Some(level);
    }
    r.test_statistic = Some(c.t);
    r.p_value = Some(c.p_value);
    r.degrees_of_freedom = Some(c.df);
    Ok(r)
}

// ---------------------------------------------------------------------------
// Column access and slicing

enum Column<'a> {
    Cells(Cow<'a, [Cell]>),
    /// Multi-valued per row; a predicate matches when any value does.
    Multi(Vec<Vec<Cell>>),
}

impl Column<'_> {
    fn values(&self, row: usize) -> Cow<'_, [Cell]> {
        match self {
            Column::Cells(c) => Cow::Borrowed(std::slice::from_ref(&c[row])),
            Column::Multi(m) => Cow::Borrowed(m[row].as_slice()),
        }
    }

    fn single(&self, row: usize) -> &Cell {
        match self {
            Column::Cells(c) => &c[row],
            Column::Multi(m) => m[row].first().unwrap_or(&Cell::Null),
        }
    }
}

fn bin_label(bins: &[IntBin], v: i64) -> Cell {
    bins.iter()
        .find(|b| b.contains(v))
        .map(|b| Cell::Text(b.label.clone()))
        .unwrap_or(Cell::Null)
}

fn column<'a>(ds: &'a Dataset, name: &str, bins: Option<&[IntBin]>) -> Result<Column<'a>, InfoError> {
    let t = &ds.table;
    if let Some(cells) = t.column(name) {
        return Ok(Column::Cells(Cow::Borrowed(cells)));
    }
    let derived: Vec<Cell> = match name {
        "age_band" => {
            let default_bins = default_age_bins();
            let bins = bins.unwrap_or(&default_bins);
            t.column("age")
                .expect("age is required")
                .iter()
                .map(|c| c.as_i64().map_or(Cell::Null, |v| bin_label(bins, v)))
                .collect()
        }
        "char_count" => t
            .variants()
            .iter()
            .map(|v| {
                v.as_str()
                    .and_then(|v| ds.catalog.get(v))
                    .map_or(Cell::Null, |e| Cell::Int(e.char_count as i64))
            })
            .collect(),
        "sent_weekday" => t
            .column("sent_at")
            .expect("sent_at is required")
            .iter()
            .map(|c| c.as_date().map_or(Cell::Null, |d| Cell::Text(d.weekday().to_string())))
            .collect(),
        "strategy_tag" => {
            let multi = t
                .variants()
                .iter()
                .map(|v| {
                    v.as_str()
                        .and_then(|v| ds.catalog.get(v))
                        .map(|e| {
                            e.strategy_tags
                                .iter()
                                .map(|tag| Cell::Text(tag.as_str().to_string()))
                                .collect()
                        })
                        .unwrap_or_default()
                })
                .collect();
            return Ok(Column::Multi(multi));
        }
        _ => return Err(InfoError::UnknownColumn(name.to_string())),
    };
    Ok(Column::Cells(Cow::Owned(derived)))
}

/// Grouping column: integer columns are binned (age falls back to the
/// default age bands).
fn grouping_column<'a>(ds: &'a Dataset, name: &str, ctx: &ContextSpec) -> Result<Column<'a>, InfoError> {
    let int_col = ds.table.column_schema(name).is_some_and(|s| s.ty == ColumnType::Int);
    if int_col {
        let bins = match (&ctx.bins, name) {
            (Some(b), _) => b.clone(),
            (None, "age") => default_age_bins(),
            (None, _) => return column(ds, name, None),
        };
        let cells = ds.table.column(name).expect("checked above");
        let labelled = cells
            .iter()
            .map(|c| c.as_i64().map_or(Cell::Null, |v| bin_label(&bins, v)))
            .collect();
        return Ok(Column::Cells(Cow::Owned(labelled)));
    }
    column(ds, name, ctx.bins.as_deref())
}

fn compare(cell: &Cell, s: &Scalar) -> Option<std::cmp::Ordering> {
    match (cell, s) {
        (Cell::Null, _) => None,
        (Cell::Bool(a), Scalar::Bool(b)) => Some(a.cmp(b)),
        (Cell::Bool(a), Scalar::Text(b)) => crate::dataset::coerce_bool(b).map(|b| a.cmp(&b)),
        (Cell::Int(_) | Cell::Float(_), _) => cell.as_f64()?.partial_cmp(&s.as_f64()?),
        (Cell::Date(d), Scalar::Text(b)) => {
            let other = chrono::NaiveDate::parse_from_str(b.trim(), "%Y-%m-%d").ok()?;
            Some(d.cmp(&other))
        }
        (Cell::Text(a), Scalar::Text(b)) => Some(a.as_str().cmp(b.as_str())),
        (Cell::Text(a), other) => Some(a.as_str().cmp(other.to_string().as_str())),
        _ => None,
    }
}

fn cell_matches(cell: &Cell, p: &Predicate) -> bool {
    use std::cmp::Ordering::*;
    if cell.is_null() {
        return false;
    }
    let one = match &p.value {
        Some(PredicateValue::One(v)) => Some(v),
        _ => None,
    };
    match p.op {
        PredicateOp::NotNull => true,
        PredicateOp::In => match &p.value {
            Some(PredicateValue::Many(vs)) => vs.iter().any(|v| compare(cell, v) == Some(Equal)),
            _ => false,
        },
        op => {
            let Some(ord) = one.and_then(|v| compare(cell, v)) else {
                return false;
            };
            match op {
                PredicateOp::Eq => ord == Equal,
                PredicateOp::Neq => ord != Equal,
                PredicateOp::Lt => ord == Less,
                PredicateOp::Le => ord != Greater,
                PredicateOp::Gt => ord == Greater,
                PredicateOp::Ge => ord != Less,
                PredicateOp::NotNull | PredicateOp::In => unreachable!(),
            }
        }
    }
}

/// Row indices matching every predicate. Null cells match nothing.
pub fn select_rows(ds: &Dataset, predicates: &[Predicate], bins: Option<&[IntBin]>) -> Result<Vec<usize>, InfoError> {
    let mut mask = vec![true; ds.table.row_count()];
    for p in predicates {
        let col = column(ds, &p.column, bins)?;
        for (r, keep) in mask.iter_mut().enumerate() {
            if *keep {
                *keep = col.values(r).iter().any(|c| cell_matches(c, p));
            }
        }
    }
    Ok(mask.iter().enumerate().filter(|(_, k)| **k).map(|(i, _)| i).collect())
}

/// Rows in the slice, restricted by the context's population and time window.
pub fn slice_rows(ds: &Dataset, slice: &SliceSpec, ctx: &ContextSpec) -> Result<Vec<usize>, InfoError> {
    let mut preds = slice.predicates.clone();
    preds.extend(ctx.population.iter().cloned());
    if let Some(w) = &ctx.time_window {
        let start = Scalar::text(w.start.format("%Y-%m-%d").to_string());
        let end = Scalar::text(w.end.format("%Y-%m-%d").to_string());
        preds.push(Predicate::cmp("sent_at", PredicateOp::Ge, start));
        preds.push(Predicate::cmp("sent_at", PredicateOp::Le, end));
    }
    select_rows(ds, &preds, ctx.bins.as_deref())
}

fn bool_counts(col: &Column, rows: &[usize], name: &str) -> Result<(u64, u64), InfoError> {
    let (mut k, mut n) = (0u64, 0u64);
    for &r in rows {
        match col.single(r) {
            Cell::Null => {}
            Cell::Bool(b) => {
                n += 1;
                k += *b as u64;
            }
            _ => {
                return Err(InfoError::SubjectType {
                    column: name.to_string(),
                    expected: "boolean".into(),
                })
            }
        }
    }
    Ok((k, n))
}

fn numeric_values(col: &Column, rows: &[usize], name: &str) -> Result<Vec<Option<f64>>, InfoError> {
    rows.iter()
        .map(|&r| match col.single(r) {
            Cell::Null => Ok(None),
            c => c.as_f64().map(Some).ok_or_else(|| InfoError::SubjectType {
                column: name.to_string(),
                expected: "numeric".into(),
            }),
        })
        .collect()
}

fn is_bool_subject(ds: &Dataset, name: &str) -> bool {
    ds.table.column_schema(name).is_some_and(|s| s.ty == ColumnType::Bool)
}

/// Distinct non-null labels per row of a grouping column, in label order.
fn group_rows(col: &Column, rows: &[usize]) -> BTreeMap<String, Vec<usize>> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for &r in rows {
        let labels: BTreeSet<String> = col
            .values(r)
            .iter()
            .filter(|c| !c.is_null())
            .map(|c| c.to_string())
            .collect();
        for l in labels {
            groups.entry(l).or_default().push(r);
        }
    }
    groups
}

// ---------------------------------------------------------------------------
// Query evaluation

/// Computes the statistic an information topic asks for.
pub fn evaluate_info_topic(ds: &Dataset, topic: &InfoTopic) -> Result<StatResult, InfoError> {
    topic.validate()?;
    let ctx = &topic.context;
    let level = ctx.ci_level();
    let rows = slice_rows(ds, &topic.slice, ctx)?;
    let subject = topic.subject.as_str();
    let empty = || InfoError::EmptySlice(subject.to_string());
    let mut result = match topic.query {
        QueryKind::Rate => {
            let col = column(ds, subject, ctx.bins.as_deref())?;
            let (k, n) = bool_counts(&col, &rows, subject)?;
            if n == 0 {
                return Err(empty());
            }
            rate_with_ci(k, n, level)?
        }
        QueryKind::Mean => {
            let col = column(ds, subject, ctx.bins.as_deref())?;
            let values: Vec<f64> = numeric_values(&col, &rows, subject)?.into_iter().flatten().collect();
            if values.is_empty() {
                return Err(empty());
            }
            let m = stats::mean_ci(&values, level)?;
            let mut r = StatResult::bare(QueryKind::Mean, subject, m.mean, m.n as u64);
            r.ci_low = Some(m.ci.0.min(m.mean));
            r.ci_high = Some(m.ci.1.max(m.mean));
            r.ci_level = Some(level);
            r
        }
        QueryKind::Count => {
            let col = column(ds, subject, ctx.bins.as_deref())?;
            let present = rows.iter().filter(|&&r| !col.single(r).is_null()).count() as u64;
            let mut r = StatResult::bare(QueryKind::Count, subject, present as f64, rows.len() as u64);
            if is_bool_subject(ds, subject) {
                r.successes = Some(bool_counts(&col, &rows, subject)?.0);
            }
            r
        }
        QueryKind::TwoProportionTest => {
            if rows.is_empty() {
                return Err(empty());
            }
            let col = column(ds, subject, ctx.bins.as_deref())?;
            let mut sides = Vec::with_capacity(2);
            for g in &ctx.groups {
                let members = select_rows(ds, &g.predicates, ctx.bins.as_deref())?;
                let members: Vec<usize> = intersect(&rows, &members);
                let (k, n) = bool_counts(&col, &members, subject)?;
                if n == 0 {
                    return Err(InfoError::DegenerateGroup(format!("group `{}` is empty", g.label)));
                }
                sides.push((g.label.clone(), k, n));
            }
            let (ref l1, k1, n1) = sides[0];
            let (ref l2, k2, n2) = sides[1];
            let mut r = two_proportion_test(k1, n1, k2, n2, level)?;
            r.group_results = Some(vec![
                group_rate(l1, k1, n1, level)?,
                group_rate(l2, k2, n2, level)?,
            ]);
            if r.degenerate {
                r.warnings.push("pooled proportion is 0 or 1; test statistic undefined".into());
            }
            r
        }
        QueryKind::ChiSquareIndependence => {
            if rows.is_empty() {
                return Err(empty());
            }
            let group_by = ctx.group_by.as_deref().expect("validated");
            let gcol = grouping_column(ds, group_by, ctx)?;
            let scol = column(ds, subject, ctx.bins.as_deref())?;
            let groups = group_rows(&gcol, &rows);
            let mut levels: BTreeSet<String> = BTreeSet::new();
            for members in groups.values() {
                for &r in members {
                    let c = scol.single(r);
                    if !c.is_null() {
                        levels.insert(c.to_string());
                    }
                }
            }
            let col_labels: Vec<String> = levels.into_iter().collect();
            let mut row_labels = Vec::new();
            let mut counts = Vec::new();
            for (label, members) in &groups {
                let mut row = vec![0u64; col_labels.len()];
                for &r in members {
                    let c = scol.single(r);
                    if !c.is_null() {
                        let j = col_labels.binary_search(&c.to_string()).expect("level collected");
                        row[j] += 1;
                    }
                }
                row_labels.push(label.clone());
                counts.push(row);
            }
            let table: Vec<Vec<f64>> = counts
                .iter()
                .map(|r| r.iter().map(|&c| c as f64).collect())
                .collect();
            let chi = stats::chi_square_independence(&table).ok_or_else(|| {
                InfoError::DegenerateGroup("fewer than two non-empty groups or outcome levels".into())
            })?;
            let mut r = StatResult::bare(QueryKind::ChiSquareIndependence, subject, chi.cramers_v, chi.n as u64);
            r.test_statistic = Some(chi.statistic);
            r.p_value = Some(chi.p_value);
            r.degrees_of_freedom = Some(chi.df);
            r.contingency = Some(Contingency {
                row_labels,
                col_labels,
                counts,
            });
            r
        }
        QueryKind::PearsonCorrelation => {
            let against = ctx.against.as_deref().expect("validated");
            let xcol = column(ds, subject, ctx.bins.as_deref())?;
            let ycol = column(ds, against, ctx.bins.as_deref())?;
            let xs = numeric_values(&xcol, &rows, subject)?;
            let ys = numeric_values(&ycol, &rows, against)?;
            let (xs, ys): (Vec<f64>, Vec<f64>) = xs
                .into_iter()
                .zip(ys)
                .filter_map(|(x, y)| Some((x?, y?)))
                .unzip();
            if xs.is_empty() {
                return Err(empty());
            }
            pearson_correlation(&xs, &ys, level)?
        }
        QueryKind::SegmentBreakdown => {
            if rows.is_empty() {
                return Err(empty());
            }
            let group_by = ctx.group_by.as_deref().expect("validated");
            let gcol = grouping_column(ds, group_by, ctx)?;
            let scol = column(ds, subject, ctx.bins.as_deref())?;
            let binary = is_bool_subject(ds, subject);
            let mut group_results = Vec::new();
            let mut excluded = Vec::new();
            for (label, members) in group_rows(&gcol, &rows) {
                if binary {
                    let (k, n) = bool_counts(&scol, &members, subject)?;
                    if n == 0 {
                        excluded.push(label);
                        continue;
                    }
                    group_results.push(group_rate(&label, k, n, level)?);
                } else {
                    let vals: Vec<f64> = numeric_values(&scol, &members, subject)?.into_iter().flatten().collect();
                    if vals.is_empty() {
                        excluded.push(label);
                        continue;
                    }
                    let m = stats::mean_ci(&vals, level)?;
                    group_results.push(GroupResult {
                        label,
                        n: m.n as u64,
                        successes: None,
                        estimate: m.mean,
                        ci_low: Some(m.ci.0.min(m.mean)),
                        ci_high: Some(m.ci.1.max(m.mean)),
                    });
                }
            }
            let mut r = if binary {
                let (k, n) = bool_counts(&scol, &rows, subject)?;
                if n == 0 {
                    return Err(empty());
                }
                rate_with_ci(k, n, level)?
            } else {
                let vals: Vec<f64> = numeric_values(&scol, &rows, subject)?.into_iter().flatten().collect();
                if vals.is_empty() {
                    return Err(empty());
                }
                let m = stats::mean_ci(&vals, level)?;
                let mut r = StatResult::bare(QueryKind::Mean, subject, m.mean, m.n as u64);
                r.ci_low = Some(m.ci.0.min(m.mean));
                r.ci_high = Some(m.ci.1.max(m.mean));
                r.ci_level = Some(level);
                r
            };
            r.query = QueryKind::SegmentBreakdown;
            r.group_results = Some(group_results);
            r.excluded_groups = excluded;
            r
        }
        QueryKind::Funnel => {
            if rows.is_empty() {
                return Err(empty());
            }
            funnel_rows(ds, &rows, level)?
        }
    };
    result.subject = subject.to_string();
    Ok(result)
}

fn intersect(a: &[usize], b: &[usize]) -> Vec<usize> {
    let set: BTreeSet<usize> = b.iter().copied().collect();
    a.iter().copied().filter(|r| set.contains(r)).collect()
}

fn group_rate(label: &str, k: u64, n: u64, level: f64) -> Result<GroupResult, InfoError> {
    let (lo, hi) = stats::wilson_interval(k, n, level)?;
    Ok(GroupResult {
        label: label.to_string(),
        n,
        successes: Some(k),
        estimate: k as f64 / n as f64,
        ci_low: Some(lo),
        ci_high: Some(hi),
    })
}

/// Conversion funnel clicked, authenticated, redeemed over a slice.
pub fn funnel(ds: &Dataset, slice: &SliceSpec, level: f64) -> Result<StatResult, InfoError> {
    let rows = slice_rows(ds, slice, &ContextSpec::default())?;
    if rows.is_empty() {
        return Err(InfoError::EmptySlice("funnel".into()));
    }
    funnel_rows(ds, &rows, level)
}

fn funnel_rows(ds: &Dataset, rows: &[usize], level: f64) -> Result<StatResult, InfoError> {
    let t = &ds.table;
    let cols: Vec<Vec<bool>> = FUNNEL_STAGES.iter().map(|s| t.bool_column(s)).collect();
    let n = rows.len() as u64;
    let counts: Vec<u64> = cols
        .iter()
        .map(|c| rows.iter().filter(|&&r| c[r]).count() as u64)
        .collect();
    let mut stages = Vec::new();
    let mut prev = n;
    for (i, stage) in FUNNEL_STAGES.iter().enumerate() {
        stages.push(FunnelStage {
            stage: stage.to_string(),
            count: counts[i],
            rate: counts[i] as f64 / n as f64,
            conditional_rate: (prev > 0).then(|| counts[i] as f64 / prev as f64),
        });
        prev = counts[i];
    }
    let mut warnings = Vec::new();
    for i in 1..FUNNEL_STAGES.len() {
        let bad = rows.iter().filter(|&&r| cols[i][r] && !cols[i - 1][r]).count();
        if bad > 0 {
            warnings.push(format!(
                "MonotonicityWarning: {bad} rows with {} but not {}",
                FUNNEL_STAGES[i],
                FUNNEL_STAGES[i - 1]
            ));
        }
    }
    let last = counts[FUNNEL_STAGES.len() - 1];
    let mut r = rate_with_ci(last, n, level)?;
    r.query = QueryKind::Funnel;
    r.subject = FUNNEL_STAGES[FUNNEL_STAGES.len() - 1].to_string();
    r.funnel = Some(stages);
    r.warnings = warnings;
    Ok(r)
}

// ---------------------------------------------------------------------------
// Reports

fn describe_slice(topic: &InfoTopic) -> String {
    let mut parts: Vec<String> = topic.slice.predicates.iter().map(|p| p.to_string()).collect();
    parts.extend(topic.context.population.iter().map(|p| p.to_string()));
    if let Some(w) = &topic.context.time_window {
        parts.push(format!("sent_at from {} to {}", w.start, w.end));
    }
    if parts.is_empty() {
        "all rows".to_string()
    } else {
        parts.join(" and ")
    }
}

fn pct(level: f64) -> String {
    format!("{}%", (level * 100.0 * 1e6).round() / 1e6)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

/// Plain-text report, one fixed template per query kind.
pub fn render_report(topic: &InfoTopic, r: &StatResult) -> String {
    let mut lines = vec![format!("Slice: {} ({} rows counted).", describe_slice(topic), r.n)];
    let ci = |r: &StatResult| match (r.ci_low, r.ci_high, r.ci_level) {
        (Some(lo), Some(hi), Some(level)) => format!(", {} CI [{lo:.6}, {hi:.6}]", pct(level)),
        _ => String::new(),
    };
    match r.query {
        QueryKind::Rate => lines.push(format!(
            "Rate of {}: {} of {} = {:.6}{}.",
            r.subject,
            r.successes.unwrap_or(0),
            r.n,
            r.estimate,
            ci(r)
        )),
        QueryKind::Mean => lines.push(format!(
            "Mean of {} over {} values: {:.6}{}.",
            r.subject,
            r.n,
            r.estimate,
            ci(r)
        )),
        QueryKind::Count => lines.push(format!(
            "Count of rows with {} present: {} of {}.",
            r.subject, r.estimate, r.n
        )),
        QueryKind::TwoProportionTest => {
            for g in r.group_results.iter().flatten() {
                lines.push(format!(
                    "Group {}: {} of {} = {:.6}.",
                    g.label,
                    g.successes.unwrap_or(0),
                    g.n,
                    g.estimate
                ));
            }
            lines.push(format!("Difference in {} rate: {:.6}{}.", r.subject, r.estimate, ci(r)));
            lines.push(format!(
                "Pooled z statistic: {}; two-sided p-value: {}.",
                opt(r.test_statistic),
                opt(r.p_value)
            ));
        }
        QueryKind::ChiSquareIndependence => {
            if let Some(c) = &r.contingency {
                lines.push(format!(
                    "Contingency table of {} ({}) by {}.",
                    topic.context.group_by.as_deref().unwrap_or(""),
                    c.row_labels.join(", "),
                    r.subject
                ));
                for (label, row) in c.row_labels.iter().zip(&c.counts) {
                    let cells: Vec<String> = c
                        .col_labels
                        .iter()
                        .zip(row)
                        .map(|(l, n)| format!("{l}={n}"))
                        .collect();
                    lines.push(format!("Row {label}: {}.", cells.join(", ")));
                }
            }
            lines.push(format!(
                "Chi-square statistic: {} on {} degrees of freedom; p-value: {}; Cramer's V: {:.6}.",
                opt(r.test_statistic),
                r.degrees_of_freedom.unwrap_or(0.0),
                opt(r.p_value),
                r.estimate
            ));
        }
        QueryKind::PearsonCorrelation => lines.push(format!(
            "Pearson correlation of {} with {} over {} complete pairs: r = {:.6}{}; t = {} on {} degrees of freedom; two-sided p-value: {}.",
            r.subject,
            topic.context.against.as_deref().unwrap_or(""),
            r.n,
            r.estimate,
            ci(r),
            opt(r.test_statistic),
            r.degrees_of_freedom.unwrap_or(0.0),
            opt(r.p_value)
        )),
        QueryKind::SegmentBreakdown => {
            lines.push(format!(
                "Overall {} over {} rows: {:.6}{}.",
                r.subject,
                r.n,
                r.estimate,
                ci(r)
            ));
            for g in r.group_results.iter().flatten() {
                let ci = match (g.ci_low, g.ci_high) {
                    (Some(lo), Some(hi)) => format!(" [{lo:.6}, {hi:.6}]"),
                    _ => String::new(),
                };
                lines.push(format!(
                    "Segment {}={}: {:.6} over {} rows{}.",
                    topic.context.group_by.as_deref().unwrap_or(""),
                    g.label,
                    g.estimate,
                    g.n,
                    ci
                ));
            }
            for label in &r.excluded_groups {
                lines.push(format!("Segment {label} excluded: no non-null {} values.", r.subject));
            }
        }
        QueryKind::Funnel => {
            for s in r.funnel.iter().flatten() {
                lines.push(format!(
                    "Stage {}: {} of {} = {:.6}; conditional on previous stage: {}.",
                    s.stage,
                    s.count,
                    r.n,
                    s.rate,
                    opt(s.conditional_rate)
                ));
            }
        }
    }
    for w in &r.warnings {
        lines.push(format!("Warning: {w}."));
    }
    lines.join("\n")
}

/// Resolves an information topic into an artifact. `deps` are the
/// data-layer artifacts the topic was scheduled after.
pub fn resolve_info_topic(
    ds: &Dataset,
    deps: &[TopicId],
    topic: &InfoTopic,
    created_at: DateTime<Utc>,
) -> Result<Artifact, InfoError> {
    let id = canonical_hash(&Topic::Information(topic.clone()))?;
    let result = evaluate_info_topic(ds, topic)?;
    let report = render_report(topic, &result);
    let mut prov = Provenance::new(&ds.fingerprint.digest);
    prov.input_artifact_ids = deps.to_vec();
    Ok(Artifact::new(id, Payload::Information(result), report, prov, created_at))
}
