//! Layer-typed topics and their content-addressed identity.
//!
//! A topic tells one agent-unit what to produce. Its [`TopicId`] is the
//! SHA-256 of the canonical JSON of the normalized topic body, so structurally
//! equal topics share one cache entry.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::canonical;
use crate::dataset::StrategyTag;
use crate::wisdom::{ConstraintSet, DesignRuleConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopicError {
    #[error("invalid topic: {0}")]
    InvalidTopic(String),
    #[error("malformed topic id `{0}`")]
    MalformedId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Data,
    Information,
    Knowledge,
    Wisdom,
}

impl Layer {
    pub const ALL: [Layer; 4] = [Layer::Data, Layer::Information, Layer::Knowledge, Layer::Wisdom];

    pub fn as_str(self) -> &'static str {
        match self {
            Layer::Data => "data",
            Layer::Information => "information",
            Layer::Knowledge => "knowledge",
            Layer::Wisdom => "wisdom",
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Layer {
    type Err = TopicError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "data" => Ok(Layer::Data),
            "information" => Ok(Layer::Information),
            "knowledge" => Ok(Layer::Knowledge),
            "wisdom" => Ok(Layer::Wisdom),
            _ => Err(TopicError::MalformedId(s.to_string())),
        }
    }
}

/// Identity of a topic: its layer plus the hex SHA-256 of its canonical body.
///
/// Serialized as `"<layer>/<hash>"`, which is also the artifact path stem.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TopicId {
    pub layer: Layer,
    pub hash: String,
}

impl TopicId {
    pub fn short(&self) -> &str {
        &self.hash[..12.min(self.hash.len())]
    }
}

impl fmt::Display for TopicId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.layer, self.hash)
    }
}

impl FromStr for TopicId {
    type Err = TopicError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (layer, hash) = s
            .split_once('/')
            .ok_or_else(|| TopicError::MalformedId(s.to_string()))?;
        if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(TopicError::MalformedId(s.to_string()));
        }
        Ok(TopicId {
            layer: layer.parse()?,
            hash: hash.to_ascii_lowercase(),
        })
    }
}

impl Serialize for TopicId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TopicId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Data topics

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataTopicKind {
    SchemaVerification,
    MissingValueMap,
    ExperimentDimensioning,
    IdUniqueness,
    FormatCompliance,
    Provenance,
    ExperimentConfig,
}

impl DataTopicKind {
    pub const ALL: [DataTopicKind; 7] = [
        DataTopicKind::SchemaVerification,
        DataTopicKind::MissingValueMap,
        DataTopicKind::ExperimentDimensioning,
        DataTopicKind::IdUniqueness,
        DataTopicKind::FormatCompliance,
        DataTopicKind::Provenance,
        DataTopicKind::ExperimentConfig,
    ];

    /// Parameter keys accepted for this kind.
    pub fn allowed_params(self) -> &'static [&'static str] {
        match self {
            DataTopicKind::SchemaVerification => &[],
            DataTopicKind::MissingValueMap => &[],
            DataTopicKind::ExperimentDimensioning => &[],
            DataTopicKind::IdUniqueness => &["id_column"],
            DataTopicKind::FormatCompliance => &["limit"],
            DataTopicKind::Provenance => &["source"],
            DataTopicKind::ExperimentConfig => &["tolerance"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataTopic {
    pub kind: DataTopicKind,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

impl DataTopic {
    pub fn new(kind: DataTopicKind) -> Self {
        Self {
            kind,
            params: BTreeMap::new(),
        }
    }

    pub fn with_param(mut self, key: &str, value: impl Into<String>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    pub fn validate(&self) -> Result<(), TopicError> {
        let allowed = self.kind.allowed_params();
        for (key, value) in &self.params {
            if !allowed.contains(&key.as_str()) {
                return Err(TopicError::InvalidTopic(format!(
                    "parameter `{key}` is not allowed for {:?}",
                    self.kind
                )));
            }
            match key.as_str() {
                "limit" => {
                    let n: u32 = value.trim().parse().map_err(|_| {
                        TopicError::InvalidTopic(format!("limit must be a positive integer, got `{value}`"))
                    })?;
                    if n == 0 {
                        return Err(TopicError::InvalidTopic("limit must be >= 1".into()));
                    }
                }
                "tolerance" => {
                    let t: f64 = value.trim().parse().map_err(|_| {
                        TopicError::InvalidTopic(format!("tolerance must be a number, got `{value}`"))
                    })?;
                    if !(0.0..=1.0).contains(&t) {
                        return Err(TopicError::InvalidTopic("tolerance must lie in [0,1]".into()));
                    }
                }
                "id_column" | "source" if value.trim().is_empty() => {
                    return Err(TopicError::InvalidTopic(format!("`{key}` must be non-empty")));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Slices and contexts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
}

impl Scalar {
    pub fn text(s: impl Into<String>) -> Self {
        Scalar::Text(s.into())
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Scalar::Bool(b) => Some(if *b { 1.0 } else { 0.0 }),
            Scalar::Int(i) => Some(*i as f64),
            Scalar::Float(x) => Some(*x),
            Scalar::Text(s) => s.trim().parse().ok(),
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Bool(b) => write!(f, "{b}"),
            Scalar::Int(i) => write!(f, "{i}"),
            Scalar::Float(x) => write!(f, "{x}"),
            Scalar::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PredicateValue {
    One(Scalar),
    Many(Vec<Scalar>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredicateOp {
    Eq,
    Neq,
    In,
    Lt,
    Le,
    Gt,
    Ge,
    NotNull,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub column: String,
    pub op: PredicateOp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<PredicateValue>,
}

impl Predicate {
    pub fn eq(column: &str, value: Scalar) -> Self {
        Self {
            column: column.to_string(),
            op: PredicateOp::Eq,
            value: Some(PredicateValue::One(value)),
        }
    }

    pub fn is_in(column: &str, values: Vec<Scalar>) -> Self {
        Self {
            column: column.to_string(),
            op: PredicateOp::In,
            value: Some(PredicateValue::Many(values)),
        }
    }

    pub fn cmp(column: &str, op: PredicateOp, value: Scalar) -> Self {
        Self {
            column: column.to_string(),
            op,
            value: Some(PredicateValue::One(value)),
        }
    }

    pub fn not_null(column: &str) -> Self {
        Self {
            column: column.to_string(),
            op: PredicateOp::NotNull,
            value: None,
        }
    }

    fn validate(&self) -> Result<(), TopicError> {
        if self.column.trim().is_empty() {
            return Err(TopicError::InvalidTopic("predicate column is empty".into()));
        }
        match (self.op, &self.value) {
            (PredicateOp::NotNull, _) => Ok(()),
            (PredicateOp::In, Some(PredicateValue::Many(_))) => Ok(()),
            (PredicateOp::In, _) => Err(TopicError::InvalidTopic(format!(
                "`in` predicate on `{}` needs a list value",
                self.column
            ))),
            (_, Some(PredicateValue::One(_))) => Ok(()),
            (op, _) => Err(TopicError::InvalidTopic(format!(
                "{op:?} predicate on `{}` needs a single value",
                self.column
            ))),
        }
    }

    fn normalized(&self) -> Predicate {
        let mut p = self.clone();
        if let Some(PredicateValue::Many(values)) = &mut p.value {
            values.sort_by_key(|v| canonical::to_canonical_string(v).unwrap_or_default());
            values.dedup();
        }
        if p.op == PredicateOp::NotNull {
            p.value = None;
        }
        p
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.op {
            PredicateOp::Eq => "=",
            PredicateOp::Neq => "!=",
            PredicateOp::In => "in",
            PredicateOp::Lt => "<",
            PredicateOp::Le => "<=",
            PredicateOp::Gt => ">",
            PredicateOp::Ge => ">=",
            PredicateOp::NotNull => return write!(f, "{} is not null", self.column),
        };
        match &self.value {
            Some(PredicateValue::One(v)) => write!(f, "{} {op} {v}", self.column),
            Some(PredicateValue::Many(vs)) => {
                let items: Vec<String> = vs.iter().map(|v| v.to_string()).collect();
                write!(f, "{} {op} [{}]", self.column, items.join(", "))
            }
            None => write!(f, "{} {op} ?", self.column),
        }
    }
}

fn normalize_predicates(preds: &[Predicate]) -> Vec<Predicate> {
    let mut out: Vec<Predicate> = preds.iter().map(Predicate::normalized).collect();
    out.sort_by_key(|p| canonical::to_canonical_string(p).unwrap_or_default());
    out.dedup();
    out
}

/// Row filter over the encounter table. Conjunction; empty means every row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceSpec {
    #[serde(default)]
    pub predicates: Vec<Predicate>,
}

impl SliceSpec {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn of(predicates: Vec<Predicate>) -> Self {
        Self { predicates }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

/// Labelled integer bin, inclusive on both ends; `max: None` is open-ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntBin {
    pub label: String,
    pub min: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<i64>,
}

impl IntBin {
    pub fn contains(&self, v: i64) -> bool {
        v >= self.min && self.max.is_none_or(|m| v <= m)
    }
}

/// Age bands used when grouping by `age_band` without explicit bins.
pub fn default_age_bins() -> Vec<IntBin> {
    vec![
        IntBin { label: "18-44".into(), min: 18, max: Some(44) },
        IntBin { label: "45-64".into(), min: 45, max: Some(64) },
        IntBin { label: "65+".into(), min: 65, max: None },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDef {
    pub label: String,
    pub predicates: Vec<Predicate>,
}

/// Framing conditions for an information query: time window, units,
/// population subgroup, comparison arms and grouping.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_window: Option<TimeWindow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub population: Vec<Predicate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<GroupDef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_by: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<Vec<IntBin>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub against: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
}

impl ContextSpec {
    fn validate(&self) -> Result<(), TopicError> {
        for p in &self.population {
            p.validate()?;
        }
        for g in &self.groups {
            if g.label.trim().is_empty() {
                return Err(TopicError::InvalidTopic("group label is empty".into()));
            }
            for p in &g.predicates {
                p.validate()?;
            }
        }
        if let Some(w) = &self.time_window {
            if w.end < w.start {
                return Err(TopicError::InvalidTopic("time window ends before it starts".into()));
            }
        }
        if let Some(level) = self.level {
            if !(level > 0.0 && level < 1.0) {
                return Err(TopicError::InvalidTopic(format!("level {level} outside (0,1)")));
            }
        }
        if let Some(bins) = &self.bins {
            if bins.is_empty() {
                return Err(TopicError::InvalidTopic("bins list is empty".into()));
            }
        }
        Ok(())
    }

    fn normalized(&self) -> ContextSpec {
        let mut c = self.clone();
        c.population = normalize_predicates(&c.population);
        for g in &mut c.groups {
            g.predicates = normalize_predicates(&g.predicates);
        }
        c
    }

    pub fn ci_level(&self) -> f64 {
        self.level.unwrap_or(0.95)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Rate,
    Mean,
    Count,
    TwoProportionTest,
    ChiSquareIndependence,
    PearsonCorrelation,
    SegmentBreakdown,
    Funnel,
}

/// Information-level topic: slice, context, subject and query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoTopic {
    #[serde(default)]
    pub slice: SliceSpec,
    #[serde(default)]
    pub context: ContextSpec,
    pub subject: String,
    pub query: QueryKind,
}

impl InfoTopic {
    pub fn new(subject: &str, query: QueryKind) -> Self {
        Self {
            slice: SliceSpec::all(),
            context: ContextSpec::default(),
            subject: subject.to_string(),
            query,
        }
    }

    pub fn validate(&self) -> Result<(), TopicError> {
        if self.subject.trim().is_empty() {
            return Err(TopicError::InvalidTopic("subject is empty".into()));
        }
        for p in &self.slice.predicates {
            p.validate()?;
        }
        self.context.validate()?;
        match self.query {
            QueryKind::TwoProportionTest if self.context.groups.len() != 2 => {
                Err(TopicError::InvalidTopic(
                    "two-proportion test needs exactly two context groups".into(),
                ))
            }
            QueryKind::PearsonCorrelation if self.context.against.is_none() => Err(
                TopicError::InvalidTopic("correlation needs `context.against`".into()),
            ),
            QueryKind::SegmentBreakdown if self.context.group_by.is_none() => Err(
                TopicError::InvalidTopic("segment breakdown needs `context.group_by`".into()),
            ),
            QueryKind::ChiSquareIndependence if self.context.group_by.is_none() => Err(
                TopicError::InvalidTopic("chi-square needs `context.group_by`".into()),
            ),
            _ => Ok(()),
        }
    }

    fn normalized(&self) -> InfoTopic {
        InfoTopic {
            slice: SliceSpec::of(normalize_predicates(&self.slice.predicates)),
            context: self.context.normalized(),
            subject: self.subject.clone(),
            query: self.query,
        }
    }
}

// ---------------------------------------------------------------------------
// Knowledge topics

/// One side of a hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Descriptor {
    Variant { name: String },
    Tag { tag: StrategyTag },
    Segment { label: String, predicates: Vec<Predicate> },
}

impl Descriptor {
    pub fn tag(tag: StrategyTag) -> Self {
        Descriptor::Tag { tag }
    }

    pub fn variant(name: &str) -> Self {
        Descriptor::Variant { name: name.to_string() }
    }

    pub fn segment(label: &str, predicates: Vec<Predicate>) -> Self {
        Descriptor::Segment {
            label: label.to_string(),
            predicates,
        }
    }

    fn normalized(&self) -> Descriptor {
        match self {
            Descriptor::Segment { label, predicates } => Descriptor::Segment {
                label: label.clone(),
                predicates: normalize_predicates(predicates),
            },
            other => other.clone(),
        }
    }
}

impl fmt::Display for Descriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Descriptor::Variant { name } => write!(f, "variant {name}"),
            Descriptor::Tag { tag } => write!(f, "{}-tagged messages", tag.as_str()),
            Descriptor::Segment { label, .. } => write!(f, "segment {label}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Outperforms,
    Increases,
    Decreases,
    NoEffect,
}

fn default_outcome() -> String {
    "clicked".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub left: Descriptor,
    pub relation: Relation,
    pub right: Descriptor,
    #[serde(default)]
    pub condition: ContextSpec,
    #[serde(default = "default_outcome")]
    pub outcome: String,
}

impl fmt::Display for Hypothesis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verb = match self.relation {
            Relation::Outperforms => "outperform",
            Relation::Increases => "increase",
            Relation::Decreases => "decrease",
            Relation::NoEffect => "have no effect on",
        };
        write!(f, "{} {verb} {} on {}", self.left, self.right, self.outcome)?;
        if !self.condition.population.is_empty() {
            let conds: Vec<String> = self.condition.population.iter().map(|p| p.to_string()).collect();
            write!(f, " where {}", conds.join(" and "))?;
        }
        Ok(())
    }
}

/// How a knowledge topic's evidence is derived from the catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "template", rename_all = "snake_case")]
pub enum EvidenceTemplate {
    /// One two-proportion test per (left arm, right arm) pair.
    PairwiseComparison,
    /// One rate per side, pooled over that side's arms.
    SideRates,
    /// A fixed information topic; its first context group counts as the left side.
    Fixed { topic: InfoTopic },
}

pub fn default_evidence_templates() -> Vec<EvidenceTemplate> {
    vec![EvidenceTemplate::PairwiseComparison, EvidenceTemplate::SideRates]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeTopic {
    pub claim: Hypothesis,
    #[serde(default)]
    pub required_evidence: Vec<EvidenceTemplate>,
}

impl KnowledgeTopic {
    pub fn new(left: Descriptor, relation: Relation, right: Descriptor) -> Self {
        Self {
            claim: Hypothesis {
                left,
                relation,
                right,
                condition: ContextSpec::default(),
                outcome: default_outcome(),
            },
            required_evidence: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), TopicError> {
        if self.claim.left.normalized() == self.claim.right.normalized() {
            return Err(TopicError::InvalidTopic(
                "hypothesis left and right descriptors are equal".into(),
            ));
        }
        if self.claim.outcome.trim().is_empty() {
            return Err(TopicError::InvalidTopic("hypothesis outcome is empty".into()));
        }
        self.claim.condition.validate()?;
        for t in &self.required_evidence {
            if let EvidenceTemplate::Fixed { topic } = t {
                topic.validate()?;
            }
        }
        Ok(())
    }

    pub fn templates(&self) -> Vec<EvidenceTemplate> {
        if self.required_evidence.is_empty() {
            default_evidence_templates()
        } else {
            self.required_evidence.clone()
        }
    }

    fn normalized(&self) -> KnowledgeTopic {
        KnowledgeTopic {
            claim: Hypothesis {
                left: self.claim.left.normalized(),
                relation: self.claim.relation,
                right: self.claim.right.normalized(),
                condition: self.claim.condition.normalized(),
                outcome: self.claim.outcome.clone(),
            },
            required_evidence: self
                .templates()
                .into_iter()
                .map(|t| match t {
                    EvidenceTemplate::Fixed { topic } => EvidenceTemplate::Fixed {
                        topic: topic.normalized(),
                    },
                    other => other,
                })
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Wisdom topics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSegment {
    Universal,
    Segment(ContextSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WisdomTopic {
    pub objective: String,
    pub target_segment: TargetSegment,
    pub portfolio_size: u32,
    pub exploitation_fraction: f64,
    #[serde(default)]
    pub constraints: ConstraintSet,
    #[serde(default)]
    pub rules: DesignRuleConfig,
}

impl WisdomTopic {
    pub fn new(objective: &str, portfolio_size: u32, exploitation_fraction: f64) -> Self {
        Self {
            objective: objective.to_string(),
            target_segment: TargetSegment::Universal,
            portfolio_size,
            exploitation_fraction,
            constraints: ConstraintSet::default(),
            rules: DesignRuleConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TopicError> {
        if self.portfolio_size < 1 {
            return Err(TopicError::InvalidTopic("portfolio_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.exploitation_fraction) {
            return Err(TopicError::InvalidTopic(
                "exploitation_fraction must lie in [0,1]".into(),
            ));
        }
        if self.objective.trim().is_empty() {
            return Err(TopicError::InvalidTopic("objective is empty".into()));
        }
        if let TargetSegment::Segment(c) = &self.target_segment {
            c.validate()?;
        }
        self.constraints
            .validate()
            .map_err(|e| TopicError::InvalidTopic(e.to_string()))?;
        self.rules
            .validate()
            .map_err(|e| TopicError::InvalidTopic(e.to_string()))?;
        Ok(())
    }

    fn normalized(&self) -> WisdomTopic {
        let mut w = self.clone();
        if let TargetSegment::Segment(c) = &w.target_segment {
            w.target_segment = TargetSegment::Segment(c.normalized());
        }
        w
    }
}

// ---------------------------------------------------------------------------

/// A topic at any layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum Topic {
    Data(DataTopic),
    Information(InfoTopic),
    Knowledge(KnowledgeTopic),
    Wisdom(WisdomTopic),
}

impl Topic {
    pub fn layer(&self) -> Layer {
        match self {
            Topic::Data(_) => Layer::Data,
            Topic::Information(_) => Layer::Information,
            Topic::Knowledge(_) => Layer::Knowledge,
            Topic::Wisdom(_) => Layer::Wisdom,
        }
    }

    pub fn validate(&self) -> Result<(), TopicError> {
        match self {
            Topic::Data(t) => t.validate(),
            Topic::Information(t) => t.validate(),
            Topic::Knowledge(t) => t.validate(),
            Topic::Wisdom(t) => t.validate(),
        }
    }

    /// Canonical form: predicates sorted, `in` lists sorted and deduplicated,
    /// default evidence templates made explicit.
    pub fn normalized(&self) -> Topic {
        match self {
            Topic::Data(t) => Topic::Data(t.clone()),
            Topic::Information(t) => Topic::Information(t.normalized()),
            Topic::Knowledge(t) => Topic::Knowledge(t.normalized()),
            Topic::Wisdom(t) => Topic::Wisdom(t.normalized()),
        }
    }

    /// Canonical byte string hashed into the topic id.
    pub fn canonical_bytes(&self) -> Result<Vec<u8>, TopicError> {
        self.validate()?;
        let mut value = canonical::to_canonical_value(&self.normalized())
            .map_err(|e| TopicError::InvalidTopic(e.to_string()))?;
        canonical::normalize_whitespace(&mut value);
        serde_json::to_vec(&value).map_err(|e| TopicError::InvalidTopic(e.to_string()))
    }

    /// Short human-readable summary used in reports and review queues.
    pub fn summary(&self) -> String {
        match self {
            Topic::Data(t) => format!("data check: {:?}", t.kind),
            Topic::Information(t) => {
                let mut s = format!("{:?} of {}", t.query, t.subject);
                if let Some(g) = &t.context.group_by {
                    s.push_str(&format!(" by {g}"));
                }
                if t.context.groups.len() == 2 {
                    s.push_str(&format!(
                        " ({} vs {})",
                        t.context.groups[0].label, t.context.groups[1].label
                    ));
                }
                if !t.slice.predicates.is_empty() {
                    let p: Vec<String> = t.slice.predicates.iter().map(|p| p.to_string()).collect();
                    s.push_str(&format!(" where {}", p.join(" and ")));
                }
                s
            }
            Topic::Knowledge(t) => format!("hypothesis: {}", t.claim),
            Topic::Wisdom(t) => format!(
                "portfolio of {} ({}): {}",
                t.portfolio_size,
                t.exploitation_fraction,
                canonical::collapse_ws(&t.objective)
            ),
        }
    }
}

impl From<DataTopic> for Topic {
    fn from(t: DataTopic) -> Self {
        Topic::Data(t)
    }
}

impl From<InfoTopic> for Topic {
    fn from(t: InfoTopic) -> Self {
        Topic::Information(t)
    }
}

impl From<KnowledgeTopic> for Topic {
    fn from(t: KnowledgeTopic) -> Self {
        Topic::Knowledge(t)
    }
}

impl From<WisdomTopic> for Topic {
    fn from(t: WisdomTopic) -> Self {
        Topic::Wisdom(t)
    }
}

/// Content-addressed identity of a topic.
pub fn canonical_hash(topic: &Topic) -> Result<TopicId, TopicError> {
    let bytes = topic.canonical_bytes()?;
    Ok(TopicId {
        layer: topic.layer(),
        hash: canonical::sha256_hex(&bytes),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rate_topic() -> InfoTopic {
        let mut t = InfoTopic::new("clicked", QueryKind::Rate);
        t.slice.predicates = vec![
            Predicate::eq("variant", Scalar::text("default")),
            Predicate::not_null("age"),
        ];
        t
    }

    #[test]
    fn reordered_keys_hash_equal() {
        let a: Topic = serde_json::from_str(
            r#"{"layer":"information","subject":"clicked","query":"rate","slice":{"predicates":[]}}"#,
        )
        .unwrap();
        let b: Topic = serde_json::from_str(
            r#"{"query":"rate","slice":{"predicates":[]},"layer":"information","subject":"clicked"}"#,
        )
        .unwrap();
        assert_eq!(canonical_hash(&a).unwrap(), canonical_hash(&b).unwrap());
    }

    #[test]
    fn predicate_order_and_whitespace_do_not_matter() {
        let a = rate_topic();
        let mut b = rate_topic();
        b.slice.predicates.reverse();
        b.subject = "  clicked ".into();
        assert_eq!(
            canonical_hash(&a.into()).unwrap(),
            canonical_hash(&b.into()).unwrap()
        );
    }

    #[test]
    fn different_query_different_id() {
        let a = rate_topic();
        let mut b = rate_topic();
        b.query = QueryKind::Mean;
        assert_ne!(
            canonical_hash(&a.into()).unwrap(),
            canonical_hash(&b.into()).unwrap()
        );
    }

    #[test]
    fn topic_id_string_round_trip() {
        let id = canonical_hash(&rate_topic().into()).unwrap();
        let s = id.to_string();
        assert!(s.starts_with("information/"));
        assert_eq!(s.parse::<TopicId>().unwrap(), id);
        assert!("information/xyz".parse::<TopicId>().is_err());
    }

    #[test]
    fn data_topic_param_allowlist() {
        let ok = DataTopic::new(DataTopicKind::FormatCompliance).with_param("limit", "160");
        assert!(ok.validate().is_ok());
        let bad = DataTopic::new(DataTopicKind::FormatCompliance).with_param("id_column", "x");
        assert!(matches!(bad.validate(), Err(TopicError::InvalidTopic(_))));
        let zero = DataTopic::new(DataTopicKind::FormatCompliance).with_param("limit", "0");
        assert!(zero.validate().is_err());
    }

    #[test]
    fn knowledge_topic_rejects_equal_sides() {
        let t = KnowledgeTopic::new(
            Descriptor::tag(StrategyTag::Urgency),
            Relation::Outperforms,
            Descriptor::tag(StrategyTag::Urgency),
        );
        assert!(canonical_hash(&t.into()).is_err());
    }

    #[test]
    fn explicit_default_templates_hash_like_empty() {
        let a = KnowledgeTopic::new(
            Descriptor::tag(StrategyTag::Urgency),
            Relation::Outperforms,
            Descriptor::tag(StrategyTag::SocialProof),
        );
        let mut b = a.clone();
        b.required_evidence = default_evidence_templates();
        assert_eq!(
            canonical_hash(&a.into()).unwrap(),
            canonical_hash(&b.into()).unwrap()
        );
    }

    #[test]
    fn wisdom_topic_invariants() {
        let mut w = WisdomTopic::new("improve click-through", 20, 0.75);
        assert!(w.validate().is_ok());
        w.exploitation_fraction = 1.5;
        assert!(w.validate().is_err());
        w.exploitation_fraction = 0.5;
        w.portfolio_size = 0;
        assert!(w.validate().is_err());
    }

    #[test]
    fn two_proportion_requires_two_groups() {
        let t = InfoTopic::new("clicked", QueryKind::TwoProportionTest);
        assert!(t.validate().is_err());
    }
}
