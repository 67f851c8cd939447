//! Knowledge layer: hypotheses scored against information artifacts.

use std::collections::BTreeSet;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{Artifact, ArtifactLookup, Payload, Provenance};
use crate::dataset::MessageCatalog;
use crate::info_agent::StatResult;
use crate::llm::{LlmAdapter, LlmError, LlmMode, LlmRequest};
use crate::topic::{
    canonical_hash, ContextSpec, Descriptor, EvidenceTemplate, GroupDef, InfoTopic,
    KnowledgeTopic, Layer, Predicate, QueryKind, Relation, Scalar, SliceSpec, Topic, TopicError,
    TopicId,
};

/// p-value at or above which a test counts as agreeing with a no-effect claim.
pub const NO_EFFECT_ALPHA: f64 = 0.05;

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error(transparent)]
    InvalidTopic(#[from] TopicError),
    #[error("descriptor `{0}` matches no catalog entry")]
    UnresolvableDescriptor(String),
    #[error("evidence {topic} could not be resolved: {reason}")]
    EvidenceResolutionFailure { topic: TopicId, reason: String },
    #[error("evidence {0} is not an information artifact")]
    EvidenceLayer(TopicId),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RationaleSource {
    Llm,
    Manual,
    Canned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rationale {
    pub text: String,
    pub source: RationaleSource,
}

/// Tests carry weight in the support score; descriptive rates do not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceRole {
    Test,
    Descriptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub artifact_id: TopicId,
    pub role: EvidenceRole,
    pub direction_match: bool,
    pub p_value: Option<f64>,
    /// Left minus right for comparisons, r for correlations, the estimate otherwise.
    pub effect: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardized_effect: Option<f64>,
}

impl EvidenceItem {
    /// `1 - p` clamped to [0,1`]; without a p-value, the absolute
    /// standardized effect saturated at 1.
    pub fn weight(&self) -> f64 {
        if self.role == EvidenceRole::Descriptive {
            return 0.0;
        }
        match (self.p_value, self.standardized_effect) {
            (Some(p), _) => (1.0 - p).clamp(0.0, 1.0),
            (None, Some(s)) => s.abs().min(1.0),
            (None, None) => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceBand {
    Low,
    Medium,
    High,
}

impl ConfidenceBand {
    pub const HIGH_FLOOR: f64 = 0.8;
    pub const MEDIUM_FLOOR: f64 = 0.6;

    pub fn from_score(score: f64) -> Self {
        Self::from_score_with(score, Self::HIGH_FLOOR, Self::MEDIUM_FLOOR)
    }

    pub fn from_score_with(score: f64, high: f64, medium: f64) -> Self {
        if score >= high {
            ConfidenceBand::High
        } else if score >= medium {
            ConfidenceBand::Medium
        } else {
            ConfidenceBand::Low
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConfidenceBand::High => "High",
            ConfidenceBand::Medium => "Medium",
            ConfidenceBand::Low => "Low",
        }
    }
}

impl fmt::Display for ConfidenceBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportScore {
    pub score: f64,
    /// No weighted evidence; the score is the 0.5 midpoint.
    pub neutral: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeClaim {
    pub topic: KnowledgeTopic,
    pub theoretical_rationale: Rationale,
    pub evidence: Vec<EvidenceItem>,
    pub support_score: f64,
    #[serde(default)]
    pub neutral: bool,
    pub confidence_band: ConfidenceBand,
    #[serde(default)]
    pub generalizability_notes: String,
}

/// `(1 + Σ w·d / Σ w) / 2`, or a neutral 0.5 when `Σ w = 0`.
pub fn empirical_support(evidence: &[EvidenceItem]) -> SupportScore {
    let (mut num, mut den) = (0.0, 0.0);
    for e in evidence {
        let w = e.weight();
        let d = if e.direction_match { 1.0 } else { -1.0 };
        num += w * d;
        den += w;
    }
    if den <= 0.0 {
        return SupportScore {
            score: 0.5,
            neutral: true,
        };
    }
    SupportScore {
        score: ((1.0 + num / den) / 2.0).clamp(0.0, 1.0),
        neutral: false,
    }
}

/// Whether a signed effect agrees with the relation.
pub fn direction_matches(relation: Relation, effect: f64, p_value: Option<f64>) -> bool {
    match relation {
        Relation::Outperforms | Relation::Increases => effect > 0.0,
        Relation::Decreases => effect < 0.0,
        Relation::NoEffect => match p_value {
            Some(p) => p >= NO_EFFECT_ALPHA,
            None => effect.abs() < 1e-12,
        },
    }
}

// ---------------------------------------------------------------------------
// Evidence expansion

struct Arm {
    label: String,
    variant: Option<String>,
    predicates: Vec<Predicate>,
}

fn arms(d: &Descriptor, catalog: &MessageCatalog) -> Result<Vec<Arm>, KnowledgeError> {
    let unresolvable = || KnowledgeError::UnresolvableDescriptor(d.to_string());
    let variant_arm = |name: &str| Arm {
        label: name.to_string(),
        variant: Some(name.to_string()),
        predicates: vec![Predicate::eq("variant", Scalar::text(name))],
    };
    match d {
        Descriptor::Variant { name } => {
            if !catalog.contains(name) {
                return Err(unresolvable());
            }
            Ok(vec![variant_arm(name)])
        }
        Descriptor::Tag { tag } => {
            let names = catalog.variants_with_tag(*tag);
            if names.is_empty() {
                return Err(unresolvable());
            }
            Ok(names.iter().map(|n| variant_arm(n)).collect())
        }
        Descriptor::Segment { label, predicates } => Ok(vec![Arm {
            label: label.clone(),
            variant: None,
            predicates: predicates.clone(),
        }]),
    }
}

/// Predicates selecting every row on one side of a hypothesis.
fn side_predicates(arms: &[Arm]) -> Vec<Predicate> {
    if arms.len() == 1 {
        return arms[0].predicates.clone();
    }
    let names: Vec<Scalar> = arms
        .iter()
        .filter_map(|a| a.variant.clone())
        .map(Scalar::Text)
        .collect();
    vec![Predicate::is_in("variant", names)]
}

fn base_context(condition: &ContextSpec) -> ContextSpec {
    let mut c = condition.clone();
    c.groups.clear();
    c.group_by = None;
    c.against = None;
    c
}

/// Evidence topic with the role it plays in scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceSpec {
    pub topic: InfoTopic,
    pub role: EvidenceRole,
}

fn role_for(query: QueryKind) -> EvidenceRole {
    match query {
        QueryKind::TwoProportionTest | QueryKind::PearsonCorrelation | QueryKind::ChiSquareIndependence => {
            EvidenceRole::Test
        }
        _ => EvidenceRole::Descriptive,
    }
}

/// Expands a hypothesis's evidence templates against the catalog.
pub fn expand_evidence(topic: &KnowledgeTopic, catalog: &MessageCatalog) -> Result<Vec<EvidenceSpec>, KnowledgeError> {
    topic.validate()?;
    let h = &topic.claim;
    let left = arms(&h.left, catalog)?;
    let right = arms(&h.right, catalog)?;
    let ctx = base_context(&h.condition);
    let mut out: Vec<EvidenceSpec> = Vec::new();
    let mut push = |spec: EvidenceSpec| {
        if !out.contains(&spec) {
            out.push(spec);
        }
    };
    for template in topic.templates() {
        match template {
            EvidenceTemplate::PairwiseComparison => {
                for l in &left {
                    for r in &right {
                        if l.variant.is_some() && l.variant == r.variant {
                            continue;
                        }
                        let mut context = ctx.clone();
                        context.groups = vec![
                            GroupDef { label: l.label.clone(), predicates: l.predicates.clone() },
                            GroupDef { label: r.label.clone(), predicates: r.predicates.clone() },
                        ];
                        push(EvidenceSpec {
                            topic: InfoTopic {
                                slice: SliceSpec::all(),
                                context,
                                subject: h.outcome.clone(),
                                query: QueryKind::TwoProportionTest,
                            },
                            role: EvidenceRole::Test,
                        });
                    }
                }
            }
            EvidenceTemplate::SideRates => {
                for side in [&left, &right] {
                    push(EvidenceSpec {
                        topic: InfoTopic {
                            slice: SliceSpec::of(side_predicates(side)),
                            context: ctx.clone(),
                            subject: h.outcome.clone(),
                            query: QueryKind::Rate,
                        },
                        role: EvidenceRole::Descriptive,
                    });
                }
            }
            EvidenceTemplate::Fixed { topic } => {
                let role = role_for(topic.query);
                push(EvidenceSpec { topic, role });
            }
        }
    }
    Ok(out)
}

/// Information topics a hypothesis needs, in expansion order.
pub fn required_evidence(topic: &KnowledgeTopic, catalog: &MessageCatalog) -> Result<Vec<InfoTopic>, KnowledgeError> {
    Ok(expand_evidence(topic, catalog)?.into_iter().map(|s| s.topic).collect())
}

/// Scores one resolved evidence result against the relation.
pub fn evidence_item(id: TopicId, role: EvidenceRole, relation: Relation, r: &StatResult) -> EvidenceItem {
    let p = r.p_value;
    let (effect, standardized) = match r.query {
        QueryKind::TwoProportionTest => (r.estimate, Some(r.test_statistic.unwrap_or(0.0))),
        QueryKind::PearsonCorrelation => (r.estimate, Some(r.estimate)),
        _ => (r.estimate, None),
    };
    let direction_match = match (r.query, relation) {
        (QueryKind::ChiSquareIndependence, Relation::NoEffect) => direction_matches(relation, 0.0, p),
        // Association without a sign: any detected association agrees.
        (QueryKind::ChiSquareIndependence, _) => p.is_some_and(|p| p < NO_EFFECT_ALPHA),
        _ => direction_matches(relation, effect, p),
    };
    EvidenceItem {
        artifact_id: id,
        role,
        direction_match,
        p_value: p,
        effect,
        standardized_effect: standardized,
    }
}

// ---------------------------------------------------------------------------
// Evaluation

pub struct KnowledgeContext<'a> {
    pub catalog: &'a MessageCatalog,
    pub store: &'a dyn ArtifactLookup,
    pub llm: &'a LlmAdapter,
    pub dataset_fingerprint: &'a str,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone)]
pub struct KnowledgeOutcome {
    pub artifact: Artifact,
    /// Evidence topics that were missing from the store and resolved here.
    pub resolved_on_demand: Vec<TopicId>,
}

fn rationale_request(topic: &KnowledgeTopic, evidence: &[(EvidenceItem, StatResult)], score: SupportScore) -> LlmRequest {
    let hypothesis = topic.claim.to_string();
    let mut content = format!("Hypothesis: {hypothesis}\nEmpirical support score: {:.4}\nEvidence:\n", score.score);
    for (item, r) in evidence {
        content.push_str(&format!(
            "- {} {:?} on {}: estimate {:.6}, p-value {}\n",
            item.artifact_id,
            r.query,
            r.subject,
            r.estimate,
            r.p_value.map_or("n/a".to_string(), |p| format!("{p:.6}"))
        ));
    }
    content.push_str(
        "Provide the theoretical rationale and a generalizability assessment as JSON {\"rationale\": string, \"generalizability\": string}.",
    );
    LlmRequest::new(Layer::Knowledge, content, hypothesis)
}

fn render_report(claim: &KnowledgeClaim) -> String {
    let mut lines = vec![
        format!("Hypothesis: {}.", claim.topic.claim),
        format!(
            "Support score: {:.4} ({}){}.",
            claim.support_score,
            claim.confidence_band,
            if claim.neutral { ", neutral: no weighted evidence" } else { "" }
        ),
    ];
    for e in &claim.evidence {
        lines.push(format!(
            "Evidence {} ({:?}): effect {:.6}, p-value {}, weight {:.4}, direction {}.",
            e.artifact_id,
            e.role,
            e.effect,
            e.p_value.map_or("n/a".to_string(), |p| format!("{p:.6}")),
            e.weight(),
            if e.direction_match { "matches" } else { "opposes" }
        ));
    }
    lines.push(format!(
        "Rationale ({:?}): {}",
        claim.theoretical_rationale.source, claim.theoretical_rationale.text
    ));
    if !claim.generalizability_notes.is_empty() {
        lines.push(format!("Generalizability: {}", claim.generalizability_notes));
    }
    lines.join("\n")
}

/// Evaluates a hypothesis. Evidence already in the store is reused; missing
/// evidence goes through `resolver` exactly once per topic.
pub fn evaluate_hypothesis(
    topic: &KnowledgeTopic,
    ctx: &KnowledgeContext<'_>,
    resolver: &mut dyn FnMut(&InfoTopic) -> Result<Artifact, String>,
) -> Result<KnowledgeOutcome, KnowledgeError> {
    let id = canonical_hash(&Topic::Knowledge(topic.clone()))?;
    let specs = expand_evidence(topic, ctx.catalog)?;
    let mut resolved_on_demand = Vec::new();
    let mut pairs: Vec<(EvidenceItem, StatResult)> = Vec::new();
    let mut seen = BTreeSet::new();
    for spec in specs {
        let eid = canonical_hash(&Topic::Information(spec.topic.clone()))?;
        if !seen.insert(eid.clone()) {
            continue;
        }
        let artifact = match ctx.store.get_artifact(&eid) {
            Some(a) => a,
            None => {
                let a = resolver(&spec.topic).map_err(|reason| KnowledgeError::EvidenceResolutionFailure {
                    topic: eid.clone(),
                    reason,
                })?;
                resolved_on_demand.push(eid.clone());
                a
            }
        };
        let Payload::Information(result) = artifact.payload else {
            return Err(KnowledgeError::EvidenceLayer(eid));
        };
        pairs.push((evidence_item(eid, spec.role, topic.claim.relation, &result), result));
    }
    let evidence: Vec<EvidenceItem> = pairs.iter().map(|(e, _)| e.clone()).collect();
    let score = empirical_support(&evidence);
    let completion = ctx.llm.complete_validated(&rationale_request(topic, &pairs, score))?;
    let json = completion.json.unwrap_or_default();
    let field = |k: &str| json.get(k).and_then(|v| v.as_str()).unwrap_or_default().to_string();
    let source = if ctx.llm.mode() == LlmMode::Canned {
        RationaleSource::Canned
    } else {
        RationaleSource::Llm
    };
    let claim = KnowledgeClaim {
        topic: topic.clone(),
        theoretical_rationale: Rationale { text: field("rationale"), source },
        evidence: evidence.clone(),
        support_score: score.score,
        neutral: score.neutral,
        confidence_band: ConfidenceBand::from_score(score.score),
        generalizability_notes: field("generalizability"),
    };
    let report = render_report(&claim);
    let mut prov = Provenance::new(ctx.dataset_fingerprint);
    prov.input_artifact_ids = evidence.iter().map(|e| e.artifact_id.clone()).collect();
    prov.llm_exchange_ids = completion.exchange_ids;
    Ok(KnowledgeOutcome {
        artifact: Artifact::new(id, Payload::Knowledge(claim), report, prov, ctx.created_at),
        resolved_on_demand,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::StrategyTag;

    fn item(matches: bool, p: Option<f64>) -> EvidenceItem {
        EvidenceItem {
            artifact_id: format!("information/{}", "0".repeat(64)).parse().unwrap(),
            role: EvidenceRole::Test,
            direction_match: matches,
            p_value: p,
            effect: 0.0,
            standardized_effect: None,
        }
    }

    #[test]
    fn support_boundaries() {
        assert_eq!(empirical_support(&[item(true, Some(0.0))]).score, 1.0);
        assert_eq!(empirical_support(&[item(false, Some(0.0))]).score, 0.0);
        assert_eq!(empirical_support(&[item(true, Some(0.05)), item(false, Some(0.05))]).score, 0.5);
        let neutral = empirical_support(&[]);
        assert!(neutral.neutral && neutral.score == 0.5);
        assert!(empirical_support(&[item(true, Some(1.0))]).neutral);
    }

    #[test]
    fn bands() {
        assert_eq!(ConfidenceBand::from_score(0.8), ConfidenceBand::High);
        assert_eq!(ConfidenceBand::from_score(0.79), ConfidenceBand::Medium);
        assert_eq!(ConfidenceBand::from_score(0.6), ConfidenceBand::Medium);
        assert_eq!(ConfidenceBand::from_score(0.59), ConfidenceBand::Low);
    }

    #[test]
    fn urgency_vs_social_proof_expansion() {
        let t = KnowledgeTopic::new(
            Descriptor::tag(StrategyTag::Urgency),
            Relation::Outperforms,
            Descriptor::tag(StrategyTag::SocialProof),
        );
        let specs = expand_evidence(&t, &MessageCatalog::stage1()).unwrap();
        let tests: Vec<_> = specs.iter().filter(|s| s.role == EvidenceRole::Test).collect();
        assert_eq!(tests.len(), 2);
        let labels: Vec<(String, String)> = tests
            .iter()
            .map(|s| (s.topic.context.groups[0].label.clone(), s.topic.context.groups[1].label.clone()))
            .collect();
        assert_eq!(
            labels,
            vec![
                ("salience".to_string(), "socialNorms".to_string()),
                ("timeliness".to_string(), "socialNorms".to_string())
            ]
        );
        assert_eq!(specs.len(), 4);
    }

    #[test]
    fn unresolvable_descriptor() {
        let t = KnowledgeTopic::new(
            Descriptor::variant("nope"),
            Relation::Outperforms,
            Descriptor::variant("default"),
        );
        assert!(matches!(
            expand_evidence(&t, &MessageCatalog::stage1()),
            Err(KnowledgeError::UnresolvableDescriptor(_))
        ));
    }

    #[test]
    fn no_effect_direction() {
        assert!(direction_matches(Relation::NoEffect, 0.3, Some(0.2)));
        assert!(!direction_matches(Relation::NoEffect, 0.3, Some(0.01)));
        assert!(direction_matches(Relation::Decreases, -0.1, Some(0.01)));
    }
}
