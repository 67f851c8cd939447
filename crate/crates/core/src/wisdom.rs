//! Wisdom layer: a constrained message portfolio traced to knowledge claims.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::artifact::{Artifact, Payload, Provenance};
use crate::dataset::{char_count, MessageCatalog, StrategyTag};
use crate::knowledge::{ConfidenceBand, KnowledgeClaim};
use crate::llm::{LlmAdapter, LlmError, LlmRequest};
use crate::topic::{
    canonical_hash, Descriptor, Layer, PredicateOp, PredicateValue, Relation, Scalar,
    TargetSegment, Topic, TopicError, TopicId, WisdomTopic,
};

pub const RETRY_BUDGET: usize = 3;
pub const DEFAULT_PROVIDER: &str = "Dr. Kristen Johnson";

#[derive(Debug, Error)]
pub enum WisdomError {
    #[error(transparent)]
    InvalidTopic(#[from] TopicError),
    #[error("no eligible claims for {0:?} with a nonzero quota")]
    InsufficientClaims(CandidateGeneration),
    #[error("unknown strategy tag `{0}`")]
    UnknownTag(String),
    #[error("template needs at least one strategy tag")]
    EmptyTags,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

// ---------------------------------------------------------------------------
// Constraints

fn default_max_chars() -> usize {
    160
}

fn default_forbidden() -> Vec<String> {
    ["expire", "expires soon", "last chance", "act now or"]
        .map(String::from)
        .to_vec()
}

fn default_prefix() -> String {
    r"^(?:Hi, (?:it's )?|Following your visit: |From )?Dr\. \p{Lu}\p{L}*(?: \p{Lu}\p{L}*)?".to_string()
}

fn default_min_traced() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    #[serde(default = "default_max_chars")]
    pub max_chars: usize,
    /// Matched as case-insensitive substrings after NFC normalization.
    #[serde(default = "default_forbidden")]
    pub forbidden_tokens: Vec<String>,
    /// Regex the text must match at its start (provider attribution).
    #[serde(default = "default_prefix")]
    pub required_prefix_pattern: String,
    #[serde(default = "default_min_traced")]
    pub min_claims_traced: usize,
}

impl Default for ConstraintSet {
    fn default() -> Self {
        Self {
            max_chars: default_max_chars(),
            forbidden_tokens: default_forbidden(),
            required_prefix_pattern: default_prefix(),
            min_claims_traced: default_min_traced(),
        }
    }
}

impl ConstraintSet {
    pub fn validate(&self) -> Result<(), WisdomError> {
        if self.max_chars < 1 {
            return Err(WisdomError::InvalidConfig("max_chars must be >= 1".into()));
        }
        if self.forbidden_tokens.iter().any(|t| t.trim().is_empty()) {
            return Err(WisdomError::InvalidConfig("forbidden token is empty".into()));
        }
        Regex::new(&self.required_prefix_pattern)
            .map_err(|e| WisdomError::InvalidConfig(format!("required_prefix_pattern: {e}")))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    MaxChars,
    ForbiddenTokens,
    RequiredPrefix,
    MinClaimsTraced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMatch {
    pub token: String,
    /// Offset in Unicode scalars within the normalized, lowercased text.
    pub char_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintCheck {
    pub constraint: ConstraintKind,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub matches: Vec<TokenMatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub checks: Vec<ConstraintCheck>,
}

impl ConstraintReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<String> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{:?}: {}", c.constraint, c.detail.clone().unwrap_or_default()))
            .collect()
    }
}

/// All occurrences of each forbidden token.
pub fn find_forbidden(text: &str, tokens: &[String]) -> Vec<TokenMatch> {
    let hay: String = text.nfc().collect::<String>().to_lowercase();
    let mut out = Vec::new();
    for token in tokens {
        let needle: String = token.nfc().collect::<String>().to_lowercase();
        if needle.is_empty() {
            continue;
        }
        for (byte, _) in hay.match_indices(&needle) {
            out.push(TokenMatch {
                token: token.clone(),
                char_offset: hay[..byte].chars().count(),
            });
        }
    }
    out
}

/// Checks text and traceability against a constraint set.
pub fn check_text(text: &str, traced: usize, constraints: &ConstraintSet) -> ConstraintReport {
    let len = char_count(text);
    let mut checks = vec![ConstraintCheck {
        constraint: ConstraintKind::MaxChars,
        passed: len <= constraints.max_chars,
        detail: (len > constraints.max_chars)
            .then(|| format!("{len} characters, limit {}", constraints.max_chars)),
        matches: Vec::new(),
    }];
    let found = find_forbidden(text, &constraints.forbidden_tokens);
    checks.push(ConstraintCheck {
        constraint: ConstraintKind::ForbiddenTokens,
        passed: found.is_empty(),
        detail: found.first().map(|m| format!("`{}` at character {}", m.token, m.char_offset)),
        matches: found,
    });
    let prefix_ok = Regex::new(&constraints.required_prefix_pattern)
        .map(|re| re.find(text).is_some_and(|m| m.start() == 0))
        .unwrap_or(false);
    checks.push(ConstraintCheck {
        constraint: ConstraintKind::RequiredPrefix,
        passed: prefix_ok,
        detail: (!prefix_ok).then(|| "text does not open with a provider attribution".to_string()),
        matches: Vec::new(),
    });
    checks.push(ConstraintCheck {
        constraint: ConstraintKind::MinClaimsTraced,
        passed: traced >= constraints.min_claims_traced,
        detail: (traced < constraints.min_claims_traced)
            .then(|| format!("{traced} claims traced, need {}", constraints.min_claims_traced)),
        matches: Vec::new(),
    });
    ConstraintReport { checks }
}

pub fn check_constraints(c: &MessageCandidate, constraints: &ConstraintSet) -> ConstraintReport {
    check_text(&c.text, c.traced_claims.len(), constraints)
}

// ---------------------------------------------------------------------------
// Design rules

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextAxis {
    MedicalUrgency,
    AgeCategory,
    ConditionType,
    Geography,
}

impl ContextAxis {
    pub const ALL: [ContextAxis; 4] = [
        ContextAxis::MedicalUrgency,
        ContextAxis::AgeCategory,
        ContextAxis::ConditionType,
        ContextAxis::Geography,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Register {
    Formal,
    ActionOriented,
    PersonalHealth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinationRule {
    pub tags_combined: BTreeSet<StrategyTag>,
    pub rationale_ref: String,
    /// Reported elsewhere and stored as metadata only; never recomputed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reported_effect: Option<String>,
}

fn default_hierarchy() -> Vec<ContextAxis> {
    ContextAxis::ALL.to_vec()
}

fn default_combinations() -> Vec<CombinationRule> {
    vec![CombinationRule {
        tags_combined: [StrategyTag::Authority, StrategyTag::TaskCompletion].into_iter().collect(),
        rationale_ref: "authority attribution first, then a clear task-completion action".into(),
        reported_effect: Some("1.7x over single-strategy messages, 95% CI [1.4, 2.1]".into()),
    }]
}

fn default_linguistic_map() -> BTreeMap<String, Register> {
    [
        ("18-44".to_string(), Register::PersonalHealth),
        ("45-64".to_string(), Register::ActionOriented),
        ("65+".to_string(), Register::Formal),
    ]
    .into_iter()
    .collect()
}

fn default_register() -> Register {
    Register::ActionOriented
}

fn default_provider() -> String {
    DEFAULT_PROVIDER.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignRuleConfig {
    #[serde(default = "default_hierarchy")]
    pub context_hierarchy: Vec<ContextAxis>,
    #[serde(default = "default_combinations")]
    pub combination_rules: Vec<CombinationRule>,
    /// Age band label to register.
    #[serde(default = "default_linguistic_map")]
    pub linguistic_map: BTreeMap<String, Register>,
    /// Register when the target segment names no age band.
    #[serde(default = "default_register")]
    pub default_register: Register,
    #[serde(default = "default_provider")]
    pub provider: String,
}

impl Default for DesignRuleConfig {
    fn default() -> Self {
        Self {
            context_hierarchy: default_hierarchy(),
            combination_rules: default_combinations(),
            linguistic_map: default_linguistic_map(),
            default_register: default_register(),
            provider: default_provider(),
        }
    }
}

impl DesignRuleConfig {
    pub fn validate(&self) -> Result<(), WisdomError> {
        let got: BTreeSet<ContextAxis> = self.context_hierarchy.iter().copied().collect();
        if self.context_hierarchy.len() != ContextAxis::ALL.len() || got.len() != ContextAxis::ALL.len() {
            return Err(WisdomError::InvalidConfig(
                "context_hierarchy must be a permutation of the four context axes".into(),
            ));
        }
        if self.provider.trim().is_empty() {
            return Err(WisdomError::InvalidConfig("provider is empty".into()));
        }
        Ok(())
    }

    /// Register for a target segment: the first age band named in its
    /// population predicates, looked up in the linguistic map.
    pub fn register_for(&self, segment: &TargetSegment) -> Register {
        let TargetSegment::Segment(ctx) = segment else {
            return self.default_register;
        };
        for axis in &self.context_hierarchy {
            if *axis != ContextAxis::AgeCategory {
                continue;
            }
            for p in &ctx.population {
                if p.column != "age_band" || p.op != PredicateOp::Eq {
                    continue;
                }
                if let Some(PredicateValue::One(Scalar::Text(band))) = &p.value {
                    if let Some(r) = self.linguistic_map.get(band) {
                        return *r;
                    }
                }
            }
        }
        self.default_register
    }
}

// ---------------------------------------------------------------------------
// Template grammar

/// Framing clauses per strategy tag. None contains a forbidden token.
fn clauses(tag: StrategyTag) -> &'static [&'static str] {
    use StrategyTag::*;
    match tag {
        TaskCompletion => &["Final step from your visit", "Complete your visit", "One task left from your visit"],
        Urgency => &["New Rx info ready today", "NEW Rx just sent", "Prescription update for today"],
        Efficiency => &["Quick Rx check", "New Rx info needs quick review", "Short prescription check"],
        Clarity => &["New prescription details", "Your prescription summary", "Clear Rx details inside"],
        Progress => &["You are one step from done", "Almost done with your visit", "Next step in your care"],
        Personalization => &["Your new prescription", "Prescription prepared for you", "Your personal Rx details"],
        Reciprocity => &["Prescription prepared for you - thank you", "Your Rx is ready, thank you", "We prepared your Rx"],
        Commitment => &["Ready to check your Rx", "Plan a minute for your Rx", "Your Rx is set for review"],
        GainFraming => &["Better health starts with your Rx", "Stay on track with your Rx", "Get the most from your Rx"],
        SocialProof => &["Most patients check their Rx", "Patients like you review their Rx", "Many patients find this useful"],
        Identity => &["As a valued patient", "For our patients", "As part of your care team"],
        Emotion => &["Your health matters", "We care about your health", "Your wellbeing comes first"],
        FutureSelf => &["Your future self will thank you", "Invest in your future health", "Good for your future health"],
        Authority => &["New prescription details", "Prescription from your provider", "Your provider sent an Rx"],
        Default => &["Your prescription", "Prescription details", "Your Rx details"],
    }
}

fn calls_to_action(register: Register) -> &'static [&'static str] {
    match register {
        Register::Formal => &[
            "please review your prescription",
            "please review the details",
            "kindly review your prescription",
            "please review below",
        ],
        Register::ActionOriented => &[
            "review prescription",
            "review now",
            "tap below to review",
            "review your Rx",
        ],
        Register::PersonalHealth => &[
            "review your Rx for your health",
            "review your Rx",
            "see your Rx details",
            "review when you can",
        ],
    }
}

const CLAUSE_PRIORITY: [StrategyTag; 15] = [
    StrategyTag::TaskCompletion,
    StrategyTag::Urgency,
    StrategyTag::Efficiency,
    StrategyTag::Clarity,
    StrategyTag::Progress,
    StrategyTag::Personalization,
    StrategyTag::Reciprocity,
    StrategyTag::Commitment,
    StrategyTag::GainFraming,
    StrategyTag::SocialProof,
    StrategyTag::Identity,
    StrategyTag::Emotion,
    StrategyTag::FutureSelf,
    StrategyTag::Authority,
    StrategyTag::Default,
];

fn attribution(provider: &str, register: Register) -> String {
    match register {
        Register::PersonalHealth => format!("Hi, it's {provider}'s office"),
        Register::Formal | Register::ActionOriented => provider.to_string(),
    }
}

/// Parses tag names, rejecting unknown ones.
pub fn parse_tags(names: &[&str]) -> Result<BTreeSet<StrategyTag>, WisdomError> {
    names
        .iter()
        .map(|n| n.parse::<StrategyTag>().map_err(|_| WisdomError::UnknownTag(n.to_string())))
        .collect()
}

/// Deterministic message text: attribution, a framing clause chosen by the
/// tags, then a call to action in the register. `seed` picks among the
/// grammar's alternatives.
pub fn template_fallback(
    tags: &BTreeSet<StrategyTag>,
    rules: &DesignRuleConfig,
    register: Register,
    seed: u64,
) -> Result<String, WisdomError> {
    if tags.is_empty() {
        return Err(WisdomError::EmptyTags);
    }
    let ranked: Vec<StrategyTag> = CLAUSE_PRIORITY.iter().copied().filter(|t| tags.contains(t)).collect();
    let seed = seed as usize;
    let primary = ranked[seed % ranked.len()];
    let options = clauses(primary);
    let rest = seed / ranked.len();
    let clause = options[rest % options.len()];
    let ctas = calls_to_action(register);
    let cta = ctas[(rest / options.len()) % ctas.len()];
    Ok(format!("{}: {clause} - {cta}", attribution(&rules.provider, register)))
}

// ---------------------------------------------------------------------------
// Portfolio

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateGeneration {
    Exploitation,
    Exploration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageCandidate {
    pub name: String,
    pub text: String,
    pub char_count: usize,
    pub strategy_tags: BTreeSet<StrategyTag>,
    pub generation: CandidateGeneration,
    pub traced_claims: Vec<TopicId>,
    pub rationale: String,
    /// Sum of traced support scores. A display ordering only, not a
    /// performance prediction.
    pub predicted_rank_basis: f64,
    pub constraint_report: ConstraintReport,
    #[serde(default)]
    pub rejected_by_review: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedClaim {
    pub id: TopicId,
    pub hypothesis: String,
    pub support_score: f64,
    pub confidence_band: ConfidenceBand,
    pub modes: Vec<CandidateGeneration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shortfall {
    pub exploitation_missing: usize,
    pub exploration_missing: usize,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioPayload {
    pub topic: WisdomTopic,
    pub register: Register,
    pub selected_claims: Vec<SelectedClaim>,
    /// Design rules and other non-dataset knowledge applied.
    pub open_knowledge: Vec<String>,
    pub candidates: Vec<MessageCandidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shortfall: Option<Shortfall>,
}

impl PortfolioPayload {
    pub fn count(&self, g: CandidateGeneration) -> usize {
        self.candidates.iter().filter(|c| c.generation == g).count()
    }

    pub fn active(&self) -> impl Iterator<Item = &MessageCandidate> {
        self.candidates.iter().filter(|c| !c.rejected_by_review)
    }
}

/// Tags a claim argues for: the winning side of a directional relation.
pub fn favoured_tags(claim: &KnowledgeClaim, catalog: &MessageCatalog) -> BTreeSet<StrategyTag> {
    let h = &claim.topic.claim;
    let side = match h.relation {
        Relation::Outperforms | Relation::Increases => &h.left,
        Relation::Decreases => &h.right,
        Relation::NoEffect => return BTreeSet::new(),
    };
    match side {
        Descriptor::Tag { tag } => [*tag].into_iter().collect(),
        Descriptor::Variant { name } => catalog.get(name).map(|e| e.strategy_tags.clone()).unwrap_or_default(),
        Descriptor::Segment { .. } => BTreeSet::new(),
    }
}

fn is_novel(claim: &KnowledgeClaim, catalog: &MessageCatalog) -> bool {
    let mut tags = favoured_tags(claim, catalog);
    if tags.is_empty() {
        return false;
    }
    tags.insert(StrategyTag::Authority);
    !catalog.has_tag_set(&tags)
}

/// Eligible claims for a mode, by descending support then ascending id.
pub fn select_claims<'a>(
    claims: &'a [(TopicId, KnowledgeClaim)],
    mode: CandidateGeneration,
    catalog: &MessageCatalog,
) -> Vec<&'a (TopicId, KnowledgeClaim)> {
    let mut out: Vec<&(TopicId, KnowledgeClaim)> = claims
        .iter()
        .filter(|(_, c)| match mode {
            CandidateGeneration::Exploitation => c.confidence_band == ConfidenceBand::High,
            CandidateGeneration::Exploration => c.confidence_band != ConfidenceBand::High || is_novel(c, catalog),
        })
        .collect();
    out.sort_by(|(ia, a), (ib, b)| {
        b.support_score
            .total_cmp(&a.support_score)
            .then_with(|| ia.hash.cmp(&ib.hash))
    });
    out
}

/// Where candidate text comes from.
#[derive(Clone, Copy)]
pub enum TextSource<'a> {
    Template,
    Llm(&'a LlmAdapter),
}

#[derive(Debug, Clone)]
pub struct PortfolioOutcome {
    pub payload: PortfolioPayload,
    pub exchange_ids: Vec<String>,
}

struct Slot<'a> {
    index: usize,
    /// Earlier slots sharing this tag set; offsets the template seed.
    variant: usize,
    generation: CandidateGeneration,
    traced: Vec<&'a (TopicId, KnowledgeClaim)>,
    tags: BTreeSet<StrategyTag>,
}

struct Draft {
    text: String,
    rationale: String,
    exchange_ids: Vec<String>,
}

/// Claims traced by the `i`-th slot of a mode: 2, 3 or 4 claims in turn,
/// rotating through the pool.
fn traced_for(i: usize, pool_len: usize) -> Vec<usize> {
    let k = pool_len.min(2 + i % 3);
    (0..k).map(|j| (i + j) % pool_len).collect()
}

fn draft_text(
    slot: &Slot<'_>,
    topic: &WisdomTopic,
    register: Register,
    seed: u64,
    previous_failure: Option<&str>,
    source: TextSource<'_>,
) -> Result<Draft, WisdomError> {
    let template = template_fallback(&slot.tags, &topic.rules, register, seed)?;
    let claims: Vec<String> = slot
        .traced
        .iter()
        .map(|(id, c)| format!("{} (support {:.3})", c.topic.claim, c.support_score).replace(&id.hash, id.short()))
        .collect();
    let mut rationale = format!(
        "{:?} message built on {}",
        slot.generation,
        claims.join("; ")
    );
    for rule in &topic.rules.combination_rules {
        if rule.tags_combined.is_subset(&slot.tags) {
            let _ = write!(rationale, "; combines {}", rule.rationale_ref);
        }
    }
    match source {
        TextSource::Template => Ok(Draft {
            text: template,
            rationale,
            exchange_ids: Vec::new(),
        }),
        TextSource::Llm(llm) => {
            let tags: Vec<&str> = slot.tags.iter().map(|t| t.as_str()).collect();
            let mut content = format!(
                "Objective: {}\nMode: {:?}\nRegister: {:?}\nStrategy tags: {}\nKnowledge claims:\n",
                topic.objective,
                slot.generation,
                register,
                tags.join(", ")
            );
            for c in &claims {
                let _ = writeln!(content, "- {c}");
            }
            let _ = writeln!(
                content,
                "Constraints: at most {} characters; open with the provider attribution; avoid: {}.",
                topic.constraints.max_chars,
                topic.constraints.forbidden_tokens.join(", ")
            );
            let _ = writeln!(content, "Draft: {template}");
            if let Some(f) = previous_failure {
                let _ = writeln!(content, "The previous draft failed: {f}");
            }
            content.push_str("Reply with JSON {\"text\": string, \"rationale\": string}.");
            let c = llm.complete_validated(&LlmRequest::new(Layer::Wisdom, content, template))?;
            let json = c.json.unwrap_or_default();
            let text = json.get("text").and_then(|v| v.as_str()).unwrap_or_default().trim().to_string();
            if let Some(r) = json.get("rationale").and_then(|v| v.as_str()) {
                let _ = write!(rationale, ". {r}");
            }
            Ok(Draft {
                text,
                rationale,
                exchange_ids: c.exchange_ids,
            })
        }
    }
}

/// First seed at or after `start` whose template draft is not taken yet,
/// or `start` itself when the grammar is exhausted.
fn unused_seed(
    slot: &Slot<'_>,
    topic: &WisdomTopic,
    register: Register,
    start: u64,
    seen: &BTreeSet<String>,
) -> Result<u64, WisdomError> {
    let space = (CLAUSE_PRIORITY.len() * 3 * 4) as u64;
    for seed in start..start + space {
        if !seen.contains(&template_fallback(&slot.tags, &topic.rules, register, seed)?) {
            return Ok(seed);
        }
    }
    Ok(start)
}

/// Builds the portfolio. Slots whose drafts keep failing the constraints
/// after the retry budget are dropped and reported in `shortfall`.
pub fn generate_portfolio(
    claims: &[(TopicId, KnowledgeClaim)],
    topic: &WisdomTopic,
    catalog: &MessageCatalog,
    source: TextSource<'_>,
) -> Result<PortfolioOutcome, WisdomError> {
    topic.validate()?;
    let size = topic.portfolio_size as usize;
    let n_exploit = ((size as f64) * topic.exploitation_fraction).round() as usize;
    let quotas = [
        (CandidateGeneration::Exploitation, n_exploit.min(size)),
        (CandidateGeneration::Exploration, size - n_exploit.min(size)),
    ];
    let register = topic.rules.register_for(&topic.target_segment);
    let mut slots: Vec<Slot<'_>> = Vec::new();
    let mut selected: BTreeMap<TopicId, SelectedClaim> = BTreeMap::new();
    for (mode, quota) in quotas {
        let pool = select_claims(claims, mode, catalog);
        if quota > 0 && (pool.is_empty() || pool.len() < topic.constraints.min_claims_traced) {
            return Err(WisdomError::InsufficientClaims(mode));
        }
        for (id, c) in &pool {
            selected
                .entry(id.clone())
                .or_insert_with(|| SelectedClaim {
                    id: id.clone(),
                    hypothesis: c.topic.claim.to_string(),
                    support_score: c.support_score,
                    confidence_band: c.confidence_band,
                    modes: Vec::new(),
                })
                .modes
                .push(mode);
        }
        for i in 0..quota {
            let traced: Vec<_> = traced_for(i, pool.len()).into_iter().map(|j| pool[j]).collect();
            let mut tags: BTreeSet<StrategyTag> = traced.iter().flat_map(|(_, c)| favoured_tags(c, catalog)).collect();
            tags.insert(StrategyTag::Authority);
            let variant = slots.iter().filter(|s| s.tags == tags).count();
            slots.push(Slot {
                index: slots.len(),
                variant,
                generation: mode,
                traced,
                tags,
            });
        }
    }
    // First drafts in parallel; retries and de-duplication at the join.
    let first: Vec<Result<Draft, WisdomError>> = slots
        .par_iter()
        .map(|s| draft_text(s, topic, register, s.variant as u64, None, source))
        .collect();
    let mut candidates = Vec::new();
    let mut exchange_ids = Vec::new();
    let mut seen_text: BTreeSet<String> = BTreeSet::new();
    let mut shortfall = Shortfall {
        exploitation_missing: 0,
        exploration_missing: 0,
        reasons: Vec::new(),
    };
    let mut counters: BTreeMap<CandidateGeneration, usize> = BTreeMap::new();
    for (slot, first) in slots.iter().zip(first) {
        let mut draft = Some(first?);
        let mut accepted = None;
        let mut last_failure = String::new();
        for attempt in 0..RETRY_BUDGET {
            let d = match draft.take() {
                Some(d) => d,
                None => {
                    let start = (slot.variant + attempt * topic.portfolio_size as usize) as u64;
                    let seed = unused_seed(slot, topic, register, start, &seen_text)?;
                    draft_text(slot, topic, register, seed, Some(&last_failure), source)?
                }
            };
            exchange_ids.extend(d.exchange_ids.iter().cloned());
            let report = check_text(&d.text, slot.traced.len(), &topic.constraints);
            if !report.passed() {
                last_failure = report.failures().join("; ");
            } else if seen_text.contains(&d.text) {
                last_failure = "duplicates an earlier candidate".to_string();
            } else {
                accepted = Some((d, report));
                break;
            }
        }
        let Some((d, report)) = accepted else {
            match slot.generation {
                CandidateGeneration::Exploitation => shortfall.exploitation_missing += 1,
                CandidateGeneration::Exploration => shortfall.exploration_missing += 1,
            }
            shortfall.reasons.push(format!(
                "slot {} ({:?}) dropped after {RETRY_BUDGET} attempts: {last_failure}",
                slot.index + 1,
                slot.generation
            ));
            continue;
        };
        seen_text.insert(d.text.clone());
        let n = counters.entry(slot.generation).or_insert(0);
        *n += 1;
        let prefix = match slot.generation {
            CandidateGeneration::Exploitation => "exploit",
            CandidateGeneration::Exploration => "explore",
        };
        candidates.push(MessageCandidate {
            name: format!("{prefix}{:02}", *n),
            char_count: char_count(&d.text),
            text: d.text,
            strategy_tags: slot.tags.clone(),
            generation: slot.generation,
            traced_claims: slot.traced.iter().map(|(id, _)| id.clone()).collect(),
            rationale: d.rationale,
            predicted_rank_basis: slot.traced.iter().map(|(_, c)| c.support_score).sum(),
            constraint_report: report,
            rejected_by_review: false,
        });
    }
    let shortfall = (shortfall.exploitation_missing + shortfall.exploration_missing > 0).then_some(shortfall);
    Ok(PortfolioOutcome {
        payload: PortfolioPayload {
            topic: topic.clone(),
            register,
            selected_claims: selected.into_values().collect(),
            open_knowledge: open_knowledge(&topic.rules, register),
            candidates,
            shortfall,
        },
        exchange_ids,
    })
}

fn open_knowledge(rules: &DesignRuleConfig, register: Register) -> Vec<String> {
    let hierarchy: Vec<String> = rules
        .context_hierarchy
        .iter()
        .map(|a| serde_json::to_value(a).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())
        .collect();
    let mut out = vec![format!("context hierarchy: {}", hierarchy.join(" > "))];
    for r in &rules.combination_rules {
        let tags: Vec<&str> = r.tags_combined.iter().map(|t| t.as_str()).collect();
        let mut line = format!("combination {}: {}", tags.join(" + "), r.rationale_ref);
        if let Some(e) = &r.reported_effect {
            let _ = write!(line, " (reported {e}; not recomputed)");
        }
        out.push(line);
    }
    out.push(format!("linguistic register: {register:?}"));
    out
}

/// Plain-text report of a portfolio.
pub fn render_report(p: &PortfolioPayload) -> String {
    let mut lines = vec![
        format!("Objective: {}", p.topic.objective),
        format!(
            "Portfolio: {} exploitation and {} exploration candidates of {} requested; register {:?}.",
            p.count(CandidateGeneration::Exploitation),
            p.count(CandidateGeneration::Exploration),
            p.topic.portfolio_size,
            p.register
        ),
    ];
    for c in &p.selected_claims {
        lines.push(format!(
            "Claim {} ({}, {:.4}): {}",
            c.id.short(),
            c.confidence_band,
            c.support_score,
            c.hypothesis
        ));
    }
    for k in &p.open_knowledge {
        lines.push(format!("Rule: {k}"));
    }
    for c in &p.candidates {
        lines.push(format!("{} [{:?}, {} chars]: {}", c.name, c.generation, c.char_count, c.text));
    }
    if let Some(s) = &p.shortfall {
        lines.push(format!(
            "Shortfall: {} exploitation and {} exploration slots unfilled.",
            s.exploitation_missing, s.exploration_missing
        ));
        lines.extend(s.reasons.iter().cloned());
    }
    lines.join("\n")
}

fn md_cell(s: &str) -> String {
    s.replace('|', "\\|").replace('\n', " ")
}

/// Markdown table in the catalog's layout.
pub fn portfolio_markdown(p: &PortfolioPayload) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Message portfolio\n");
    let _ = writeln!(out, "Objective: {}\n", md_cell(&p.topic.objective));
    let _ = writeln!(
        out,
        "Active candidates: {} of {}\n",
        p.active().count(),
        p.candidates.len()
    );
    let _ = writeln!(out, "| # | Name | Generation | Message | Chars | Rationale | Traced claims | Status |");
    let _ = writeln!(out, "|---|---|---|---|---|---|---|---|");
    for (i, c) in p.candidates.iter().enumerate() {
        let traced: Vec<&str> = c.traced_claims.iter().map(|t| t.short()).collect();
        let generation = match c.generation {
            CandidateGeneration::Exploitation => "Exploitation",
            CandidateGeneration::Exploration => "Exploration",
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | \"{}\" | {} | {} | {} | {} |",
            i + 1,
            md_cell(&c.name),
            generation,
            md_cell(&c.text),
            c.char_count,
            md_cell(&c.rationale),
            traced.join(", "),
            if c.rejected_by_review { "rejected" } else { "active" }
        );
    }
    if let Some(s) = &p.shortfall {
        let _ = writeln!(
            out,
            "\nShortfall: {} exploitation, {} exploration.",
            s.exploitation_missing, s.exploration_missing
        );
    }
    out
}

/// Resolves a wisdom topic into an artifact.
pub fn resolve_wisdom_topic(
    topic: &WisdomTopic,
    claims: &[(TopicId, KnowledgeClaim)],
    catalog: &MessageCatalog,
    source: TextSource<'_>,
    dataset_fingerprint: &str,
    created_at: DateTime<Utc>,
) -> Result<Artifact, WisdomError> {
    let id = canonical_hash(&Topic::Wisdom(topic.clone()))?;
    let outcome = generate_portfolio(claims, topic, catalog, source)?;
    let report = render_report(&outcome.payload);
    let mut prov = Provenance::new(dataset_fingerprint);
    prov.input_artifact_ids = outcome.payload.selected_claims.iter().map(|c| c.id.clone()).collect();
    prov.llm_exchange_ids = outcome.exchange_ids;
    Ok(Artifact::new(id, Payload::Wisdom(outcome.payload), report, prov, created_at))
}
