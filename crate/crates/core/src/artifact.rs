//! Artifacts: the stored output of a resolved topic, with provenance.

use std::collections::HashMap;
use std::fmt;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::data_agent::DataReportPayload;
use crate::info_agent::StatResult;
use crate::knowledge::KnowledgeClaim;
use crate::topic::{Layer, TopicId};
use crate::wisdom::PortfolioPayload;

/// Bumped on breaking changes to the artifact file layout.
pub const ARTIFACT_FORMAT_VERSION: u32 = 1;

pub const AGENT_VERSION: &str = concat!("dikw-core/", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewKind {
    Approve,
    Reject,
    Edit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanAction {
    pub actor: String,
    pub action: ReviewKind,
    pub timestamp: DateTime<Utc>,
    #[serde(default)]
    pub comment: String,
    /// Portfolio candidate the action applies to, for message-level review.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub input_artifact_ids: Vec<TopicId>,
    pub dataset_fingerprint: String,
    pub agent_version: String,
    #[serde(default)]
    pub llm_exchange_ids: Vec<String>,
    #[serde(default)]
    pub human_actions: Vec<HumanAction>,
}

impl Provenance {
    pub fn new(dataset_fingerprint: &str) -> Self {
        Self {
            input_artifact_ids: Vec::new(),
            dataset_fingerprint: dataset_fingerprint.to_string(),
            agent_version: AGENT_VERSION.to_string(),
            llm_exchange_ids: Vec::new(),
            human_actions: Vec::new(),
        }
    }
}

/// Layer-tagged machine-readable output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layer", content = "body", rename_all = "snake_case")]
pub enum Payload {
    Data(DataReportPayload),
    Information(StatResult),
    Knowledge(KnowledgeClaim),
    Wisdom(PortfolioPayload),
}

impl Payload {
    pub fn layer(&self) -> Layer {
        match self {
            Payload::Data(_) => Layer::Data,
            Payload::Information(_) => Layer::Information,
            Payload::Knowledge(_) => Layer::Knowledge,
            Payload::Wisdom(_) => Layer::Wisdom,
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            Payload::Wisdom(p) => p.candidates.is_empty() && p.shortfall.is_none(),
            _ => false,
        }
    }

    pub fn digest(&self) -> String {
        canonical::digest_of(self).expect("payload serializes")
    }
}

fn serialize_ts<S: serde::Serializer>(ts: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&ts.to_rfc3339_opts(SecondsFormat::AutoSi, true))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub format_version: u32,
    pub digest_algorithm: String,
    pub topic_id: TopicId,
    pub payload: Payload,
    pub report: String,
    pub provenance: Provenance,
    #[serde(serialize_with = "serialize_ts")]
    pub created_at: DateTime<Utc>,
}

impl Artifact {
    pub fn new(
        topic_id: TopicId,
        payload: Payload,
        report: String,
        provenance: Provenance,
        created_at: DateTime<Utc>,
    ) -> Self {
        Self {
            format_version: ARTIFACT_FORMAT_VERSION,
            digest_algorithm: canonical::DIGEST_ALGORITHM.to_string(),
            topic_id,
            payload,
            report,
            provenance,
            created_at,
        }
    }

    /// Canonical JSON bytes with a trailing newline, as written to disk.
    pub fn to_canonical_bytes(&self) -> Vec<u8> {
        let mut bytes = canonical::to_canonical_bytes(self).expect("artifact serializes");
        bytes.push(b'\n');
        bytes
    }
}

/// Read access to resolved artifacts.
pub trait ArtifactLookup {
    fn get_artifact(&self, id: &TopicId) -> Option<Artifact>;

    fn contains_artifact(&self, id: &TopicId) -> bool {
        self.get_artifact(id).is_some()
    }
}

impl ArtifactLookup for HashMap<TopicId, Artifact> {
    fn get_artifact(&self, id: &TopicId) -> Option<Artifact> {
        self.get(id).cloned()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyReport,
    EmptyPayload,
    LayerMismatch { topic: Layer, payload: Layer },
    DanglingProvenance(TopicId),
    HigherLayerInput(TopicId),
    UnsupportedVersion(u32),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyReport => f.write_str("empty report"),
            Violation::EmptyPayload => f.write_str("empty payload"),
            Violation::LayerMismatch { topic, payload } => {
                write!(f, "layer mismatch: topic is {topic}, payload is {payload}")
            }
            Violation::DanglingProvenance(id) => write!(f, "dangling provenance: {id}"),
            Violation::HigherLayerInput(id) => write!(f, "input from a higher layer: {id}"),
            Violation::UnsupportedVersion(v) => write!(f, "unsupported format version {v}"),
        }
    }
}

/// Checks an artifact's invariants against a store. Total: returns every
/// violation found rather than stopping at the first.
pub fn validate_artifact(a: &Artifact, store: &dyn ArtifactLookup) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    if a.format_version != ARTIFACT_FORMAT_VERSION {
        v.push(Violation::UnsupportedVersion(a.format_version));
    }
    if a.report.trim().is_empty() {
        v.push(Violation::EmptyReport);
    }
    if a.payload.is_empty() {
        v.push(Violation::EmptyPayload);
    }
    if a.topic_id.layer != a.payload.layer() {
        v.push(Violation::LayerMismatch {
            topic: a.topic_id.layer,
            payload: a.payload.layer(),
        });
    }
    for id in &a.provenance.input_artifact_ids {
        if id.layer > a.topic_id.layer {
            v.push(Violation::HigherLayerInput(id.clone()));
        }
        if !store.contains_artifact(id) {
            v.push(Violation::DanglingProvenance(id.clone()));
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}
