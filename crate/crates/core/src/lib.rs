//! Layered experiment analysis: data checks, statistical facts, scored
//! hypotheses and a traceable message portfolio, coordinated as topics.

pub mod artifact;
pub mod canonical;
pub mod data_agent;
pub mod dataset;
pub mod info_agent;
pub mod knowledge;
pub mod llm;
pub mod orchestrator;
pub mod plan;
pub mod scheduler;
pub mod simulator;
pub mod stats;
pub mod store;
pub mod topic;
pub mod wisdom;

pub use artifact::{Artifact, HumanAction, Payload, Provenance, ReviewKind};
pub use dataset::{Dataset, EncounterTable, MessageCatalog, StrategyTag};
pub use info_agent::StatResult;
pub use knowledge::{ConfidenceBand, KnowledgeClaim};
pub use llm::{LlmAdapter, LlmMode};
pub use orchestrator::{CatalogRef, DatasetRef, ReviewRequest, Run, RunConfig, RunError, RunSnapshot, Workspace};
pub use scheduler::{GatePolicy, TopicState, TopicStatus};
pub use store::ArtifactStore;
pub use topic::{Layer, Topic, TopicId};
pub use wisdom::{MessageCandidate, PortfolioPayload};
