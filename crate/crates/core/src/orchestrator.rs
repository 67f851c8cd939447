//! Runs: topic registration with downward expansion, gated execution,
//! review actions and crash-recoverable state under a workspace directory.
//!
//! Layout: `<root>/store/<fingerprint prefix>/<layer>/<hash>.json` and
//! `<root>/runs/<run-id>/{state.json,actions.log}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{Artifact, HumanAction, Payload, ReviewKind};
use crate::canonical::sha256_hex;
use crate::data_agent::resolve_data_topic;
use crate::dataset::{ingest, Dataset, DatasetError, MessageCatalog, SchemaDescriptor};
use crate::info_agent::resolve_info_topic;
use crate::knowledge::{evaluate_hypothesis, required_evidence, KnowledgeClaim, KnowledgeContext};
use crate::llm::{LlmAdapter, LlmConfig, LlmError, LlmMode};
use crate::scheduler::{check_acyclic, drive, GatePolicy, TopicState, TopicStatus, TraceEvent};
use crate::simulator::{generate, DemographicsMix, GroundTruthModel, SimulatorError};
use crate::store::{ArtifactStore, StoreError};
use crate::topic::{canonical_hash, DataTopic, DataTopicKind, Layer, Topic, TopicError, TopicId};
use crate::wisdom::{resolve_wisdom_topic, MessageCandidate, PortfolioPayload, Shortfall, TextSource};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Simulator(#[from] SimulatorError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Topic(#[from] TopicError),
    #[error("dependency cycle through {0}")]
    CycleDetected(TopicId),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path, source: std::io::Error) -> RunError {
    RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where a run's encounter table comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetRef {
    Csv {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        schema: Option<PathBuf>,
    },
    Simulated {
        model: GroundTruthModel,
        n: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mix: Option<DemographicsMix>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShippedCatalog {
    Stage1,
    Stage2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CatalogRef {
    Shipped(ShippedCatalog),
    File { path: PathBuf },
}

impl Default for CatalogRef {
    fn default() -> Self {
        CatalogRef::Shipped(ShippedCatalog::Stage1)
    }
}

impl CatalogRef {
    pub fn load(&self) -> Result<MessageCatalog, DatasetError> {
        match self {
            CatalogRef::Shipped(ShippedCatalog::Stage1) => Ok(MessageCatalog::stage1()),
            CatalogRef::Shipped(ShippedCatalog::Stage2) => Ok(MessageCatalog::stage2()),
            CatalogRef::File { path } => MessageCatalog::load(path),
        }
    }
}

fn default_parallelism() -> usize {
    4
}

fn default_mode() -> LlmMode {
    LlmMode::Canned
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetRef,
    #[serde(default)]
    pub catalog: CatalogRef,
    /// Seed topics at any layer; empty means the default plan.
    #[serde(default)]
    pub topics: Vec<Topic>,
    #[serde(default)]
    pub review_gates: GatePolicy,
    #[serde(default = "default_parallelism")]
    pub max_parallelism: usize,
    #[serde(default = "default_mode")]
    pub llm_mode: LlmMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cassette_dir: Option<PathBuf>,
    /// Timestamp for artifacts and actions. Canned and replay runs default
    /// to the Unix epoch so their output is reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clock: Option<DateTime<Utc>>,
}

impl RunConfig {
    pub fn new(dataset: DatasetRef, catalog: CatalogRef) -> Self {
        Self {
            dataset,
            catalog,
            topics: Vec::new(),
            review_gates: GatePolicy::default(),
            max_parallelism: default_parallelism(),
            llm_mode: default_mode(),
            cassette_dir: None,
            clock: None,
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if self.max_parallelism < 1 {
            return Err(RunError::InvalidConfig("max_parallelism must be >= 1".into()));
        }
        if let DatasetRef::Csv { path, .. } = &self.dataset {
            if !path.is_file() {
                return Err(RunError::InvalidConfig(format!("dataset {} does not exist", path.display())));
            }
        }
        if let DatasetRef::Simulated { n, .. } = &self.dataset {
            if *n == 0 {
                return Err(RunError::InvalidConfig("simulated n must be >= 1".into()));
            }
        }
        if let CatalogRef::File { path } = &self.catalog {
            if !path.is_file() {
                return Err(RunError::InvalidConfig(format!("catalog {} does not exist", path.display())));
            }
        }
        for t in &self.topics {
            t.validate()?;
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset, RunError> {
        let catalog = self.catalog.load()?;
        let table = match &self.dataset {
            DatasetRef::Csv { path, schema } => {
                let descriptor = match schema {
                    Some(p) => SchemaDescriptor::load(p)?,
                    None => SchemaDescriptor::default(),
                };
                ingest(path, &descriptor)?
            }
            DatasetRef::Simulated { model, n, mix } => {
                generate(model, *n, &mix.clone().unwrap_or_default(), &catalog)?
            }
        };
        Ok(Dataset::new(table, catalog)?)
    }

    fn llm(&self) -> Result<LlmAdapter, RunError> {
        let mut cfg = if self.llm_mode == LlmMode::Canned {
            LlmConfig::canned()
        } else {
            LlmConfig::from_env()?
        };
        cfg.mode = self.llm_mode;
        if self.cassette_dir.is_some() {
            cfg.cassette_dir = self.cassette_dir.clone();
        }
        let adapter = LlmAdapter::new(cfg)?;
        Ok(match self.fixed_clock() {
            Some(at) => adapter.with_clock(at),
            None => adapter,
        })
    }

    fn fixed_clock(&self) -> Option<DateTime<Utc>> {
        self.clock.or(match self.llm_mode {
            LlmMode::Canned | LlmMode::Replay => Some(DateTime::UNIX_EPOCH),
            LlmMode::Live | LlmMode::Record => None,
        })
    }
}

/// Root directory holding the shared store and the run directories.
#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, RunError> {
        let root = root.into();
        for d in ["runs", "store"] {
            let p = root.join(d);
            fs::create_dir_all(&p).map_err(|e| io_err(&p, e))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Store directory for one dataset fingerprint.
    pub fn store_dir(&self, fingerprint: &str) -> PathBuf {
        self.root.join("store").join(&fingerprint[..fingerprint.len().min(16)])
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    pub fn list_runs(&self) -> Result<Vec<String>, RunError> {
        let dir = self.root.join("runs");
        let mut out = Vec::new();
        for e in fs::read_dir(&dir).map_err(|e| io_err(&dir, e))? {
            let e = e.map_err(|e| io_err(&dir, e))?;
            if e.path().join(STATE_FILE).is_file() {
                out.push(e.file_name().to_string_lossy().to_string());
            }
        }
        out.sort();
        Ok(out)
    }

    /// Looks an artifact up by hash in every store under the workspace.
    pub fn find_artifact(&self, hash: &str) -> Result<Option<Artifact>, RunError> {
        if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Ok(None);
        }
        let stores = self.root.join("store");
        let mut dirs: Vec<PathBuf> = match fs::read_dir(&stores) {
            Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).collect(),
            Err(_) => return Ok(None),
        };
        dirs.sort();
        for d in dirs {
            for layer in Layer::ALL {
                let p = d.join(layer.as_str()).join(format!("{hash}.json"));
                if p.is_file() {
                    let bytes = fs::read(&p).map_err(|e| io_err(&p, e))?;
                    return Ok(Some(serde_json::from_slice(&bytes)?));
                }
            }
        }
        Ok(None)
    }

    /// Number of artifact files across all stores.
    pub fn artifact_count(&self) -> usize {
        let stores = self.root.join("store");
        let Ok(rd) = fs::read_dir(&stores) else { return 0 };
        rd.filter_map(|e| e.ok())
            .map(|d| {
                Layer::ALL
                    .iter()
                    .map(|l| {
                        fs::read_dir(d.path().join(l.as_str()))
                            .map(|r| {
                                r.filter_map(|e| e.ok())
                                    .filter(|e| e.file_name().to_string_lossy().ends_with(".json"))
                                    .count()
                            })
                            .unwrap_or(0)
                    })
                    .sum::<usize>()
            })
            .sum()
    }
}

pub const STATE_FILE: &str = "state.json";
pub const ACTIONS_FILE: &str = "actions.log";

/// Persisted run state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub config: RunConfig,
    pub dataset_fingerprint: String,
    pub topics: BTreeMap<TopicId, Topic>,
    pub states: BTreeMap<TopicId, TopicState>,
    /// Message-level review actions per wisdom topic and candidate name.
    #[serde(default)]
    pub candidate_reviews: BTreeMap<TopicId, BTreeMap<String, Vec<HumanAction>>>,
    #[serde(default)]
    pub executions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub run_id: String,
    pub dataset_fingerprint: String,
    pub counts: BTreeMap<TopicStatus, usize>,
    /// Every topic is Resolved, Failed or Rejected.
    pub complete: bool,
    pub executions: u64,
    pub topics: Vec<TopicState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRequest {
    pub action: ReviewKind,
    pub actor: String,
    #[serde(default)]
    pub comment: String,
    /// Portfolio candidate name, for message-level review of a resolved
    /// wisdom topic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<String>,
    /// Replacement topic body for an edit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_topic: Option<Topic>,
}

impl ReviewRequest {
    pub fn new(action: ReviewKind, actor: &str, comment: &str) -> Self {
        Self {
            action,
            actor: actor.to_string(),
            comment: comment.to_string(),
            candidate: None,
            edited_topic: None,
        }
    }

    pub fn for_candidate(mut self, name: &str) -> Self {
        self.candidate = Some(name.to_string());
        self
    }

    pub fn with_edit(mut self, topic: Topic) -> Self {
        self.edited_topic = Some(topic);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewOutcome {
    pub state: TopicState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_topic: Option<TopicState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<CandidateStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateStatus {
    pub name: String,
    pub rejected_by_review: bool,
}

#[derive(Serialize)]
struct ActionLogLine<'a> {
    run_id: &'a str,
    topic_id: &'a TopicId,
    #[serde(skip_serializing_if = "Option::is_none")]
    new_topic_id: Option<&'a TopicId>,
    action: &'a HumanAction,
}

/// Portfolio with review flags applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioExport {
    pub run_id: String,
    pub topic_id: TopicId,
    pub objective: String,
    pub active: usize,
    pub rejected: usize,
    pub candidates: Vec<MessageCandidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shortfall: Option<Shortfall>,
    pub review_actions: Vec<HumanAction>,
    #[serde(skip)]
    pub payload: Option<PortfolioPayload>,
}

static RUN_COUNTER: AtomicU64 = AtomicU64::new(0);

fn new_run_id(config: &RunConfig) -> String {
    let seed = format!(
        "{}|{}|{}|{}",
        serde_json::to_string(config).unwrap_or_default(),
        Utc::now().timestamp_nanos_opt().unwrap_or_default(),
        std::process::id(),
        RUN_COUNTER.fetch_add(1, Ordering::SeqCst)
    );
    format!("run-{}", &sha256_hex(seed.as_bytes())[..12])
}

#[derive(Clone)]
struct ExecInput {
    topic: Topic,
    deps: Vec<TopicId>,
    human_actions: Vec<HumanAction>,
}

pub struct Run {
    state: RunState,
    dir: PathBuf,
    dataset: Arc<Dataset>,
    evidence_catalog: MessageCatalog,
    store: Arc<ArtifactStore>,
    llm: Arc<LlmAdapter>,
    crash_after: Option<usize>,
}

impl std::fmt::Debug for Run {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Run").field("run_id", &self.state.run_id).finish_non_exhaustive()
    }
}

impl Run {
    /// Registers a run: loads the data, expands seeds downward and marks
    /// topics already in the store as Resolved.
    pub fn submit(ws: &Workspace, config: RunConfig) -> Result<Run, RunError> {
        config.validate()?;
        let dataset = Arc::new(config.load_dataset()?);
        let run_id = new_run_id(&config);
        let dir = ws.run_dir(&run_id);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let store = Arc::new(ArtifactStore::open(ws.store_dir(&dataset.fingerprint.digest))?);
        let llm = Arc::new(config.llm()?);
        let seeds = if config.topics.is_empty() {
            crate::plan::default_topics(&dataset.observed_catalog())
        } else {
            config.topics.clone()
        };
        let mut run = Run {
            state: RunState {
                run_id,
                config,
                dataset_fingerprint: dataset.fingerprint.digest.clone(),
                topics: BTreeMap::new(),
                states: BTreeMap::new(),
                candidate_reviews: BTreeMap::new(),
                executions: 0,
            },
            dir,
            evidence_catalog: dataset.observed_catalog(),
            dataset,
            store,
            llm,
            crash_after: None,
        };
        let mut knowledge_seeds = Vec::new();
        let mut wisdom_seeds = Vec::new();
        for t in seeds {
            let layer = t.layer();
            let id = run.register(t, None)?;
            match layer {
                Layer::Knowledge => knowledge_seeds.push(id),
                Layer::Wisdom => wisdom_seeds.push(id),
                _ => {}
            }
        }
        for w in wisdom_seeds {
            let s = run.state.states.get_mut(&w).expect("registered");
            if !s.cached {
                s.deps.extend(knowledge_seeds.iter().cloned());
            }
        }
        check_acyclic(&run.state.states).map_err(RunError::CycleDetected)?;
        run.persist()?;
        let log = run.dir.join(ACTIONS_FILE);
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log)
            .map_err(|e| io_err(&log, e))?;
        Ok(run)
    }

    /// Reopens a persisted run. Topics caught mid-execution return to Ready;
    /// the store already holds anything they managed to publish.
    pub fn open(ws: &Workspace, run_id: &str) -> Result<Run, RunError> {
        let dir = ws.run_dir(run_id);
        let path = dir.join(STATE_FILE);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(RunError::NotFound(format!("run {run_id}")));
            }
            Err(e) => return Err(io_err(&path, e)),
        };
        let mut state: RunState = serde_json::from_slice(&bytes)?;
        let dataset = Arc::new(state.config.load_dataset()?);
        if dataset.fingerprint.digest != state.dataset_fingerprint {
            return Err(RunError::InvalidState(format!(
                "dataset fingerprint changed since run {run_id} was submitted"
            )));
        }
        for s in state.states.values_mut() {
            if s.status == TopicStatus::Running {
                s.status = TopicStatus::Ready;
            }
        }
        let store = Arc::new(ArtifactStore::open(ws.store_dir(&state.dataset_fingerprint))?);
        let llm = Arc::new(state.config.llm()?);
        let run = Run {
            state,
            dir,
            evidence_catalog: dataset.observed_catalog(),
            dataset,
            store,
            llm,
            crash_after: None,
        };
        run.persist()?;
        Ok(run)
    }

    pub fn id(&self) -> &str {
        &self.state.run_id
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn store(&self) -> &ArtifactStore {
        &self.store
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Makes the next execution after `n` more publications panic, leaving
    /// state on disk as a killed process would.
    #[doc(hidden)]
    pub fn inject_crash_after(&mut self, n: usize) {
        self.crash_after = Some(n);
    }

    fn register(&mut self, topic: Topic, spawned_by: Option<TopicId>) -> Result<TopicId, RunError> {
        topic.validate()?;
        let id = canonical_hash(&topic)?;
        if self.state.states.contains_key(&id) {
            return Ok(id);
        }
        let mut st = TopicState::new(id.clone());
        st.summary = topic.summary();
        st.spawned_by = spawned_by;
        self.state.topics.insert(id.clone(), topic.clone());
        if self.store.contains(&id) {
            st.status = TopicStatus::Resolved;
            st.cached = true;
            self.state.states.insert(id.clone(), st);
            return Ok(id);
        }
        self.state.states.insert(id.clone(), st);
        let children: Vec<Topic> = match &topic {
            Topic::Data(_) | Topic::Wisdom(_) => Vec::new(),
            Topic::Information(_) => vec![Topic::Data(DataTopic::new(DataTopicKind::SchemaVerification))],
            Topic::Knowledge(k) => match required_evidence(k, &self.evidence_catalog) {
                Ok(v) => v.into_iter().map(Topic::Information).collect(),
                Err(e) => {
                    let s = self.state.states.get_mut(&id).expect("registered");
                    s.transition(TopicStatus::Failed).expect("pending to failed");
                    s.error = Some(e.to_string());
                    Vec::new()
                }
            },
        };
        for c in children {
            let cid = self.register(c, Some(id.clone()))?;
            self.state.states.get_mut(&id).expect("registered").deps.insert(cid);
        }
        Ok(id)
    }

    fn persist(&self) -> Result<(), RunError> {
        write_state(&self.dir, &self.state)
    }

    fn artifact_time(&self) -> DateTime<Utc> {
        self.state.config.fixed_clock().unwrap_or_else(Utc::now)
    }

    fn action_time(&self) -> DateTime<Utc> {
        self.state.config.clock.unwrap_or_else(Utc::now)
    }

    pub fn step(&mut self) -> Result<RunSnapshot, RunError> {
        self.step_traced().map(|(s, _)| s)
    }

    /// Drives every runnable topic to a terminal state and returns the
    /// scheduler's start/finish trace.
    pub fn step_traced(&mut self) -> Result<(RunSnapshot, Vec<TraceEvent>), RunError> {
        let inputs: BTreeMap<TopicId, ExecInput> = self
            .state
            .states
            .iter()
            .filter(|(_, s)| !s.status.is_terminal())
            .map(|(id, s)| {
                (
                    id.clone(),
                    ExecInput {
                        topic: self.state.topics[id].clone(),
                        deps: s.deps.iter().cloned().collect(),
                        human_actions: s.human_actions.clone(),
                    },
                )
            })
            .collect();
        let executed = Arc::new(AtomicUsize::new(0));
        let ctx = ExecContext {
            dataset: &self.dataset,
            evidence_catalog: &self.evidence_catalog,
            store: &self.store,
            llm: &self.llm,
            created_at: self.artifact_time(),
            executed: &executed,
            crash_after: self.crash_after,
        };
        let gates = self.state.config.review_gates;
        let max = self.state.config.max_parallelism;
        let dir = self.dir.clone();
        let mut persist_error = None;
        let mut snapshot_state = self.state.clone();
        let base_exec = self.state.executions;
        let trace = {
            let states = &mut self.state.states;
            let exec = |id: &TopicId| ctx.execute(id, &inputs[id]);
            drive(states, &gates, max, exec, &mut |s| {
                snapshot_state.states = s.clone();
                snapshot_state.executions = base_exec + executed.load(Ordering::SeqCst) as u64;
                if let Err(e) = write_state(&dir, &snapshot_state) {
                    persist_error.get_or_insert(e);
                }
            })
        };
        self.state.executions = base_exec + executed.load(Ordering::SeqCst) as u64;
        self.persist()?;
        if let Some(e) = persist_error {
            return Err(e);
        }
        Ok((self.snapshot(), trace))
    }

    pub fn snapshot(&self) -> RunSnapshot {
        let mut counts: BTreeMap<TopicStatus, usize> = BTreeMap::new();
        for s in self.state.states.values() {
            *counts.entry(s.status).or_default() += 1;
        }
        RunSnapshot {
            run_id: self.state.run_id.clone(),
            dataset_fingerprint: self.state.dataset_fingerprint.clone(),
            complete: self.state.states.values().all(|s| s.status.is_terminal()),
            executions: self.state.executions,
            counts,
            topics: self.state.states.values().cloned().collect(),
        }
    }

    pub fn topic_state(&self, id: &TopicId) -> Option<&TopicState> {
        self.state.states.get(id)
    }

    pub fn topics_with_status(&self, status: Option<TopicStatus>) -> Vec<TopicState> {
        self.state
            .states
            .values()
            .filter(|s| status.is_none_or(|st| s.status == st))
            .cloned()
            .collect()
    }

    /// Applies a human review action and records it in the action log.
    pub fn review(&mut self, id: &TopicId, req: ReviewRequest) -> Result<ReviewOutcome, RunError> {
        if req.actor.trim().is_empty() {
            return Err(RunError::InvalidConfig("actor is required".into()));
        }
        let Some(current) = self.state.states.get(id).cloned() else {
            return Err(RunError::NotFound(format!("topic {id} in run {}", self.state.run_id)));
        };
        let action = HumanAction {
            actor: req.actor.clone(),
            action: req.action,
            timestamp: self.action_time(),
            comment: req.comment.clone(),
            candidate: req.candidate.clone(),
        };
        if let Some(name) = &req.candidate {
            return self.review_candidate(&current, name, action);
        }
        if current.status != TopicStatus::AwaitingApproval {
            return Err(RunError::InvalidState(format!(
                "{id} is {:?}, not AwaitingApproval",
                current.status
            )));
        }
        let mut new_topic = None;
        match req.action {
            ReviewKind::Approve => {
                let s = self.state.states.get_mut(id).expect("present");
                s.transition(TopicStatus::Ready).map_err(|e| RunError::InvalidState(e.to_string()))?;
                s.human_actions.push(action.clone());
            }
            ReviewKind::Reject => {
                let s = self.state.states.get_mut(id).expect("present");
                s.transition(TopicStatus::Rejected).map_err(|e| RunError::InvalidState(e.to_string()))?;
                s.human_actions.push(action.clone());
            }
            ReviewKind::Edit => {
                let Some(body) = req.edited_topic.clone() else {
                    return Err(RunError::InvalidConfig("edit needs edited_topic".into()));
                };
                if body.layer() != id.layer {
                    return Err(RunError::InvalidConfig(format!(
                        "edited topic is a {} topic, expected {}",
                        body.layer(),
                        id.layer
                    )));
                }
                body.validate()?;
                let nid = canonical_hash(&body)?;
                if nid == *id {
                    return Err(RunError::InvalidConfig("edit leaves the topic unchanged".into()));
                }
                if self.state.states.contains_key(&nid) {
                    return Err(RunError::InvalidState(format!("{nid} is already registered")));
                }
                let spawned_by = current.spawned_by.clone();
                self.register(body, spawned_by)?;
                {
                    let n = self.state.states.get_mut(&nid).expect("registered");
                    n.edited_from = Some(id.clone());
                    n.human_actions.push(action.clone());
                }
                let old = self.state.states.get_mut(id).expect("present");
                old.transition(TopicStatus::Rejected).map_err(|e| RunError::InvalidState(e.to_string()))?;
                old.superseded_by = Some(nid.clone());
                for s in self.state.states.values_mut() {
                    if s.deps.remove(id) {
                        s.deps.insert(nid.clone());
                    }
                }
                check_acyclic(&self.state.states).map_err(RunError::CycleDetected)?;
                new_topic = Some(nid);
            }
        }
        self.append_action(id, new_topic.as_ref(), &action)?;
        self.persist()?;
        Ok(ReviewOutcome {
            state: self.state.states[id].clone(),
            new_topic: new_topic.map(|n| self.state.states[&n].clone()),
            candidate: None,
        })
    }

    fn review_candidate(
        &mut self,
        current: &TopicState,
        name: &str,
        action: HumanAction,
    ) -> Result<ReviewOutcome, RunError> {
        let id = &current.topic_id;
        if id.layer != Layer::Wisdom || current.status != TopicStatus::Resolved {
            return Err(RunError::InvalidState(format!(
                "message review needs a resolved wisdom topic; {id} is a {} topic in {:?}",
                id.layer, current.status
            )));
        }
        if action.action == ReviewKind::Edit {
            return Err(RunError::InvalidState("candidates can be rejected or restored, not edited".into()));
        }
        let payload = self.portfolio_payload(id)?;
        if !payload.candidates.iter().any(|c| c.name == name) {
            return Err(RunError::NotFound(format!("candidate {name} in {id}")));
        }
        self.state
            .candidate_reviews
            .entry(id.clone())
            .or_default()
            .entry(name.to_string())
            .or_default()
            .push(action.clone());
        self.append_action(id, None, &action)?;
        self.persist()?;
        Ok(ReviewOutcome {
            state: current.clone(),
            new_topic: None,
            candidate: Some(CandidateStatus {
                name: name.to_string(),
                rejected_by_review: action.action == ReviewKind::Reject,
            }),
        })
    }

    fn append_action(&self, id: &TopicId, new_topic: Option<&TopicId>, action: &HumanAction) -> Result<(), RunError> {
        let line = ActionLogLine {
            run_id: &self.state.run_id,
            topic_id: id,
            new_topic_id: new_topic,
            action,
        };
        let path = self.dir.join(ACTIONS_FILE);
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        let mut bytes = serde_json::to_vec(&line)?;
        bytes.push(b'\n');
        f.write_all(&bytes).map_err(|e| io_err(&path, e))?;
        Ok(())
    }

    /// Every line of the run's action log.
    pub fn action_log(&self) -> Result<Vec<serde_json::Value>, RunError> {
        let path = self.dir.join(ACTIONS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(RunError::from))
            .collect()
    }

    fn portfolio_payload(&self, id: &TopicId) -> Result<PortfolioPayload, RunError> {
        let artifact = self
            .store
            .get(id)?
            .ok_or_else(|| RunError::NotFound(format!("artifact {id}")))?;
        match &artifact.payload {
            Payload::Wisdom(p) => Ok(p.clone()),
            _ => Err(RunError::InvalidState(format!("{id} is not a wisdom artifact"))),
        }
    }

    /// The run's first resolved wisdom topic, with message-level review
    /// flags applied.
    pub fn portfolio(&self) -> Result<PortfolioExport, RunError> {
        let Some(id) = self
            .state
            .states
            .values()
            .find(|s| s.layer() == Layer::Wisdom && s.status == TopicStatus::Resolved)
            .map(|s| s.topic_id.clone())
        else {
            return Err(RunError::NotFound(format!(
                "run {} has no resolved wisdom topic",
                self.state.run_id
            )));
        };
        let mut payload = self.portfolio_payload(&id)?;
        let reviews = self.state.candidate_reviews.get(&id);
        let mut actions = Vec::new();
        for c in &mut payload.candidates {
            if let Some(list) = reviews.and_then(|r| r.get(&c.name)) {
                c.rejected_by_review = list.last().is_some_and(|a| a.action == ReviewKind::Reject);
            }
        }
        if let Some(r) = reviews {
            for list in r.values() {
                actions.extend(list.iter().cloned());
            }
        }
        actions.sort_by_key(|a| a.timestamp);
        let rejected = payload.candidates.iter().filter(|c| c.rejected_by_review).count();
        Ok(PortfolioExport {
            run_id: self.state.run_id.clone(),
            topic_id: id,
            objective: payload.topic.objective.clone(),
            active: payload.candidates.len() - rejected,
            rejected,
            candidates: payload.candidates.clone(),
            shortfall: payload.shortfall.clone(),
            review_actions: actions,
            payload: Some(payload),
        })
    }

    /// Steps, approving every gated topic as `actor`, until nothing is left
    /// to run.
    pub fn run_auto_approve(&mut self, actor: &str) -> Result<RunSnapshot, RunError> {
        loop {
            let snap = self.step()?;
            let waiting = self.topics_with_status(Some(TopicStatus::AwaitingApproval));
            if waiting.is_empty() {
                return Ok(snap);
            }
            for s in waiting {
                self.review(&s.topic_id, ReviewRequest::new(ReviewKind::Approve, actor, "auto-approved"))?;
            }
        }
    }
}

fn write_state(dir: &Path, state: &RunState) -> Result<(), RunError> {
    let path = dir.join(STATE_FILE);
    let tmp = dir.join(format!(".{STATE_FILE}.tmp"));
    let bytes = serde_json::to_vec_pretty(state)?;
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))?;
    Ok(())
}

struct ExecContext<'a> {
    dataset: &'a Dataset,
    evidence_catalog: &'a MessageCatalog,
    store: &'a ArtifactStore,
    llm: &'a LlmAdapter,
    created_at: DateTime<Utc>,
    executed: &'a AtomicUsize,
    crash_after: Option<usize>,
}

impl ExecContext<'_> {
    fn execute(&self, id: &TopicId, input: &ExecInput) -> Result<(), String> {
        if self.store.contains(id) {
            return Ok(());
        }
        let fp = &self.dataset.fingerprint.digest;
        let mut artifact = match &input.topic {
            Topic::Data(t) => resolve_data_topic(self.dataset, t, self.created_at).map_err(|e| e.to_string())?,
            Topic::Information(t) => {
                resolve_info_topic(self.dataset, &input.deps, t, self.created_at).map_err(|e| e.to_string())?
            }
            Topic::Knowledge(t) => {
                let ctx = KnowledgeContext {
                    catalog: self.evidence_catalog,
                    store: self.store,
                    llm: self.llm,
                    dataset_fingerprint: fp,
                    created_at: self.created_at,
                };
                let mut resolver = |t: &crate::topic::InfoTopic| -> Result<Artifact, String> {
                    Err(format!("evidence `{}` was not resolved before its claim", t.subject))
                };
                evaluate_hypothesis(t, &ctx, &mut resolver)
                    .map_err(|e| e.to_string())?
                    .artifact
            }
            Topic::Wisdom(t) => {
                let mut claims: Vec<(TopicId, KnowledgeClaim)> = Vec::new();
                let mut seen = BTreeSet::new();
                for d in &input.deps {
                    if !seen.insert(d.clone()) {
                        continue;
                    }
                    if let Some(a) = self.store.get(d).map_err(|e| e.to_string())? {
                        if let Payload::Knowledge(c) = &a.payload {
                            claims.push((d.clone(), c.clone()));
                        }
                    }
                }
                resolve_wisdom_topic(
                    t,
                    &claims,
                    &self.dataset.catalog,
                    TextSource::Llm(self.llm),
                    fp,
                    self.created_at,
                )
                .map_err(|e| e.to_string())?
            }
        };
        artifact.provenance.human_actions = input.human_actions.clone();
        self.store.publish(artifact).map_err(|e| e.to_string())?;
        let n = self.executed.fetch_add(1, Ordering::SeqCst) + 1;
        if self.crash_after.is_some_and(|limit| n >= limit) {
            panic!("injected crash after {n} publications");
        }
        Ok(())
    }
}
