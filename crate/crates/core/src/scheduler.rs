//! Topic lifecycle states and the dependency-respecting executor.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::panic::{self, AssertUnwindSafe};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::HumanAction;
use crate::topic::{Layer, TopicId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TopicStatus {
    Pending,
    AwaitingApproval,
    Ready,
    Running,
    Resolved,
    Failed,
    Rejected,
}

impl TopicStatus {
    pub const ALL: [TopicStatus; 7] = [
        TopicStatus::Pending,
        TopicStatus::AwaitingApproval,
        TopicStatus::Ready,
        TopicStatus::Running,
        TopicStatus::Resolved,
        TopicStatus::Failed,
        TopicStatus::Rejected,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, TopicStatus::Resolved | TopicStatus::Failed | TopicStatus::Rejected)
    }

    /// Whether `self -> to` is an allowed transition. Pending may also fail
    /// directly when a dependency fails.
    pub fn can_transition(self, to: TopicStatus) -> bool {
        use TopicStatus::*;
        matches!(
            (self, to),
            (Pending, AwaitingApproval)
                | (Pending, Ready)
                | (Pending, Failed)
                | (AwaitingApproval, Ready)
                | (AwaitingApproval, Rejected)
                | (Ready, Running)
                | (Running, Resolved)
                | (Running, Failed)
        )
    }
}

impl std::str::FromStr for TopicStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TopicStatus::ALL
            .into_iter()
            .find(|t| format!("{t:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown status `{s}`"))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("illegal transition {from:?} -> {to:?} for {id}")]
pub struct TransitionError {
    pub id: TopicId,
    pub from: TopicStatus,
    pub to: TopicStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicState {
    pub topic_id: TopicId,
    pub status: TopicStatus,
    pub deps: BTreeSet<TopicId>,
    #[serde(default)]
    pub spawned_by: Option<TopicId>,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub summary: String,
    /// Resolved from the store at registration, without execution.
    #[serde(default)]
    pub cached: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub human_actions: Vec<HumanAction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superseded_by: Option<TopicId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_from: Option<TopicId>,
}

impl TopicState {
    pub fn new(topic_id: TopicId) -> Self {
        Self {
            topic_id,
            status: TopicStatus::Pending,
            deps: BTreeSet::new(),
            spawned_by: None,
            error: None,
            summary: String::new(),
            cached: false,
            human_actions: Vec::new(),
            superseded_by: None,
            edited_from: None,
        }
    }

    pub fn layer(&self) -> Layer {
        self.topic_id.layer
    }

    pub fn transition(&mut self, to: TopicStatus) -> Result<(), TransitionError> {
        if !self.status.can_transition(to) {
            return Err(TransitionError {
                id: self.topic_id.clone(),
                from: self.status,
                to,
            });
        }
        self.status = to;
        Ok(())
    }
}

/// Per-layer review gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatePolicy {
    #[serde(default)]
    pub data: bool,
    #[serde(default)]
    pub information: bool,
    #[serde(default = "yes")]
    pub knowledge: bool,
    #[serde(default = "yes")]
    pub wisdom: bool,
}

fn yes() -> bool {
    true
}

impl Default for GatePolicy {
    fn default() -> Self {
        Self {
            data: false,
            information: false,
            knowledge: true,
            wisdom: true,
        }
    }
}

impl GatePolicy {
    pub fn none() -> Self {
        Self {
            data: false,
            information: false,
            knowledge: false,
            wisdom: false,
        }
    }

    pub fn gated(&self, layer: Layer) -> bool {
        match layer {
            Layer::Data => self.data,
            Layer::Information => self.information,
            Layer::Knowledge => self.knowledge,
            Layer::Wisdom => self.wisdom,
        }
    }
}

/// Rejected dependencies are dropped rather than fatal for wisdom topics:
/// a rejected claim shrinks the pool.
fn tolerates_rejected(layer: Layer) -> bool {
    layer == Layer::Wisdom
}

fn failure_chain(dependent: Layer, dep: &TopicState) -> String {
    let cause = match dep.status {
        TopicStatus::Rejected => "rejected by review".to_string(),
        _ => dep.error.clone().unwrap_or_else(|| "failed".into()),
    };
    let prefix = if dependent == Layer::Knowledge && dep.layer() == Layer::Information {
        "EvidenceResolutionFailure"
    } else {
        "DependencyFailed"
    };
    format!("{prefix}: {} -> {cause}", dep.topic_id)
}

/// Moves Pending topics whose dependencies have settled. Returns whether
/// anything changed.
pub fn promote(states: &mut BTreeMap<TopicId, TopicState>, gates: &GatePolicy) -> bool {
    let mut changed = false;
    loop {
        let mut updates: Vec<(TopicId, TopicStatus, Option<String>)> = Vec::new();
        for (id, s) in states.iter() {
            if s.status != TopicStatus::Pending {
                continue;
            }
            let mut blocked = false;
            let mut failed = None;
            for d in &s.deps {
                let Some(dep) = states.get(d) else {
                    failed = Some(format!("DependencyFailed: {d} is not registered"));
                    break;
                };
                match dep.status {
                    TopicStatus::Resolved => {}
                    TopicStatus::Rejected if tolerates_rejected(s.layer()) => {}
                    TopicStatus::Failed | TopicStatus::Rejected => {
                        failed = Some(failure_chain(s.layer(), dep));
                        break;
                    }
                    _ => blocked = true,
                }
            }
            if let Some(e) = failed {
                updates.push((id.clone(), TopicStatus::Failed, Some(e)));
            } else if !blocked {
                let to = if gates.gated(s.layer()) {
                    TopicStatus::AwaitingApproval
                } else {
                    TopicStatus::Ready
                };
                updates.push((id.clone(), to, None));
            }
        }
        if updates.is_empty() {
            return changed;
        }
        for (id, to, err) in updates {
            let s = states.get_mut(&id).expect("state present");
            s.transition(to).expect("promotion from Pending");
            s.error = err;
        }
        changed = true;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TraceEvent {
    Started {
        id: TopicId,
        running: usize,
        /// Dependency statuses at the instant the topic started.
        deps: Vec<(TopicId, TopicStatus)>,
    },
    Finished {
        id: TopicId,
        status: TopicStatus,
    },
}

/// Rejects dependency cycles, naming one topic on a cycle.
pub fn check_acyclic(states: &BTreeMap<TopicId, TopicState>) -> Result<(), TopicId> {
    let mut indegree: BTreeMap<&TopicId, usize> = states.keys().map(|k| (k, 0)).collect();
    let mut dependents: BTreeMap<&TopicId, Vec<&TopicId>> = BTreeMap::new();
    for (id, s) in states {
        for d in &s.deps {
            if states.contains_key(d) {
                *indegree.get_mut(id).expect("key") += 1;
                dependents.entry(d).or_default().push(id);
            }
        }
    }
    let mut queue: VecDeque<&TopicId> = indegree.iter().filter(|(_, n)| **n == 0).map(|(k, _)| *k).collect();
    let mut seen = 0;
    while let Some(k) = queue.pop_front() {
        seen += 1;
        for dep in dependents.get(k).into_iter().flatten() {
            let n = indegree.get_mut(dep).expect("key");
            *n -= 1;
            if *n == 0 {
                queue.push_back(dep);
            }
        }
    }
    if seen == states.len() {
        Ok(())
    } else {
        Err(indegree
            .into_iter()
            .find(|(_, n)| *n > 0)
            .map(|(k, _)| k.clone())
            .expect("cycle member"))
    }
}

enum Done {
    Finished(TopicId, Result<(), String>),
    Panicked(Box<dyn std::any::Any + Send>),
}

/// Runs every runnable topic to a terminal state with at most
/// `max_parallelism` executions in flight. All state changes happen on the
/// calling thread; `on_change` sees each new state. A panic inside `exec`
/// is re-raised here without recording the topic's outcome.
pub fn drive<F>(
    states: &mut BTreeMap<TopicId, TopicState>,
    gates: &GatePolicy,
    max_parallelism: usize,
    exec: F,
    on_change: &mut dyn FnMut(&BTreeMap<TopicId, TopicState>),
) -> Vec<TraceEvent>
where
    F: Fn(&TopicId) -> Result<(), String> + Sync,
{
    let max_parallelism = max_parallelism.max(1);
    let mut trace = Vec::new();
    std::thread::scope(|scope| {
        let (job_tx, job_rx) = mpsc::channel::<TopicId>();
        let job_rx = Arc::new(Mutex::new(job_rx));
        let (done_tx, done_rx) = mpsc::channel::<Done>();
        for _ in 0..max_parallelism {
            let rx = job_rx.clone();
            let tx = done_tx.clone();
            let exec = &exec;
            scope.spawn(move || loop {
                let next = rx.lock().expect("job queue").recv();
                let Ok(id) = next else { break };
                let msg = match panic::catch_unwind(AssertUnwindSafe(|| exec(&id))) {
                    Ok(r) => Done::Finished(id, r),
                    Err(p) => Done::Panicked(p),
                };
                if tx.send(msg).is_err() {
                    break;
                }
            });
        }
        drop(done_tx);
        let mut running = 0usize;
        loop {
            if promote(states, gates) {
                on_change(states);
            }
            let mut dispatched = false;
            while running < max_parallelism {
                let Some(id) = states
                    .iter()
                    .find(|(_, s)| s.status == TopicStatus::Ready)
                    .map(|(k, _)| k.clone())
                else {
                    break;
                };
                let deps = states[&id]
                    .deps
                    .iter()
                    .map(|d| (d.clone(), states.get(d).map_or(TopicStatus::Failed, |x| x.status)))
                    .collect();
                let s = states.get_mut(&id).expect("state present");
                s.transition(TopicStatus::Running).expect("ready to running");
                running += 1;
                trace.push(TraceEvent::Started {
                    id: id.clone(),
                    running,
                    deps,
                });
                job_tx.send(id).expect("workers alive");
                dispatched = true;
            }
            if dispatched {
                on_change(states);
            }
            if running == 0 {
                break;
            }
            match done_rx.recv().expect("a worker reports") {
                Done::Finished(id, result) => {
                    running -= 1;
                    let s = states.get_mut(&id).expect("state present");
                    match result {
                        Ok(()) => s.transition(TopicStatus::Resolved).expect("running to resolved"),
                        Err(e) => {
                            s.transition(TopicStatus::Failed).expect("running to failed");
                            s.error = Some(e);
                        }
                    }
                    trace.push(TraceEvent::Finished { id, status: s.status });
                    on_change(states);
                }
                Done::Panicked(p) => {
                    drop(job_tx);
                    panic::resume_unwind(p);
                }
            }
        }
        drop(job_tx);
    });
    trace
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(n: u8) -> TopicId {
        format!("information/{}", format!("{n:02x}").repeat(32)).parse().unwrap()
    }

    #[test]
    fn transitions() {
        use TopicStatus::*;
        assert!(Pending.can_transition(AwaitingApproval));
        assert!(AwaitingApproval.can_transition(Rejected));
        assert!(!Resolved.can_transition(Running));
        assert!(!Rejected.can_transition(Ready));
        assert!(!Pending.can_transition(Running));
    }

    #[test]
    fn cycle_detected() {
        let mut m = BTreeMap::new();
        let mut a = TopicState::new(id(1));
        a.deps.insert(id(2));
        let mut b = TopicState::new(id(2));
        b.deps.insert(id(1));
        m.insert(id(1), a);
        m.insert(id(2), b);
        assert!(check_acyclic(&m).is_err());
        m.get_mut(&id(2)).unwrap().deps.clear();
        assert!(check_acyclic(&m).is_ok());
    }

    #[test]
    fn failure_propagates() {
        let mut m = BTreeMap::new();
        let mut a = TopicState::new(id(1));
        a.deps.insert(id(2));
        m.insert(id(1), a);
        m.insert(id(2), TopicState::new(id(2)));
        drive(
            &mut m,
            &GatePolicy::none(),
            2,
            |t| if *t == id(2) { Err("boom".into()) } else { Ok(()) },
            &mut |_| {},
        );
        assert_eq!(m[&id(2)].status, TopicStatus::Failed);
        assert_eq!(m[&id(1)].status, TopicStatus::Failed);
        assert!(m[&id(1)].error.as_deref().unwrap().contains("boom"));
    }
}
