//! Run lifecycle: expansion, gates, reviews, failures and persistence.

use std::collections::BTreeSet;

use dikw_core::plan;
use dikw_core::simulator::GroundTruthModel;
use dikw_core::topic::{ContextSpec, Descriptor, KnowledgeTopic, Predicate, Relation, Scalar};
use dikw_core::*;

fn model() -> GroundTruthModel {
    let mut m = GroundTruthModel::uniform(&MessageCatalog::stage1(), 0.45, 99);
    m.strategy_effects.insert(StrategyTag::Urgency, 0.35);
    m.strategy_effects.insert(StrategyTag::SocialProof, -0.15);
    m
}

fn config(topics: Vec<Topic>, gates: GatePolicy) -> RunConfig {
    let mut cfg = RunConfig::new(DatasetRef::Simulated { model: model(), n: 6_000, mix: None }, CatalogRef::default());
    cfg.topics = topics;
    cfg.review_gates = gates;
    cfg
}

fn urgency_vs_social() -> KnowledgeTopic {
    KnowledgeTopic::new(
        Descriptor::tag(StrategyTag::Urgency),
        Relation::Outperforms,
        Descriptor::tag(StrategyTag::SocialProof),
    )
}

fn ids_at(run: &Run, layer: Layer, status: TopicStatus) -> Vec<TopicId> {
    run.topics_with_status(Some(status))
        .into_iter()
        .filter(|s| s.topic_id.layer == layer)
        .map(|s| s.topic_id)
        .collect()
}

fn approve(actor: &str) -> ReviewRequest {
    ReviewRequest::new(ReviewKind::Approve, actor, "looks right")
}

#[test]
fn knowledge_topic_spawns_three_information_topics() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::open(dir.path()).unwrap();
    let pair = KnowledgeTopic::new(
        Descriptor::variant("timeliness"),
        Relation::Outperforms,
        Descriptor::variant("default"),
    );
    let run = Run::submit(&ws, config(vec![Topic::Knowledge(pair)], GatePolicy::none())).unwrap();
    let k = &ids_at(&run, Layer::Knowledge, TopicStatus::Pending)[0];
    let deps = &run.topic_state(k).unwrap().deps;
    assert_eq!(deps.len(), 3);
    for d in deps {
        assert_eq!(d.layer, Layer::Information);
        assert_eq!(run.topic_state(d).unwrap().spawned_by.as_ref(), Some(k));
    }
    assert!(dir.path().join("runs").join(run.id()).join("state.json").is_file());
}

#[test]
fn gated_run_waits_for_each_approval() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::open(dir.path()).unwrap();
    let topics = vec![Topic::Knowledge(urgency_vs_social()), Topic::Wisdom(plan::default_wisdom())];
    let mut run = Run::submit(&ws, config(topics, GatePolicy::default())).unwrap();
    let snap = run.step().unwrap();
    assert!(!snap.complete);
    let waiting = ids_at(&run, Layer::Knowledge, TopicStatus::AwaitingApproval);
    assert_eq!(waiting.len(), 1);
    assert_eq!(ids_at(&run, Layer::Wisdom, TopicStatus::Pending).len(), 1);
    assert!(run.store().get(&waiting[0]).unwrap().is_none());

    run.review(&waiting[0], approve("reviewer-a")).unwrap();
    run.step().unwrap();
    let artifact = run.store().get(&waiting[0]).unwrap().unwrap();
    assert_eq!(artifact.provenance.human_actions.len(), 1);
    assert_eq!(artifact.provenance.human_actions[0].actor, "reviewer-a");

    let w = ids_at(&run, Layer::Wisdom, TopicStatus::AwaitingApproval);
    assert_eq!(w.len(), 1);
    run.review(&w[0], approve("reviewer-b")).unwrap();
    let snap = run.step().unwrap();
    assert!(snap.complete);
    assert_eq!(run.topic_state(&w[0]).unwrap().status, TopicStatus::Resolved);
    assert_eq!(run.action_log().unwrap().len(), 2);
}

#[test]
fn rejected_claim_shrinks_the_wisdom_pool() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::open(dir.path()).unwrap();
    let extra = KnowledgeTopic::new(
        Descriptor::tag(StrategyTag::Urgency),
        Relation::Outperforms,
        Descriptor::variant("default"),
    );
    let gates = GatePolicy { knowledge: true, ..GatePolicy::none() };
    let topics = vec![
        Topic::Knowledge(urgency_vs_social()),
        Topic::Knowledge(extra),
        Topic::Wisdom(plan::default_wisdom()),
    ];
    let mut run = Run::submit(&ws, config(topics, gates)).unwrap();
    run.step().unwrap();
    let waiting = ids_at(&run, Layer::Knowledge, TopicStatus::AwaitingApproval);
    assert_eq!(waiting.len(), 2);
    run.review(&waiting[0], ReviewRequest::new(ReviewKind::Reject, "r", "not convinced")).unwrap();
    run.review(&waiting[1], approve("r")).unwrap();
    let snap = run.step().unwrap();
    assert!(snap.complete);
    let p = run.portfolio().unwrap().payload.unwrap();
    let used: BTreeSet<&TopicId> = p.selected_claims.iter().map(|c| &c.id).collect();
    assert!(!used.contains(&waiting[0]));
    assert!(used.contains(&waiting[1]));
}

#[test]
fn edit_registers_a_new_topic_and_relinks_dependents() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::open(dir.path()).unwrap();
    let gates = GatePolicy { knowledge: true, ..GatePolicy::none() };
    let topics = vec![Topic::Knowledge(urgency_vs_social()), Topic::Wisdom(plan::default_wisdom())];
    let mut run = Run::submit(&ws, config(topics, gates)).unwrap();
    run.step().unwrap();
    let old = ids_at(&run, Layer::Knowledge, TopicStatus::AwaitingApproval)[0].clone();
    let mut edited = urgency_vs_social();
    edited.claim.relation = Relation::Increases;
    let out = run
        .review(&old, ReviewRequest::new(ReviewKind::Edit, "r", "reframe").with_edit(Topic::Knowledge(edited)))
        .unwrap();
    let new = out.new_topic.unwrap();
    assert_ne!(new.topic_id, old);
    assert_eq!(new.edited_from.as_ref(), Some(&old));
    assert_eq!(out.state.status, TopicStatus::Rejected);
    assert_eq!(out.state.superseded_by.as_ref(), Some(&new.topic_id));
    let w = &ids_at(&run, Layer::Wisdom, TopicStatus::Pending)[0];
    let wdeps = &run.topic_state(w).unwrap().deps;
    assert!(wdeps.contains(&new.topic_id) && !wdeps.contains(&old));
    let log = run.action_log().unwrap();
    assert_eq!(log[0]["new_topic_id"], serde_json::json!(new.topic_id.to_string()));

    run.step().unwrap();
    assert_eq!(run.topic_state(&new.topic_id).unwrap().status, TopicStatus::AwaitingApproval);
}

#[test]
fn review_of_a_topic_not_awaiting_approval_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::open(dir.path()).unwrap();
    let mut run = Run::submit(&ws, config(vec![Topic::Knowledge(urgency_vs_social())], GatePolicy::none())).unwrap();
    run.step().unwrap();
    let k = ids_at(&run, Layer::Knowledge, TopicStatus::Resolved)[0].clone();
    assert!(matches!(run.review(&k, approve("r")), Err(RunError::InvalidState(_))));
    let cand = approve("r").for_candidate("exploit01");
    assert!(matches!(run.review(&k, cand), Err(RunError::InvalidState(_))));
    let missing = TopicId { layer: Layer::Knowledge, hash: "f".repeat(64) };
    assert!(matches!(run.review(&missing, approve("r")), Err(RunError::NotFound(_))));
    assert!(matches!(run.review(&k, approve(" ")), Err(RunError::InvalidConfig(_))));
}

#[test]
fn message_level_review_changes_the_active_count() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::open(dir.path()).unwrap();
    let topics = plan::default_topics(&MessageCatalog::stage1());
    let mut run = Run::submit(&ws, config(topics, GatePolicy::none())).unwrap();
    run.step().unwrap();
    let before = run.portfolio().unwrap();
    assert_eq!((before.active, before.rejected), (20, 0));
    let w = before.topic_id.clone();
    for name in ["exploit03", "exploit07", "explore02"] {
        let out = run.review(&w, ReviewRequest::new(ReviewKind::Reject, "r", "off-brand").for_candidate(name)).unwrap();
        assert!(out.candidate.unwrap().rejected_by_review);
    }
    let after = run.portfolio().unwrap();
    assert_eq!((after.active, after.rejected), (17, 3));
    assert_eq!(after.review_actions.len(), 3);
    assert!(after.candidates.iter().find(|c| c.name == "explore02").unwrap().rejected_by_review);

    run.review(&w, approve("r").for_candidate("exploit07")).unwrap();
    assert_eq!(run.portfolio().unwrap().active, 18);
    let unknown = approve("r").for_candidate("exploit99");
    assert!(matches!(run.review(&w, unknown), Err(RunError::NotFound(_))));

    let reopened = Run::open(&ws, run.id()).unwrap();
    assert_eq!(reopened.portfolio().unwrap().active, 18);
    let stored = run.store().get(&w).unwrap().unwrap();
    match &stored.payload {
        Payload::Wisdom(p) => assert!(p.candidates.iter().all(|c| !c.rejected_by_review)),
        _ => panic!("not a wisdom artifact"),
    }
}

#[test]
fn empty_evidence_fails_the_claim_with_a_chain() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::open(dir.path()).unwrap();
    let mut k = urgency_vs_social();
    k.claim.condition = ContextSpec {
        population: vec![Predicate::eq("gender", Scalar::text("nobody"))],
        ..ContextSpec::default()
    };
    let topics = vec![Topic::Knowledge(k), Topic::Knowledge(urgency_vs_social())];
    let mut run = Run::submit(&ws, config(topics, GatePolicy::none())).unwrap();
    let snap = run.step().unwrap();
    assert!(snap.complete);
    let failed = ids_at(&run, Layer::Knowledge, TopicStatus::Failed);
    assert_eq!(failed.len(), 1);
    let err = run.topic_state(&failed[0]).unwrap().error.clone().unwrap();
    assert!(err.starts_with("EvidenceResolutionFailure: information/"), "{err}");
    assert!(err.ends_with("-> slice matches no rows with a value for `clicked`"), "{err}");
    assert_eq!(ids_at(&run, Layer::Knowledge, TopicStatus::Resolved).len(), 1);
}

#[test]
fn parallelism_limit_holds() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::open(dir.path()).unwrap();
    let mut cfg = config(plan::default_topics(&MessageCatalog::stage1()), GatePolicy::none());
    cfg.max_parallelism = 3;
    let mut run = Run::submit(&ws, cfg).unwrap();
    let (_, trace) = run.step_traced().unwrap();
    let mut peak = 0;
    for e in &trace {
        if let dikw_core::scheduler::TraceEvent::Started { running, .. } = e {
            peak = peak.max(*running);
        }
    }
    assert!((2..=3).contains(&peak), "peak {peak}");
}

#[test]
fn runs_are_listed_and_reopened() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::open(dir.path()).unwrap();
    let mut run = Run::submit(&ws, config(vec![Topic::Knowledge(urgency_vs_social())], GatePolicy::none())).unwrap();
    run.step().unwrap();
    assert_eq!(ws.list_runs().unwrap(), vec![run.id().to_string()]);
    let again = Run::open(&ws, run.id()).unwrap();
    assert_eq!(again.state(), run.state());
    assert!(matches!(Run::open(&ws, "run-missing"), Err(RunError::NotFound(_))));
}

#[test]
fn csv_with_unknown_variant_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::open(dir.path()).unwrap();
    let csv = dir.path().join("bad.csv");
    std::fs::write(
        &csv,
        "patient_id,variant,clicked,authenticated,opted_out,redeemed,age,gender,state,drug_category,sent_at\n\
         p1,mystery,true,false,false,false,40,F,CA,statin,2024-03-01\n",
    )
    .unwrap();
    let cfg = RunConfig::new(DatasetRef::Csv { path: csv, schema: None }, CatalogRef::default());
    assert!(matches!(Run::submit(&ws, cfg), Err(RunError::Dataset(_))));
    let missing = RunConfig::new(
        DatasetRef::Csv { path: dir.path().join("nope.csv"), schema: None },
        CatalogRef::default(),
    );
    assert!(matches!(Run::submit(&ws, missing), Err(RunError::InvalidConfig(_))));
}
