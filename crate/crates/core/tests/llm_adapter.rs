//! Adapter modes against a local mock endpoint, and network isolation.

mod support;

use std::fs;
use std::path::Path;

use chrono::{TimeZone, Utc};
use dikw_core::llm::{LlmConfig, LlmError, LlmRequest, ProviderProfile};
use dikw_core::{Layer, LlmAdapter, LlmMode};
use serde_json::json;
use support::mock_llm::{chat_reply, echo_reply, MockLlm};

fn config(mode: LlmMode, mock: Option<&MockLlm>, cassettes: Option<&Path>) -> LlmConfig {
    LlmConfig {
        mode,
        cassette_dir: cassettes.map(Path::to_path_buf),
        provider: mock.map(|m| {
            let mut p = ProviderProfile::new(&m.endpoint, "mock-model");
            p.api_key = Some("sekret".into());
            p
        }),
        max_attempts: 3,
        backoff_ms: 1,
        timeout_secs: 5,
    }
}

fn knowledge_request() -> LlmRequest {
    LlmRequest::new(Layer::Knowledge, "Hypothesis: urgency beats social proof", "urgency > social proof")
}

#[test]
fn record_then_replay_without_network() {
    let mock = MockLlm::start(|_, body| (200, echo_reply(body)));
    let dir = tempfile::tempdir().unwrap();
    let at = Utc.with_ymd_and_hms(2024, 3, 1, 0, 0, 0).unwrap();
    let rec = LlmAdapter::new(config(LlmMode::Record, Some(&mock), Some(dir.path()))).unwrap().with_clock(at);
    let recorded = rec.complete_validated(&knowledge_request()).unwrap();
    assert_eq!(mock.hits(), 1);
    let cassette = dir.path().join(format!("{}.json", recorded.exchange_ids[0]));
    let bytes = fs::read(&cassette).unwrap();
    assert!(!String::from_utf8_lossy(&bytes).contains("sekret"), "api key leaked into cassette");

    let replay = LlmAdapter::new(config(LlmMode::Replay, None, Some(dir.path()))).unwrap();
    let replayed = replay.complete_validated(&knowledge_request()).unwrap();
    assert_eq!(replayed, recorded);
    assert_eq!(mock.hits(), 1, "replay touched the network");
}

#[test]
fn replay_miss_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let replay = LlmAdapter::new(config(LlmMode::Replay, None, Some(dir.path()))).unwrap();
    let err = replay.complete(&knowledge_request()).unwrap_err();
    assert!(matches!(err, LlmError::CassetteMiss(ref id) if *id == knowledge_request().id()));
}

#[test]
fn request_carries_prompt_model_and_bearer_token() {
    let mock = MockLlm::start(|_, body| (200, echo_reply(body)));
    let live = LlmAdapter::new(config(LlmMode::Live, Some(&mock), None)).unwrap();
    live.complete(&knowledge_request()).unwrap();
    let reqs = mock.requests.lock().unwrap();
    assert_eq!(reqs[0].authorization.as_deref(), Some("Bearer sekret"));
    assert_eq!(reqs[0].body["model"], "mock-model");
    assert_eq!(reqs[0].body["messages"][0]["role"], "system");
    assert_eq!(reqs[0].body["messages"][1]["content"], "Hypothesis: urgency beats social proof");
}

#[test]
fn server_errors_are_retried() {
    let mock = MockLlm::start(|i, body| if i < 2 { (503, json!({})) } else { (200, echo_reply(body)) });
    let live = LlmAdapter::new(config(LlmMode::Live, Some(&mock), None)).unwrap();
    assert!(live.complete(&knowledge_request()).is_ok());
    assert_eq!(mock.hits(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let mock = MockLlm::start(|_, _| (400, json!({"error": "bad"})));
    let live = LlmAdapter::new(config(LlmMode::Live, Some(&mock), None)).unwrap();
    assert!(matches!(live.complete(&knowledge_request()), Err(LlmError::Transport(_))));
    assert_eq!(mock.hits(), 1);
}

#[test]
fn malformed_reply_is_reprompted_once() {
    let mock = MockLlm::start(|i, body| {
        if i == 0 {
            (200, chat_reply("sure, here you go"))
        } else {
            (200, echo_reply(body))
        }
    });
    let live = LlmAdapter::new(config(LlmMode::Live, Some(&mock), None)).unwrap();
    let c = live.complete_validated(&knowledge_request()).unwrap();
    assert_eq!(c.exchange_ids.len(), 2);
    let second = mock.requests.lock().unwrap()[1].body["messages"][1]["content"].as_str().unwrap().to_string();
    assert!(second.contains("did not match the required output format"));

    let stubborn = MockLlm::start(|_, _| (200, chat_reply("no json")));
    let live = LlmAdapter::new(config(LlmMode::Live, Some(&stubborn), None)).unwrap();
    assert!(matches!(live.complete_validated(&knowledge_request()), Err(LlmError::SchemaViolation { .. })));
    assert_eq!(stubborn.hits(), 2);
}

#[test]
fn live_mode_requires_an_endpoint() {
    assert!(matches!(LlmAdapter::new(config(LlmMode::Live, None, None)), Err(LlmError::Config(_))));
    assert!(matches!(LlmAdapter::new(config(LlmMode::Replay, None, None)), Err(LlmError::Config(_))));
}

#[test]
fn only_the_adapter_touches_the_network() {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("src");
    let mut stack = vec![src];
    let mut offenders = Vec::new();
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            if p.file_name().is_some_and(|n| n == "llm.rs") {
                continue;
            }
            let text = fs::read_to_string(&p).unwrap();
            if ["reqwest", "std::net", "TcpStream", "UdpSocket"].iter().any(|t| text.contains(t)) {
                offenders.push(p.display().to_string());
            }
        }
    }
    assert!(offenders.is_empty(), "network use outside the adapter: {offenders:?}");
}
