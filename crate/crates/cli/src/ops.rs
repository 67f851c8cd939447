//! Engine calls shared by the command line and the HTTP handlers.

use std::io::Write as _;

use dikw_core::artifact::Payload;
use dikw_core::orchestrator::PortfolioExport;
use dikw_core::topic::{Layer, TopicId};
use dikw_core::wisdom::portfolio_markdown;
use dikw_core::{Run, Workspace};
use serde_json::json;

use crate::error::ApiError;

/// Resolves a topic reference within a run: `layer/hash`, a bare hash, or
/// a unique hash prefix of at least 8 characters.
pub fn resolve_topic(run: &Run, reference: &str) -> Result<TopicId, ApiError> {
    let reference = reference.trim();
    if let Ok(id) = reference.parse::<TopicId>() {
        return if run.topic_state(&id).is_some() {
            Ok(id)
        } else {
            Err(ApiError::not_found(format!("topic {id} in run {}", run.id())))
        };
    }
    let hash = reference.rsplit('/').next().unwrap_or(reference).to_ascii_lowercase();
    if hash.len() < 8 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(ApiError::validation(format!("malformed topic id `{reference}`")));
    }
    let hits: Vec<TopicId> = run
        .state()
        .states
        .keys()
        .filter(|id| id.hash.starts_with(&hash))
        .cloned()
        .collect();
    match hits.len() {
        0 => Err(ApiError::not_found(format!("topic {reference} in run {}", run.id()))),
        1 => Ok(hits.into_iter().next().expect("one hit")),
        _ => Err(ApiError::validation(format!("topic prefix `{reference}` is ambiguous"))
            .with_detail(json!({ "matches": hits }))),
    }
}

/// Opens the run holding `reference`: the named one, or the only run in
/// the workspace that contains the topic.
pub fn locate_topic(ws: &Workspace, run_id: Option<&str>, reference: &str) -> Result<(Run, TopicId), ApiError> {
    if let Some(id) = run_id {
        let run = Run::open(ws, id)?;
        let topic = resolve_topic(&run, reference)?;
        return Ok((run, topic));
    }
    let mut found = Vec::new();
    for id in ws.list_runs()? {
        let run = Run::open(ws, &id)?;
        match resolve_topic(&run, reference) {
            Ok(t) => found.push((run, t)),
            Err(e) if e.code == crate::error::ErrorCode::NotFound => {}
            Err(e) => return Err(e),
        }
    }
    match found.len() {
        0 => Err(ApiError::not_found(format!("topic {reference} in any run"))),
        1 => Ok(found.pop().expect("one run")),
        _ => {
            let runs: Vec<&str> = found.iter().map(|(r, _)| r.id()).collect();
            Err(ApiError::validation(format!("topic {reference} occurs in several runs; name one"))
                .with_detail(json!({ "runs": runs })))
        }
    }
}

/// The serialized portfolio export, identical for file and HTTP output.
pub fn portfolio_json(export: &PortfolioExport) -> Result<Vec<u8>, ApiError> {
    let mut bytes = serde_json::to_vec_pretty(export).map_err(|e| ApiError::internal(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn portfolio_md(export: &PortfolioExport) -> Result<String, ApiError> {
    let payload = export
        .payload
        .as_ref()
        .ok_or_else(|| ApiError::internal("portfolio export without payload"))?;
    let mut p = payload.clone();
    p.candidates = export.candidates.clone();
    Ok(portfolio_markdown(&p))
}

/// One CSV row per estimate of every resolved information artifact, with
/// group rows and funnel stages flattened, ready for plotting.
pub fn rates_csv<W: std::io::Write>(run: &Run, out: W) -> Result<(), ApiError> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| ApiError::internal(e.to_string());
    w.write_record(["topic_id", "query", "subject", "label", "n", "estimate", "ci_low", "ci_high", "p_value"])
        .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (id, st) in &run.state().states {
        if id.layer != Layer::Information || st.status != dikw_core::TopicStatus::Resolved {
            continue;
        }
        let Some(artifact) = run.store().get(id)? else { continue };
        let Payload::Information(r) = &artifact.payload else { continue };
        let query = format!("{:?}", r.query);
        let tid = id.to_string();
        w.write_record([
            tid.as_str(),
            &query,
            &r.subject,
            "",
            &r.n.to_string(),
            &r.estimate.to_string(),
            &opt(r.ci_low),
            &opt(r.ci_high),
            &opt(r.p_value),
        ])
        .map_err(csv_err)?;
        for g in r.group_results.iter().flatten() {
            w.write_record([
                tid.as_str(),
                &query,
                &r.subject,
                &g.label,
                &g.n.to_string(),
                &g.estimate.to_string(),
                &opt(g.ci_low),
                &opt(g.ci_high),
                "",
            ])
            .map_err(csv_err)?;
        }
        for s in r.funnel.iter().flatten() {
            w.write_record([tid.as_str(), &query, &s.stage, &s.stage, &r.n.to_string(), &s.rate.to_string(), "", "", ""])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<(), ApiError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}
