//! Command line definitions and their dispatch onto engine calls.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use dikw_core::artifact::ReviewKind;
use dikw_core::dataset::{ingest, SchemaDescriptor};
use dikw_core::orchestrator::ShippedCatalog;
use dikw_core::simulator::{self, DemographicsMix, GroundTruthModel};
use dikw_core::{CatalogRef, Dataset, ReviewRequest, Run, RunConfig, RunSnapshot, Topic, TopicStatus, Workspace};
use serde_json::json;

use crate::api::{self, AppState};
use crate::error::ApiError;
use crate::ops;

#[derive(Debug, Parser)]
#[command(name = "dikw", version, about = "Layered experiment analysis and message portfolio generation")]
pub struct Cli {
    /// Workspace directory holding the artifact store and runs.
    #[arg(long, global = true, env = "DIKW_WORKSPACE", default_value = ".dikw")]
    pub workspace: PathBuf,
    /// Print results and errors as JSON.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a CSV export against the encounter schema and catalog.
    Ingest {
        csv: PathBuf,
        #[arg(long)]
        schema: Option<PathBuf>,
        /// `stage1`, `stage2` or a catalog JSON path.
        #[arg(long, default_value = "stage1")]
        catalog: String,
    },
    /// Generate a synthetic encounter table from a ground-truth model.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        mix: Option<PathBuf>,
        #[arg(short, long)]
        n: usize,
        #[arg(long, default_value = "stage1")]
        catalog: String,
        /// CSV destination.
        #[arg(long)]
        out: PathBuf,
        /// Also write the model's exact expectations here.
        #[arg(long)]
        oracle: Option<PathBuf>,
    },
    /// Submit a run, or resume one, and step it until it blocks.
    Run(RunArgs),
    /// Runs in the workspace.
    Runs {
        #[command(subcommand)]
        command: RunsCommand,
    },
    /// Topics of a run.
    Topics {
        #[command(subcommand)]
        command: TopicsCommand,
    },
    /// Approve, reject or edit a gated topic, or reject/restore a candidate.
    Review(ReviewArgs),
    /// Write run outputs.
    Export {
        #[command(subcommand)]
        command: ExportCommand,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// RunConfig JSON.
    #[arg(long, conflicts_with = "resume", required_unless_present = "resume")]
    pub config: Option<PathBuf>,
    /// Continue a persisted run.
    #[arg(long)]
    pub resume: Option<String>,
    /// Approve every gated topic as it comes up.
    #[arg(long)]
    pub auto_approve: bool,
    #[arg(long, default_value = "cli")]
    pub actor: String,
    /// Portfolio destination; defaults to `portfolio.json` in the run directory.
    #[arg(long)]
    pub portfolio_out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum RunsCommand {
    Ls,
}

#[derive(Debug, Subcommand)]
pub enum TopicsCommand {
    Ls {
        #[arg(long)]
        run: String,
        /// Only topics in this status, e.g. AwaitingApproval.
        #[arg(long)]
        status: Option<String>,
    },
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("decision").required(true).args(["approve", "reject", "edit"])))]
pub struct ReviewArgs {
    /// `layer/hash`, a hash, or a unique hash prefix.
    pub topic: String,
    #[arg(long)]
    pub run: Option<String>,
    #[arg(long)]
    pub approve: bool,
    #[arg(long)]
    pub reject: bool,
    /// Replacement topic JSON.
    #[arg(long)]
    pub edit: Option<PathBuf>,
    /// Portfolio candidate name; `--approve` restores it.
    #[arg(long)]
    pub candidate: Option<String>,
    #[arg(long, env = "DIKW_ACTOR")]
    pub actor: String,
    #[arg(long, default_value = "")]
    pub comment: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Md,
}

#[derive(Debug, Subcommand)]
pub enum ExportCommand {
    /// Portfolio with review flags applied.
    Portfolio {
        #[arg(long)]
        run: String,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        /// Destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot-ready CSV of every resolved information estimate.
    Rates {
        #[arg(long)]
        run: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn catalog_ref(s: &str) -> CatalogRef {
    match s {
        "stage1" => CatalogRef::Shipped(ShippedCatalog::Stage1),
        "stage2" => CatalogRef::Shipped(ShippedCatalog::Stage2),
        path => CatalogRef::File { path: PathBuf::from(path) },
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ApiError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ApiError::validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ApiError::validation(format!("{}: {e}", path.display())))
}

fn emit(json_mode: bool, value: serde_json::Value, text: impl FnOnce() -> String) {
    let out = if json_mode {
        serde_json::to_string_pretty(&value).expect("json value serializes")
    } else {
        text()
    };
    // A closed pipe (`| head`) is not an error worth reporting.
    let _ = writeln!(std::io::stdout(), "{out}");
}

fn stdout_bytes(bytes: &[u8]) -> Result<(), ApiError> {
    match std::io::stdout().write_all(bytes) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn snapshot_text(s: &RunSnapshot) -> String {
    let counts: Vec<String> = s.counts.iter().map(|(k, v)| format!("{k:?}={v}")).collect();
    let mut lines = vec![
        format!("run {}", s.run_id),
        format!("status: {}", if s.complete { "complete" } else { "in progress" }),
        format!("topics: {}", counts.join(" ")),
        format!("executions: {}", s.executions),
    ];
    for t in s.topics.iter().filter(|t| t.status == TopicStatus::AwaitingApproval) {
        lines.push(format!("awaiting approval: {} {}", t.topic_id, t.summary));
    }
    lines.join("\n")
}

/// Executes one parsed command.
pub fn execute(cli: Cli) -> Result<(), ApiError> {
    let json_mode = cli.json;
    match cli.command {
        Command::Ingest { csv, schema, catalog } => {
            let descriptor = match schema {
                Some(p) => SchemaDescriptor::load(&p).map_err(dikw_core::RunError::from)?,
                None => SchemaDescriptor::default(),
            };
            let table = ingest(&csv, &descriptor).map_err(dikw_core::RunError::from)?;
            let catalog = catalog_ref(&catalog).load().map_err(dikw_core::RunError::from)?;
            let ds = Dataset::new(table, catalog).map_err(dikw_core::RunError::from)?;
            let variants = ds.table.distinct_variants();
            emit(
                json_mode,
                json!({
                    "rows": ds.fingerprint.row_count,
                    "fingerprint": ds.fingerprint.digest,
                    "columns": ds.fingerprint.column_names,
                    "variants": variants,
                }),
                || {
                    format!(
                        "{} rows, {} variants\nfingerprint {}",
                        ds.fingerprint.row_count,
                        variants.len(),
                        ds.fingerprint.digest
                    )
                },
            );
        }
        Command::Simulate { model, mix, n, catalog, out, oracle } => {
            let model: GroundTruthModel = read_json(&model)?;
            let mix: DemographicsMix = match mix {
                Some(p) => read_json(&p)?,
                None => DemographicsMix::default(),
            };
            let catalog = catalog_ref(&catalog).load().map_err(dikw_core::RunError::from)?;
            let table = simulator::generate(&model, n, &mix, &catalog).map_err(dikw_core::RunError::from)?;
            let mut buf = Vec::new();
            table.write_csv(&mut buf).map_err(dikw_core::RunError::from)?;
            ops::write_file(&out, &buf)?;
            if let Some(p) = &oracle {
                let report = simulator::oracle(&model, &mix, &catalog);
                let mut bytes = serde_json::to_vec_pretty(&report).map_err(|e| ApiError::internal(e.to_string()))?;
                bytes.push(b'\n');
                ops::write_file(p, &bytes)?;
            }
            let fp = dikw_core::dataset::fingerprint(&table);
            emit(
                json_mode,
                json!({ "rows": table.row_count(), "fingerprint": fp.digest, "out": out }),
                || format!("wrote {} rows to {}\nfingerprint {}", table.row_count(), out.display(), fp.digest),
            );
        }
        Command::Run(args) => {
            let ws = Workspace::open(&cli.workspace)?;
            let mut run = match (&args.config, &args.resume) {
                (_, Some(id)) => Run::open(&ws, id)?,
                (Some(path), None) => {
                    let config: RunConfig = read_json(path)?;
                    Run::submit(&ws, config)?
                }
                (None, None) => return Err(ApiError::validation("pass --config or --resume")),
            };
            let snap = if args.auto_approve {
                run.run_auto_approve(&args.actor)?
            } else {
                run.step()?
            };
            let mut portfolio_path = None;
            if let Ok(export) = run.portfolio() {
                let path = args.portfolio_out.clone().unwrap_or_else(|| run.dir().join("portfolio.json"));
                ops::write_file(&path, &ops::portfolio_json(&export)?)?;
                portfolio_path = Some(path);
            }
            emit(
                json_mode,
                json!({ "snapshot": snap, "portfolio": portfolio_path }),
                || {
                    let mut t = snapshot_text(&snap);
                    if let Some(p) = &portfolio_path {
                        t.push_str(&format!("\nportfolio: {}", p.display()));
                    }
                    t
                },
            );
        }
        Command::Runs { command: RunsCommand::Ls } => {
            let ws = Workspace::open(&cli.workspace)?;
            let runs = ws.list_runs()?;
            emit(json_mode, json!(runs), || runs.join("\n"));
        }
        Command::Topics { command: TopicsCommand::Ls { run, status } } => {
            let ws = Workspace::open(&cli.workspace)?;
            let status = status
                .as_deref()
                .map(|s| {
                    serde_json::from_value::<TopicStatus>(json!(s))
                        .map_err(|_| ApiError::validation(format!("unknown status `{s}`")))
                })
                .transpose()?;
            let run = Run::open(&ws, &run)?;
            let topics = run.topics_with_status(status);
            emit(json_mode, json!(topics), || {
                topics
                    .iter()
                    .map(|t| format!("{}  {:<16}  {}", t.topic_id, format!("{:?}", t.status), t.summary))
                    .collect::<Vec<_>>()
                    .join("\n")
            });
        }
        Command::Review(args) => {
            let ws = Workspace::open(&cli.workspace)?;
            let (mut run, id) = ops::locate_topic(&ws, args.run.as_deref(), &args.topic)?;
            let action = if args.approve {
                ReviewKind::Approve
            } else if args.reject {
                ReviewKind::Reject
            } else {
                ReviewKind::Edit
            };
            let mut req = ReviewRequest::new(action, &args.actor, &args.comment);
            if let Some(name) = &args.candidate {
                req = req.for_candidate(name);
            }
            if let Some(path) = &args.edit {
                let topic: Topic = read_json(path)?;
                req = req.with_edit(topic);
            }
            let outcome = run.review(&id, req)?;
            emit(json_mode, json!(outcome), || {
                let mut t = format!("{} -> {:?}", outcome.state.topic_id, outcome.state.status);
                if let Some(n) = &outcome.new_topic {
                    t.push_str(&format!("\nnew topic {} ({:?})", n.topic_id, n.status));
                }
                if let Some(c) = &outcome.candidate {
                    let s = if c.rejected_by_review { "rejected" } else { "active" };
                    t = format!("candidate {} -> {s}", c.name);
                }
                t
            });
        }
        Command::Export { command: ExportCommand::Portfolio { run, format, out } } => {
            let ws = Workspace::open(&cli.workspace)?;
            let export = Run::open(&ws, &run)?.portfolio()?;
            let bytes = match format {
                Format::Json => ops::portfolio_json(&export)?,
                Format::Md => ops::portfolio_md(&export)?.into_bytes(),
            };
            match out {
                Some(p) => ops::write_file(&p, &bytes)?,
                None => stdout_bytes(&bytes)?,
            }
        }
        Command::Export { command: ExportCommand::Rates { run, out } } => {
            let ws = Workspace::open(&cli.workspace)?;
            let run = Run::open(&ws, &run)?;
            let mut buf = Vec::new();
            ops::rates_csv(&run, &mut buf)?;
            match out {
                Some(p) => ops::write_file(&p, &buf)?,
                None => stdout_bytes(&buf)?,
            }
        }
        Command::Serve { addr } => {
            let ws = Workspace::open(&cli.workspace)?;
            let token = std::env::var(api::TOKEN_ENV).ok();
            let state = AppState::new(ws, token);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(api::serve(state, &addr))?;
        }
    }
    Ok(())
}
