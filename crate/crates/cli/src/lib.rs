//! Command-line harness: scenario runs, shared-vs-isolated comparisons,
//! schedule generation, offline audit verification and the HTTP service.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use collabmem::access::AccessError;
use collabmem::audit::{AuditError, AuditLog};
use collabmem::memory::StoreError;
use collabmem::schedule::{generate_schedule, GraphSchedule, ScheduleError};
use collabmem::scenario::{compare_modes, run_scenario, run_summary, ScenarioConfig, ScenarioError};
use collabmem::substrate::PRINCIPALS_FILE;
use collabmem::verify::{verify, Violation};
use collabmem::{presets, AccessTimeline, MemoryMode, MemoryStore, PermissionEvent, PrincipalId, Principals};
use collabmem_server::{AppState, ServiceError, ServiceOptions};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Access(#[from] AccessError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("unknown preset {0:?} (known: {known})", known = presets::NAMES.join(", "))]
    UnknownPreset(String),
    #[error("{0}")]
    Usage(String),
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?;
    }
    fs::write(path, text).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

#[derive(Debug, Parser)]
#[command(name = "collabmem", version, about = "Permission-aware collaborative memory harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario and write its artifacts.
    Run {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a scenario in shared and isolated mode and compare resource calls.
    Compare {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a grant/revoke schedule and print the phase boundaries.
    GenSchedule {
        /// A count (`5` → user_1..user_5) or a comma-separated list of names.
        #[arg(long)]
        users: String,
        /// A count (`5` → agent_1..agent_5) or a comma-separated list of names.
        #[arg(long)]
        agents: String,
        #[arg(long, default_value_t = collabmem::schedule::DEFAULT_ACCEPT_PROBABILITY)]
        p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Target user→agent edge counts, one per phase.
        #[arg(long, value_delimiter = ',', default_value = "5,10,15,20,25,20,15,10,5")]
        phases: Vec<usize>,
        /// Directory for timeline.jsonl, principals.json and boundaries.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-check every read and invocation in an audit log against the
    /// timeline and store. Exits 1 on any violation.
    Verify {
        #[arg(long)]
        audit: PathBuf,
        #[arg(long)]
        timeline: PathBuf,
        #[arg(long)]
        store: PathBuf,
        /// Defaults to principals.json beside the timeline, else inferred
        /// from the files themselves.
        #[arg(long)]
        principals: Option<PathBuf>,
    },
    /// Serve the HTTP API for a scenario's agents and resources.
    Serve {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Journal directory; state is kept in memory when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = collabmem_server::DEFAULT_ADMIN)]
        admin: String,
        /// Apply the scenario's agent→resource grants on an empty timeline.
        #[arg(long)]
        bootstrap: bool,
    },
    /// Print a built-in scenario as YAML.
    Preset {
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct ConfigSource {
    /// Scenario YAML file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in scenario name.
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigSource {
    pub fn load(&self) -> Result<ScenarioConfig, CliError> {
        match (&self.config, &self.preset) {
            (Some(path), _) => Ok(ScenarioConfig::load(path)?),
            (None, Some(name)) => presets::by_name(name, 0).ok_or_else(|| CliError::UnknownPreset(name.clone())),
            (None, None) => Err(CliError::Usage("give --config or --preset".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Shared,
    Isolated,
}

impl From<Mode> for MemoryMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Shared => MemoryMode::Shared,
            Mode::Isolated => MemoryMode::Isolated,
        }
    }
}

/// `"3"` → `prefix_1..prefix_3`; anything else is a comma-separated list.
pub fn names(spec: &str, prefix: &str) -> Vec<String> {
    match spec.trim().parse::<usize>() {
        Ok(n) => (1..=n).map(|i| format!("{prefix}_{i}")).collect(),
        Err(_) => spec.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect(),
    }
}

/// Loads the three verifier inputs and returns every violation.
pub fn verify_files(
    audit: &Path,
    timeline: &Path,
    store: &Path,
    principals: Option<&Path>,
) -> Result<Vec<Violation>, CliError> {
    let audit = AuditLog::from_jsonl(&read(audit)?)?;
    let timeline_text = read(timeline)?;
    let store = MemoryStore::from_jsonl_infer(&read(store)?)?;
    let sibling = timeline.parent().map(|d| d.join(PRINCIPALS_FILE));
    let principals = match principals.map(Path::to_path_buf).or(sibling.filter(|p| p.exists())) {
        Some(path) => serde_json::from_str(&read(&path)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?,
        None => infer_principals(&timeline_text, &store)?,
    };
    let timeline = AccessTimeline::from_jsonl(&timeline_text, principals)?;
    Ok(verify(audit.records(), &timeline, &store))
}

/// Every principal named by a timeline edge or a fragment's provenance.
fn infer_principals(timeline: &str, store: &MemoryStore) -> Result<Principals, CliError> {
    let mut p = Principals::new();
    for (i, line) in timeline.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let e: PermissionEvent = serde_json::from_str(line)
            .map_err(|e| AccessError::Parse { line: i + 1, message: e.to_string() })?;
        let ((lk, l), (rk, r)) = e.edge.endpoints();
        for (kind, name) in [(lk, l), (rk, r)] {
            p.register(&PrincipalId::new(kind, name).map_err(|e| CliError::Usage(e.to_string()))?);
        }
    }
    for m in store.iter() {
        let prov = m.provenance();
        let ids = std::iter::once(PrincipalId::user(prov.creator()))
            .chain(prov.agents().iter().map(|a| PrincipalId::agent(a.as_str())))
            .chain(prov.resources().iter().map(|r| PrincipalId::resource(r.as_str())));
        for id in ids {
            p.register(&id);
        }
    }
    Ok(p)
}

/// Executes `cli`, printing results to stdout.
pub fn execute(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Run { source, mode, seed, out } => {
            let mut cfg = source.load()?;
            if let Some(seed) = seed {
                cfg = cfg.with_seed(seed);
            }
            if let Some(mode) = mode {
                cfg = cfg.with_mode(mode.into());
            }
            let run = run_scenario(&cfg, Some(&out))?;
            println!("{}", serde_json::to_string_pretty(&run_summary(&run)).expect("summary serializes"));
            let unsafe_phases = run.safety.iter().any(|s| !s.violations.is_empty());
            Ok(if unsafe_phases { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Command::Compare { source, seed, out } => {
            let mut cfg = source.load()?;
            if let Some(seed) = seed {
                cfg = cfg.with_seed(seed);
            }
            let (report, _, _) = compare_modes(&cfg, Some(&out))?;
            print!("{}", report.to_csv());
            Ok(ExitCode::SUCCESS)
        }
        Command::GenSchedule { users, agents, p, seed, phases, out } => {
            let users = names(&users, "user");
            let agents = names(&agents, "agent");
            let schedule = GraphSchedule::from_targets(&phases, seed, p);
            let generated = generate_schedule(&schedule, &users, &agents)?;
            for b in &generated.boundaries {
                println!(
                    "{}",
                    serde_json::json!({ "label": b.label, "tick": b.tick, "edges": b.edges, "events": b.events.len() })
                );
            }
            if let Some(dir) = out {
                write(&dir.join(collabmem::substrate::TIMELINE_FILE), &generated.timeline.to_jsonl())?;
                let principals = serde_json::to_string_pretty(generated.timeline.principals()).expect("serializes");
                write(&dir.join(PRINCIPALS_FILE), &principals)?;
                let boundaries = serde_json::to_string_pretty(&generated.boundaries).expect("serializes");
                write(&dir.join("boundaries.json"), &boundaries)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { audit, timeline, store, principals } => {
            let violations = verify_files(&audit, &timeline, &store, principals.as_deref())?;
            for v in &violations {
                println!("seq {}: {}", v.seq, v.reason);
            }
            if violations.is_empty() {
                println!("ok");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("{} violation(s)", violations.len());
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Serve { source, addr, data, admin, bootstrap } => {
            let cfg = source.load()?;
            let state = Arc::new(AppState::new(&cfg, data.as_deref(), ServiceOptions { admin, bootstrap })?);
            let io = |source| CliError::Io { path: PathBuf::from(addr.to_string()), source };
            let rt = tokio::runtime::Runtime::new().map_err(io)?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                eprintln!("listening on http://{}", listener.local_addr()?);
                collabmem_server::serve(listener, state).await
            })
            .map_err(io)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Preset { name, seed } => {
            let cfg = presets::by_name(&name, seed).ok_or(CliError::UnknownPreset(name))?;
            print!("{}", cfg.to_yaml());
            Ok(ExitCode::SUCCESS)
        }
    }
}
