use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use eip_agents::route::{Event, EventLog};
use eip_agents_demo::{default_scenario, Scenario, ScenarioConfig};
use tracing::{info, warn};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "demo", about = "Run the email-relevance scenario")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario TOML; the built-in scenario when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Tie-break seed for agent start order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Longest wait for the agents to agree on an allocation.
    #[arg(long, default_value_t = 10_000)]
    settle_ms: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Start everything, inject the configured mail, and run.
    Run {
        #[command(flatten)]
        common: Common,
        /// Run time after injecting mail; until quiet when omitted.
        #[arg(long)]
        duration_ms: Option<u64>,
        /// Write the event log here.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Add the inter-container bridge routes.
        #[arg(long)]
        enable_bridge: bool,
        /// Expire this container's session once settled.
        #[arg(long, value_name = "CONTAINER")]
        expire: Option<String>,
    },
    /// Start everything, inject one mail, and report where it went.
    InjectMail {
        #[command(flatten)]
        common: Common,
        /// Target account; the shared account when omitted.
        #[arg(long)]
        to: Option<String>,
        #[arg(long, default_value = "cli@bigcorp.com")]
        from: String,
        #[arg(long)]
        subject: String,
        #[arg(long, default_value = "")]
        body: String,
    },
    /// Start everything and print each agent's allocation once settled.
    DumpAllocations {
        #[command(flatten)]
        common: Common,
    },
    /// Print an event log, optionally only one event kind.
    DumpLog {
        path: PathBuf,
        #[arg(long)]
        event: Option<String>,
    },
}

fn load(common: &Common) -> Result<ScenarioConfig> {
    match &common.config {
        Some(p) => ScenarioConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(default_scenario()),
    }
}

fn start(cfg: ScenarioConfig, events: EventLog, common: &Common) -> Result<Scenario> {
    let scenario = Scenario::build(cfg, events, common.seed).context("initialising scenario")?;
    scenario.start();
    if !scenario.wait_settled(Duration::from_millis(common.settle_ms)) {
        bail!(
            "agents did not agree on an allocation within {} ms",
            common.settle_ms
        );
    }
    info!(agents = scenario.agent_names().len(), "allocation settled");
    Ok(scenario)
}

fn finish(scenario: &Scenario, duration_ms: Option<u64>) {
    match duration_ms {
        Some(ms) => std::thread::sleep(Duration::from_millis(ms)),
        None => scenario.wait_quiescent(Duration::from_secs(60)),
    }
    for f in scenario.forwards() {
        println!("forwarded to={} subject={}", f.to, f.subject);
    }
}

fn dump_log(path: &Path, kind: Option<&str>) -> Result<()> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    for line in text.lines() {
        match Event::parse_line(line) {
            Some(ev) if kind.is_none_or(|k| ev.event == k) => println!("{ev}"),
            Some(_) => {}
            None => warn!(line, "unparseable log line"),
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            common,
            duration_ms,
            log,
            enable_bridge,
            expire,
        } => {
            let mut cfg = load(&common)?;
            cfg.routes.inter_container |= enable_bridge;
            let events = match &log {
                Some(p) => EventLog::with_file(p)
                    .with_context(|| format!("opening log {}", p.display()))?,
                None => EventLog::new(),
            };
            let mut scenario = start(cfg, events, &common)?;
            if let Some(id) = expire {
                scenario.kill_container(&id)?;
                if !scenario.wait_settled(Duration::from_millis(common.settle_ms)) {
                    bail!("agents did not re-settle after expiring `{id}`");
                }
            }
            let n = scenario.inject_fixture_mail();
            info!(mails = n, "mail injected");
            finish(&scenario, duration_ms);
            scenario.shutdown();
            scenario.events().flush().context("flushing log")?;
        }
        Command::InjectMail {
            common,
            to,
            from,
            subject,
            body,
        } => {
            let scenario = start(load(&common)?, EventLog::new(), &common)?;
            scenario.inject_mail(to.as_deref(), &from, &subject, &body);
            finish(&scenario, None);
        }
        Command::DumpAllocations { common } => {
            let scenario = start(load(&common)?, EventLog::new(), &common)?;
            for (agent, view) in scenario.allocations() {
                let accounts = view
                    .map(|v| v.accounts_of(&agent).join(", "))
                    .unwrap_or_default();
                println!("{agent}: [{accounts}]");
            }
        }
        Command::DumpLog { path, event } => dump_log(&path, event.as_deref())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
