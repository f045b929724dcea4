use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use graphaudit_client::Client;
use graphaudit_core::agent::{self, FinalizeOutcome};
use graphaudit_core::beliefs::HypothesisDoc;
use graphaudit_core::builder::{self, BuildConfig, GraphSpec};
use graphaudit_core::inbox::Inbox;
use graphaudit_core::ingest::{self, IngestConfig};
use graphaudit_core::planning::{CoverageConfig, Phase};
use graphaudit_core::project::Project;
use graphaudit_core::provider::{MockProvider, Provider, Role};
use graphaudit_core::report;
use graphaudit_core::session::{self, AuditConfig};

#[derive(Debug, Parser)]
#[command(name = "graphaudit", version, about = "Graph-guided code audit over a project directory")]
struct Cli {
    /// Project directory holding ingest/, graphs/, hypotheses.json and the rest.
    #[arg(long, global = true, default_value = ".")]
    project: PathBuf,

    /// JSONL playback script for the mock provider.
    #[arg(long, global = true)]
    script: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split a repository into cards and store the manifest.
    Ingest {
        repo: PathBuf,
        /// Extra exclude globs on top of the defaults.
        #[arg(long = "exclude")]
        exclude: Vec<String>,
        /// Replace the default include glob.
        #[arg(long = "include")]
        include: Vec<String>,
        #[arg(long)]
        max_card_bytes: Option<usize>,
    },
    /// Graph construction.
    Graph {
        #[command(subcommand)]
        command: GraphCommand,
    },
    /// Plan and run investigations.
    Audit {
        #[arg(long, value_enum, default_value_t = PhaseArg::Auto)]
        phase: PhaseArg,
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long)]
        session: Option<String>,
        #[arg(long, default_value_t = agent::DEFAULT_MAX_STEPS)]
        max_steps: usize,
    },
    /// Ask the QA model for verdicts on open hypotheses.
    Finalize {
        #[arg(long, default_value_t = agent::DEFAULT_FILE_CAP)]
        file_cap: usize,
    },
    /// Write report/report.md and report/report.json.
    Report {
        #[arg(long)]
        include_open: bool,
    },
    /// Print coverage of the current graphs.
    Coverage,
    Hypotheses {
        #[command(subcommand)]
        command: HypothesesCommand,
    },
    Inbox {
        #[command(subcommand)]
        command: InboxCommand,
    },
    /// Serve the project over HTTP on localhost.
    Serve {
        #[arg(long, default_value_t = graphaudit_server::DEFAULT_PORT)]
        port: u16,
    },
}

#[derive(Debug, Subcommand)]
enum GraphCommand {
    Build(BuildArgs),
}

#[derive(Debug, Args)]
struct BuildArgs {
    #[arg(long = "graphs", default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    iterations: usize,
    #[arg(long)]
    refine_only: bool,
    /// Build a single graph given as name:focus.
    #[arg(long, value_name = "NAME:FOCUS")]
    force_graph: Option<String>,
}

#[derive(Debug, Subcommand)]
enum HypothesesCommand {
    List {
        #[command(flatten)]
        remote: Remote,
    },
}

#[derive(Debug, Subcommand)]
enum InboxCommand {
    Add {
        text: String,
        #[command(flatten)]
        remote: Remote,
    },
}

#[derive(Debug, Args)]
struct Remote {
    /// Go through a running service instead of the project directory.
    #[arg(long, value_name = "URL")]
    server: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PhaseArg {
    Coverage,
    Intuition,
    Auto,
}

impl PhaseArg {
    fn phase(self) -> Option<Phase> {
        match self {
            PhaseArg::Coverage => Some(Phase::Coverage),
            PhaseArg::Intuition => Some(Phase::Intuition),
            PhaseArg::Auto => None,
        }
    }
}

type Failure = Box<dyn std::error::Error>;

fn provider(script: &Option<PathBuf>) -> Result<Box<dyn Provider>, Failure> {
    match script {
        Some(path) => Ok(Box::new(MockProvider::load(path)?)),
        None => Err("no provider configured: pass --script <jsonl> to replay a mock script".into()),
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn print_hypotheses(doc: &HypothesisDoc) {
    if doc.hypotheses.is_empty() {
        println!("(no hypotheses)");
    }
    for (id, h) in &doc.hypotheses {
        println!("{id}\t{}\t{:.2}\t{}\t{}", h.status, h.confidence, h.severity, h.title);
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let project = Project::new(&cli.project);
    match cli.command {
        Command::Ingest {
            repo,
            exclude,
            include,
            max_card_bytes,
        } => {
            let mut cfg = IngestConfig::default();
            cfg.exclude_globs.extend(exclude);
            if !include.is_empty() {
                cfg.include_globs = include;
            }
            if let Some(m) = max_card_bytes {
                cfg.max_card_bytes = m;
            }
            let (manifest, cards) = ingest::ingest_repo(&repo, &cfg)?;
            project.save_ingest(&manifest, &cards)?;
            println!("ingested {} files into {} cards", manifest.files.len(), cards.len());
        }
        Command::Graph {
            command: GraphCommand::Build(args),
        } => {
            let provider = provider(&cli.script)?;
            let forced_spec = args.force_graph.as_deref().map(GraphSpec::parse).transpose()?;
            let cfg = BuildConfig {
                k: if forced_spec.is_some() { 1 } else { args.k },
                max_iterations: args.iterations,
                refine_only: args.refine_only,
                forced_spec,
                ..Default::default()
            };
            let models = project.models()?;
            let report = builder::build(&project, &cfg, provider.as_ref(), &models.profile(Role::Graph))?;
            for g in &report.graphs {
                println!("{}: {} nodes, {} edges", g.name, g.nodes.len(), g.edges.len());
            }
            println!("{} iterations, stop: {:?}", report.iterations.len(), report.stop);
        }
        Command::Audit {
            phase,
            n,
            session,
            max_steps,
        } => {
            let provider = provider(&cli.script)?;
            let sid = session.unwrap_or_else(|| {
                let secs = std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0);
                format!("session_{secs}")
            });
            let mut cfg = AuditConfig {
                n,
                phase_override: phase.phase(),
                ..Default::default()
            };
            cfg.budgets.max_steps = max_steps;
            let models = project.models()?;
            let report = session::run_audit(&project, provider.as_ref(), &models, &sid, &cfg)?;
            println!("session {}", report.session_id);
            for round in &report.rounds {
                println!("phase {} p={:.3} lambda={:.3}", round.phase, round.coverage, round.lambda);
                for r in &round.investigations {
                    println!("  {} [{}] steps={} hypotheses={}", r.goal, r.outcome, r.steps, r.hypotheses.len());
                }
            }
        }
        Command::Finalize { file_cap } => {
            let provider = provider(&cli.script)?;
            let models = project.models()?;
            let results = agent::finalize_session(
                &project,
                provider.as_ref(),
                &models.profile(Role::Finalizer),
                file_cap,
                graphaudit_core::provider::DEFAULT_SCHEMA_RETRIES,
            )?;
            for r in &results {
                match &r.outcome {
                    FinalizeOutcome::Verdict { verdict } => println!("{} {verdict}", r.id),
                    FinalizeOutcome::Skipped { reason } => println!("{} skipped: {reason}", r.id),
                }
            }
        }
        Command::Report { include_open } => {
            let r = report::write_report(&project, include_open)?;
            print!("{}", r.markdown);
        }
        Command::Coverage => {
            let s = session::coverage_snapshot(&project, &CoverageConfig::default())?;
            println!("nodes {}/{}", s.visited_nodes, s.total_nodes);
            println!("cards {}/{}", s.visited_cards, s.total_cards);
            println!("p {:.4}", s.p);
            println!("lambda {:.4}", s.lambda);
            println!("phase {}", s.phase);
        }
        Command::Hypotheses {
            command: HypothesesCommand::List { remote },
        } => match remote.server {
            Some(url) => {
                let doc = runtime()?.block_on(Client::new(url).hypotheses())?;
                print_hypotheses(&doc);
            }
            None => print_hypotheses(&project.hypotheses().load()?),
        },
        Command::Inbox {
            command: InboxCommand::Add { text, remote },
        } => {
            let id = match remote.server {
                Some(url) => runtime()?.block_on(Client::new(url).add_note(&text))?.id,
                None => Inbox::new(project.inbox_dir(), project.files()).add(&text)?.0,
            };
            println!("{id}");
        }
        Command::Serve { port } => {
            let rt = runtime()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(graphaudit_server::localhost(port)).await?;
                println!("listening on http://{}", listener.local_addr()?);
                graphaudit_server::serve(project, listener).await
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
