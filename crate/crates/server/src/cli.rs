use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context};
use claimflow::harness::{load_scripts, run_suite, run_suite_parallel, shipped_scripts};
use claimflow::messaging::console_adapter_loop;
use claimflow::pack::PackSet;
use claimflow::{ChatService, Language, ServiceConfig};
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "claimflow", version, about = "Smartphone damage claim chatbot")]
pub struct Cli {
    #[arg(long, global = true, env = "CLAIMFLOW_PORT", default_value_t = 8080)]
    pub port: u16,
    /// Content pack file or directory of packs.
    #[arg(long, global = true, env = "CLAIMFLOW_PACK")]
    pub pack: Option<PathBuf>,
    /// Directory for stored contexts and claims. In memory when unset.
    #[arg(long, global = true, env = "CLAIMFLOW_STORAGE")]
    pub storage: Option<PathBuf>,
    #[arg(long, global = true, env = "CLAIMFLOW_LANG", default_value = "de")]
    pub lang: Language,
    /// Overrides the fallback threshold of every pack.
    #[arg(long, global = true, env = "CLAIMFLOW_THRESHOLD")]
    pub threshold: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Runs the HTTP service.
    Serve,
    /// Talks to the bot on the terminal.
    Chat {
        #[arg(long, default_value = "console")]
        user: String,
    },
    /// Runs scripted conversations and prints a report.
    Simulate {
        /// Script file or directory. The shipped scripts when omitted.
        scripts: Option<PathBuf>,
        #[arg(long)]
        json: bool,
        /// Runs the scripts concurrently against one shared store.
        #[arg(long)]
        parallel: bool,
    },
    /// Checks content packs and exits nonzero on any violation.
    ValidateContent {
        /// Pack file or directory. Falls back to --pack, then the shipped packs.
        path: Option<PathBuf>,
    },
}

impl Cli {
    pub fn config(&self) -> anyhow::Result<ServiceConfig> {
        if let Some(p) = self.pack.as_ref().filter(|p| !p.exists()) {
            bail!("--pack {} does not exist", p.display());
        }
        if let Some(t) = self.threshold {
            if !(0.0..=1.0).contains(&t) {
                bail!("--threshold must be within 0..=1, got {t}");
            }
        }
        Ok(ServiceConfig {
            port: self.port,
            content_pack_path: self.pack.clone(),
            storage_path: self.storage.clone(),
            default_language: self.lang,
            fallback_threshold: self.threshold,
        })
    }
}

fn packs(path: Option<&Path>, threshold: Option<f64>) -> anyhow::Result<PackSet> {
    let mut packs = match path {
        Some(p) => PackSet::load(p)?,
        None => PackSet::shipped(),
    };
    if let Some(t) = threshold {
        packs = packs.with_threshold(t)?;
    }
    Ok(packs)
}

/// Runs a parsed command line. Returns the process exit status.
pub fn run(cli: Cli) -> anyhow::Result<i32> {
    let config = cli.config()?;
    match cli.command {
        Command::Serve => {
            let service = Arc::new(ChatService::from_config(&config)?);
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .context("cannot start runtime")?;
            runtime.block_on(serve(service, config.port))?;
            Ok(0)
        }
        Command::Chat { user } => {
            let service = ChatService::from_config(&config)?;
            let stdin = io::stdin();
            console_adapter_loop(&service, &user, stdin.lock(), io::stdout())?;
            Ok(0)
        }
        Command::Simulate {
            scripts,
            json,
            parallel,
        } => {
            let scripts = match scripts {
                Some(p) => load_scripts(&p)?,
                None => shipped_scripts(),
            };
            let packs = packs(config.content_pack_path.as_deref(), config.fallback_threshold)?;
            let started = Instant::now();
            let report = if parallel {
                run_suite_parallel(&scripts, &packs)?
            } else {
                run_suite(&scripts, &packs)?
            };
            if json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_text(Some(started.elapsed())));
            }
            Ok(if report.passed == report.scripts { 0 } else { 1 })
        }
        Command::ValidateContent { path } => {
            let path = path.or(config.content_pack_path);
            let set = packs(path.as_deref(), None)?;
            let languages: Vec<String> = set.languages().map(|l| l.to_string()).collect();
            println!("ok: {}", languages.join(", "));
            Ok(0)
        }
    }
}

pub async fn serve(service: Arc<ChatService>, port: u16) -> anyhow::Result<()> {
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("cannot listen on {addr}"))?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, crate::app(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
