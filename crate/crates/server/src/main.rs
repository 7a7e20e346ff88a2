use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use nodepower_core::bus::BusEvent;
use nodepower_core::config::{Config, CONFIG_ENV};
use serde_json::{json, Value};
use tokio::net::TcpListener;

#[derive(Parser)]
#[command(
    name = "nodepower",
    version,
    about = "Cluster node power control over a simulated RS-485 bus"
)]
struct Cli {
    /// Config file (TOML).
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Base URL of a running server. Defaults to the configured bind address.
    #[arg(long, global = true, env = "NODEPOWER_SERVER")]
    server: Option<String>,
    /// Name recorded in the audit log for mutating commands.
    #[arg(
        long,
        global = true,
        env = "NODEPOWER_ACTOR",
        default_value = "anonymous"
    )]
    actor: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum State {
    On,
    Off,
}

impl State {
    fn as_str(self) -> &'static str {
        match self {
            State::On => "on",
            State::Off => "off",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP API against the simulated bus.
    Serve {
        /// Overrides server.bind from the config.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Poll an address range and register responders.
    Scan {
        #[arg(long, default_value_t = 1)]
        from: u16,
        #[arg(long, default_value_t = 254)]
        to: u16,
    },
    /// Switch one node on or off.
    Power { address: u16, state: State },
    /// Switch every node at once with a broadcast frame.
    Broadcast { state: State },
    /// Show registered nodes, or one node.
    Status {
        address: Option<u16>,
        /// Query the node over the bus instead of reading the registry.
        #[arg(long)]
        refresh: bool,
    },
    /// Read temperature and humidity (tenths of a unit).
    Sensors { address: u16 },
    /// List, define or switch blocks of nodes.
    Blocks {
        #[command(subcommand)]
        action: Option<BlockAction>,
    },
    /// Query the audit log.
    Audit {
        /// RFC 3339 timestamp.
        #[arg(long)]
        since: Option<String>,
        #[arg(long)]
        until: Option<String>,
        /// Only entries by this actor.
        #[arg(long = "by")]
        by: Option<String>,
        /// Address, block name, "broadcast" or "from-to".
        #[arg(long)]
        target: Option<String>,
    },
    /// Print recent bus events.
    Trace {
        #[arg(long, default_value_t = 64)]
        limit: usize,
    },
}

#[derive(Subcommand)]
enum BlockAction {
    List,
    Define { name: String, addresses: Vec<u16> },
    Power { name: String, state: State },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match Config::resolve(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let result = match cli.command {
        Command::Serve { bind } => serve(config, bind),
        command => {
            let base = cli
                .server
                .clone()
                .unwrap_or_else(|| default_server_url(&config.server.bind));
            Client::new(base, cli.actor.clone()).dispatch(command)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn default_server_url(bind: &str) -> String {
    match bind.parse::<SocketAddr>() {
        Ok(addr) if addr.ip().is_unspecified() => format!("http://127.0.0.1:{}", addr.port()),
        _ => format!("http://{bind}"),
    }
}

fn serve(config: Config, bind: Option<String>) -> Result<(), String> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    runtime.block_on(async move {
        let bind = bind.unwrap_or_else(|| config.server.bind.clone());
        let (router, _worker) = nodepower::prepare(&config)
            .await
            .map_err(|e| e.to_string())?;
        let listener = TcpListener::bind(&bind)
            .await
            .map_err(|e| format!("bind-failure: {bind}: {e}"))?;
        let local = listener.local_addr().map_err(|e| e.to_string())?;
        tracing::info!(%local, "listening");
        nodepower::serve(listener, router, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| e.to_string())
    })
}

struct Client {
    agent: ureq::Agent,
    base: String,
    actor: String,
}

impl Client {
    fn new(base: String, actor: String) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Client {
            agent,
            base: base.trim_end_matches('/').to_string(),
            actor,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn finish(mut resp: ureq::http::Response<ureq::Body>) -> Result<Value, String> {
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        let body: Value = if text.is_empty() {
            Value::Null
        } else {
            serde_json::from_str(&text).unwrap_or(Value::String(text))
        };
        if status.is_success() {
            Ok(body)
        } else {
            Err(format!("{status}: {body}"))
        }
    }

    fn get(&self, path: &str, query: &[(&str, String)]) -> Result<Value, String> {
        let mut req = self.agent.get(self.url(path));
        for (k, v) in query {
            req = req.query(*k, v);
        }
        Client::finish(req.call().map_err(|e| e.to_string())?)
    }

    fn post(&self, path: &str, body: Value) -> Result<Value, String> {
        let resp = self
            .agent
            .post(self.url(path))
            .header("X-Actor", &self.actor)
            .send_json(&body)
            .map_err(|e| e.to_string())?;
        Client::finish(resp)
    }

    fn dispatch(&self, command: Command) -> Result<(), String> {
        let out = match command {
            Command::Serve { .. } => unreachable!("handled by main"),
            Command::Scan { from, to } => {
                self.post("/bus/scan", json!({"from": from, "to": to}))?
            }
            Command::Power { address, state } => self.post(
                &format!("/nodes/{address}/power"),
                json!({"state": state.as_str()}),
            )?,
            Command::Broadcast { state } => {
                self.post("/bus/broadcast", json!({"state": state.as_str()}))?
            }
            Command::Status { address: None, .. } => self.get("/nodes", &[])?,
            Command::Status {
                address: Some(a),
                refresh,
            } => self.get(&format!("/nodes/{a}"), &[("refresh", refresh.to_string())])?,
            Command::Sensors { address } => self.get(&format!("/nodes/{address}/sensors"), &[])?,
            Command::Blocks { action } => match action.unwrap_or(BlockAction::List) {
                BlockAction::List => self.get("/blocks", &[])?,
                BlockAction::Define { name, addresses } => {
                    self.post("/blocks", json!({"name": name, "nodes": addresses}))?
                }
                BlockAction::Power { name, state } => self.post(
                    &format!("/blocks/{name}/power"),
                    json!({"state": state.as_str()}),
                )?,
            },
            Command::Audit {
                since,
                until,
                by,
                target,
            } => {
                let query: Vec<(&str, String)> = [
                    ("since", since),
                    ("until", until),
                    ("actor", by),
                    ("target", target),
                ]
                .into_iter()
                .filter_map(|(k, v)| v.map(|v| (k, v)))
                .collect();
                self.get("/audit", &query)?
            }
            Command::Trace { limit } => {
                let events: Vec<BusEvent> = serde_json::from_value(
                    self.get("/bus/trace", &[("limit", limit.to_string())])?,
                )
                .map_err(|e| e.to_string())?;
                for e in events {
                    println!("{}", e.to_line());
                }
                return Ok(());
            }
        };
        println!(
            "{}",
            serde_json::to_string_pretty(&out).map_err(|e| e.to_string())?
        );
        Ok(())
    }
}
