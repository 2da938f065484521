use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::Parser;

use flexbench::config::PropertySet;
use flexbench::control::{agent, AgentState, DEFAULT_AGENT_PORT};
use flexbench::engine::Engine;
use flexbench::metrics::Metrics;
use flexbench::plugins::{parse_hosts, PluginDescriptor, PluginRegistry};

/// Load-generating node with an HTTP control API.
#[derive(Debug, Parser)]
#[command(name = "bench-agent", version)]
struct Args {
    /// Control API port; 0 picks a free port.
    #[arg(long, default_value_t = DEFAULT_AGENT_PORT)]
    port: u16,
    /// Address to bind and advertise.
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Driver for the system under test.
    #[arg(long, default_value = "inmemory")]
    plugin: String,
    /// Properties file, polled for changes.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Data store endpoints, `host:port[,host:port...]`.
    #[arg(long)]
    hosts: Option<String>,
    /// Base seed for worker random streams.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Instance id reported in status; defaults to `host:port`.
    #[arg(long)]
    instance_id: Option<String>,
    /// Runtime property override, `name=value`. Repeatable.
    #[arg(long = "set", value_name = "NAME=VALUE")]
    overrides: Vec<String>,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();

    let props = Arc::new(PropertySet::new());
    if let Some(path) = &args.config {
        props.load_file(path)?;
        props.spawn_file_poller();
    }
    for o in &args.overrides {
        let Some((name, value)) = o.split_once('=') else {
            bail!("--set expects NAME=VALUE, got `{o}`");
        };
        props.set_property(name.trim(), value.trim());
    }
    let hosts = match &args.hosts {
        Some(list) => parse_hosts(list).map_err(anyhow::Error::msg)?,
        None => Vec::new(),
    };

    let descriptor = PluginDescriptor::new(&args.plugin)
        .with_hosts(hosts)
        .with_properties(&props);
    let plugin = PluginRegistry::builtin()
        .init(&descriptor, &props)
        .with_context(|| format!("initializing plugin `{}`", args.plugin))?;
    let engine = Engine::new(plugin.clone(), props, Arc::new(Metrics::new()), args.seed)?;

    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port))
            .await
            .with_context(|| format!("binding {}:{}", args.host, args.port))?;
        let addr = listener.local_addr()?;
        let instance_id = args
            .instance_id
            .clone()
            .unwrap_or_else(|| format!("{}:{}", args.host, addr.port()));
        let state = AgentState::new(engine.clone(), instance_id, args.host.clone(), addr.port(), &args.plugin);
        println!("listening on http://{addr}");
        std::io::stdout().flush()?;
        agent::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        anyhow::Ok(())
    })?;

    engine.shutdown();
    plugin.shutdown();
    Ok(())
}
