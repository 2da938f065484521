use std::io::Write;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use flexbench::autotune::{run_autotune, HttpTarget, TunerConfig};
use flexbench::control::{
    discovery, ClusterSource, Command, Coordinator, FanoutError, PropertyUpdate, SlaQuery,
};
use flexbench::engine::Which;
use flexbench::metrics::{SlaMetric, SlaPolicy};

/// Cluster-wide control of bench agents.
#[derive(Debug, Parser)]
#[command(name = "bench-ctl", version)]
struct Args {
    /// Cluster name (resolved via BENCH_REGISTRY_URL), registry URL, or
    /// `host:port[,...]`.
    #[arg(long)]
    cluster: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Show discovered nodes and their health.
    Status,
    Start {
        #[arg(long, default_value = "both")]
        which: Which,
    },
    Stop {
        #[arg(long, default_value = "both")]
        which: Which,
    },
    Backfill {
        #[arg(long, default_value_t = 0)]
        start: u64,
        #[arg(long)]
        end: u64,
    },
    /// Set a property on every node.
    Set { name: String, value: String },
    /// Clear a runtime property override on every node.
    Unset { name: String },
    /// Aggregated statistics.
    Stats {
        #[command(flatten)]
        sla: SlaArgs,
    },
    ResetStats,
    /// Search for the highest rate meeting the SLA; prints JSON lines.
    Autotune {
        #[command(flatten)]
        sla: SlaArgs,
        /// Shorthand for `--sla-metric p99 --sla-threshold-ms <x>`.
        #[arg(long)]
        sla_p99_ms: Option<f64>,
        #[arg(long, default_value_t = 0.05)]
        violation: f64,
        /// Seconds per measured epoch.
        #[arg(long, default_value_t = 30.0)]
        epoch: f64,
        #[arg(long, default_value_t = 10.0)]
        warmup: f64,
        #[arg(long, default_value_t = 100.0)]
        initial_rate: f64,
        #[arg(long, default_value_t = 10_000.0)]
        max_rate: f64,
        #[arg(long, default_value_t = 1.25)]
        increase: f64,
        #[arg(long, default_value_t = 0.5)]
        backoff: f64,
        #[arg(long, default_value_t = 0.02)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.8)]
        read_fraction: f64,
        #[arg(long, default_value_t = 200)]
        max_epochs: usize,
    },
}

#[derive(Debug, clap::Args)]
struct SlaArgs {
    #[arg(long)]
    sla_metric: Option<SlaMetric>,
    #[arg(long)]
    sla_threshold_ms: Option<f64>,
    #[arg(long)]
    sla_window_seconds: Option<u32>,
}

impl SlaArgs {
    fn query(&self) -> SlaQuery {
        SlaQuery {
            sla_metric: self.sla_metric.map(|m| m.to_string()),
            sla_threshold_ms: self.sla_threshold_ms,
            sla_window_seconds: self.sla_window_seconds,
        }
    }
}

fn print_line(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    print_line(&serde_json::to_string_pretty(v)?)
}

#[tokio::main(flavor = "current_thread")]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Args::parse()).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

async fn run(args: Args) -> Result<ExitCode> {
    let coordinator = Coordinator::new();
    let source = ClusterSource::parse(&args.cluster)?;
    let view = discovery::discover(coordinator.client(), &source, None)
        .await
        .context("discovering cluster")?;

    let command = match args.cmd {
        Cmd::Status => {
            print_json(&view)?;
            return Ok(ExitCode::SUCCESS);
        }
        Cmd::Stats { sla } => {
            let stats = coordinator.aggregate_stats(&view, &sla.query()).await;
            print_json(&stats)?;
            return Ok(if stats.missing.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            });
        }
        Cmd::Autotune {
            sla,
            sla_p99_ms,
            violation,
            epoch,
            warmup,
            initial_rate,
            max_rate,
            increase,
            backoff,
            epsilon,
            read_fraction,
            max_epochs,
        } => {
            let mut policy = SlaPolicy::default();
            if let Some(ms) = sla_p99_ms {
                policy.metric = SlaMetric::P99;
                policy.threshold = Duration::from_secs_f64(ms / 1000.0);
            }
            if let Some(m) = sla.sla_metric {
                policy.metric = m;
            }
            if let Some(ms) = sla.sla_threshold_ms {
                policy.threshold = Duration::from_secs_f64(ms / 1000.0);
            }
            let epoch = Duration::from_secs_f64(epoch);
            policy.window_seconds = sla
                .sla_window_seconds
                .unwrap_or((epoch.as_secs_f64().round() as u32).max(1));
            let cfg = TunerConfig {
                initial_rate,
                max_rate,
                increase_factor: increase,
                backoff_factor: backoff,
                epoch,
                warmup: Duration::from_secs_f64(warmup),
                violation_threshold: violation,
                convergence_epsilon: epsilon,
                sla: policy,
                read_fraction,
                max_epochs,
            };
            let owner = format!("bench-ctl-{}", std::process::id());
            let target = HttpTarget::new(coordinator, &view, owner);
            let report = run_autotune(&target, &cfg, |r| {
                let _ = print_line(&serde_json::to_string(r).expect("serializable"));
            })
            .await?;
            let summary = report.to_json_lines();
            print_line(summary.lines().last().unwrap_or_default())?;
            return Ok(if report.aborted.is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            });
        }
        Cmd::Start { which } => Command::Start(which),
        Cmd::Stop { which } => Command::Stop(which),
        Cmd::Backfill { start, end } => Command::Backfill { start, end },
        Cmd::Set { name, value } => Command::SetProperty(PropertyUpdate {
            name,
            value: Some(value),
        }),
        Cmd::Unset { name } => Command::SetProperty(PropertyUpdate { name, value: None }),
        Cmd::ResetStats => Command::ResetStats,
    };

    match coordinator.fanout(&view, &command).await {
        Ok(report) => {
            print_json(&report)?;
            Ok(if report.failed().is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            })
        }
        Err(FanoutError::AllFailed(report)) => {
            print_json(&report)?;
            eprintln!("error: all nodes failed");
            Ok(ExitCode::FAILURE)
        }
        Err(e) => Err(e.into()),
    }
}
