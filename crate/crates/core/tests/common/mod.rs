//! Helpers shared by integration tests: agents in-process and as
//! subprocesses, plus a tiny JSON server standing in for a registry.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::process::{Child, Command as Proc, Stdio};
use std::sync::Arc;
use std::time::Duration;

use flexbench::config::PropertySet;
use flexbench::control::{agent, AgentState, Health, NodeStatus, API_PREFIX};
use flexbench::engine::Engine;
use flexbench::metrics::{Metrics, StatsSnapshot};
use flexbench::plugins::Plugin;

pub struct Runtime {
    rt: tokio::runtime::Runtime,
}

impl Runtime {
    pub fn new() -> Self {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .expect("tokio runtime");
        Runtime { rt }
    }

    pub fn block_on<F: std::future::Future>(&self, f: F) -> F::Output {
        self.rt.handle().block_on(f)
    }

    pub fn handle(&self) -> tokio::runtime::Handle {
        self.rt.handle().clone()
    }
}

/// Blocking JSON client against one agent's API.
#[derive(Clone)]
pub struct Api {
    handle: tokio::runtime::Handle,
    client: reqwest::Client,
    base: String,
}

impl Api {
    pub fn new(handle: tokio::runtime::Handle, port: u16) -> Self {
        Api {
            handle,
            client: reqwest::Client::new(),
            base: format!("http://127.0.0.1:{port}{API_PREFIX}"),
        }
    }

    /// Returns the status code and body.
    pub fn request(&self, method: reqwest::Method, path: &str, body: Option<serde_json::Value>) -> Result<(u16, String), String> {
        let url = format!("{}{path}", self.base);
        self.handle.block_on(async {
            let mut req = self.client.request(method, &url).timeout(Duration::from_secs(10));
            if let Some(b) = body {
                req = req.json(&b);
            }
            let resp = req.send().await.map_err(|e| format!("{url}: {e}"))?;
            let code = resp.status().as_u16();
            Ok((code, resp.text().await.map_err(|e| e.to_string())?))
        })
    }

    pub fn get<T: serde::de::DeserializeOwned>(&self, path: &str) -> Result<T, String> {
        let (code, text) = self.request(reqwest::Method::GET, path, None)?;
        if code != 200 {
            return Err(format!("GET {path}: {code} {text}"));
        }
        serde_json::from_str(&text).map_err(|e| format!("GET {path}: {e}"))
    }

    pub fn post(&self, path: &str, body: Option<serde_json::Value>) -> Result<(), String> {
        let (code, text) = self.request(reqwest::Method::POST, path, body)?;
        if code != 200 {
            return Err(format!("POST {path}: {code} {text}"));
        }
        Ok(())
    }

    pub fn status(&self) -> Result<NodeStatus, String> {
        self.get("/status")
    }

    pub fn stats(&self) -> Result<StatsSnapshot, String> {
        self.get("/stats")
    }

    pub fn properties(&self) -> Result<BTreeMap<String, String>, String> {
        self.get("/properties")
    }
}

/// An agent served on the shared runtime; stops when dropped.
pub struct LocalAgent {
    pub api: Api,
    pub engine: Arc<Engine>,
    port: u16,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
}

impl std::ops::Deref for LocalAgent {
    type Target = Api;
    fn deref(&self) -> &Api {
        &self.api
    }
}

impl LocalAgent {
    pub fn start(rt: &Runtime, id: &str, props: Arc<PropertySet>, plugin: Arc<dyn Plugin>) -> Result<Self, String> {
        let engine = Engine::new(plugin, props, Arc::new(Metrics::new()), 7).map_err(|e| e.to_string())?;
        let listener = rt
            .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
            .map_err(|e| e.to_string())?;
        let port = listener.local_addr().map_err(|e| e.to_string())?.port();
        let state = AgentState::new(engine.clone(), id, "127.0.0.1", port, "inmemory");
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        rt.handle().spawn(agent::serve(listener, state, async {
            let _ = rx.await;
        }));
        Ok(LocalAgent {
            api: Api::new(rt.handle(), port),
            engine,
            port,
            stop: Some(tx),
        })
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    pub fn node(&self) -> NodeStatus {
        NodeStatus::unknown("", "127.0.0.1", self.port, Health::Up)
    }
}

impl Drop for LocalAgent {
    fn drop(&mut self) {
        self.engine.shutdown();
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
    }
}

/// A `bench-agent` child process; killed when dropped.
pub struct AgentProcess {
    pub id: String,
    child: Child,
    port: u16,
}

impl AgentProcess {
    pub fn spawn(id: &str, sets: &[&str]) -> Result<Self, String> {
        let mut cmd = Proc::new(env!("CARGO_BIN_EXE_bench-agent"));
        cmd.args(["--port", "0", "--instance-id", id]);
        for s in sets {
            cmd.args(["--set", s]);
        }
        let mut child = cmd
            .env("RUST_LOG", "warn")
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| format!("spawning bench-agent: {e}"))?;
        let stdout = child.stdout.take().expect("piped stdout");
        let mut line = String::new();
        BufReader::new(stdout)
            .read_line(&mut line)
            .map_err(|e| e.to_string())?;
        let port = line
            .trim()
            .rsplit(':')
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| format!("unexpected agent banner `{}`", line.trim()))?;
        Ok(AgentProcess {
            id: id.to_string(),
            child,
            port,
        })
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    pub fn node(&self) -> NodeStatus {
        NodeStatus::unknown(self.id.clone(), "127.0.0.1", self.port, Health::Up)
    }

    pub fn api(&self, rt: &Runtime) -> Api {
        Api::new(rt.handle(), self.port)
    }

    pub fn properties(&self, rt: &Runtime) -> Result<BTreeMap<String, String>, String> {
        self.api(rt).properties()
    }

    pub fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for AgentProcess {
    fn drop(&mut self) {
        self.kill();
    }
}

/// Serves `body` as JSON at `path`; returns the port.
pub fn serve_json(rt: &Runtime, path: &str, body: String) -> Result<u16, String> {
    let listener = rt
        .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
        .map_err(|e| e.to_string())?;
    let port = listener.local_addr().map_err(|e| e.to_string())?.port();
    let app = axum::Router::new().route(
        path,
        axum::routing::get(move || {
            let body = body.clone();
            async move { ([("content-type", "application/json")], body) }
        }),
    );
    rt.handle().spawn(async move {
        let _ = axum::serve(listener, app).await;
    });
    Ok(port)
}

/// `(VmRSS, VmHWM)` in kB.
pub fn proc_memory_kb(pid: u32) -> Result<(u64, u64), String> {
    let text = std::fs::read_to_string(format!("/proc/{pid}/status")).map_err(|e| e.to_string())?;
    let field = |name: &str| {
        text.lines()
            .find(|l| l.starts_with(name))
            .and_then(|l| l.split_whitespace().nth(1))
            .and_then(|v| v.parse::<u64>().ok())
            .ok_or_else(|| format!("{name} missing from /proc/{pid}/status"))
    };
    Ok((field("VmRSS:")?, field("VmHWM:")?))
}
