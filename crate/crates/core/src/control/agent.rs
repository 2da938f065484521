//! HTTP control agent for one node.

use std::collections::BTreeMap;
use std::future::Future;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    sla_policy, validate_update, Ack, BackfillRequest, ErrorBody, Health, LeaseRequest, NodeStatus,
    PropertyUpdate, SlaQuery, API_PREFIX,
};
use crate::config::PropertySet;
use crate::engine::{Engine, EngineError, Which};

pub const DEFAULT_LEASE_TTL: Duration = Duration::from_secs(300);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TunerLease {
    pub owner: String,
    pub expires_in_ms: u64,
}

struct Lease {
    owner: String,
    expires: Instant,
}

pub struct AgentState {
    pub engine: Arc<Engine>,
    pub instance_id: String,
    pub host: String,
    pub port: u16,
    pub plugin_name: String,
    lease: Mutex<Option<Lease>>,
}

impl AgentState {
    pub fn new(
        engine: Arc<Engine>,
        instance_id: impl Into<String>,
        host: impl Into<String>,
        port: u16,
        plugin_name: impl Into<String>,
    ) -> Arc<Self> {
        Arc::new(AgentState {
            engine,
            instance_id: instance_id.into(),
            host: host.into(),
            port,
            plugin_name: plugin_name.into(),
            lease: Mutex::new(None),
        })
    }

    fn props(&self) -> &Arc<PropertySet> {
        self.engine.properties()
    }

    pub fn node_status(&self) -> NodeStatus {
        let engine = self.engine.status();
        NodeStatus {
            instance_id: self.instance_id.clone(),
            host: self.host.clone(),
            port: self.port,
            health: Health::Up,
            phase: Some(engine.phase),
            plugin_name: Some(self.plugin_name.clone()),
            engine: Some(engine),
        }
    }

    /// Grants or renews the tuner lease. A different live owner gets `Err`
    /// with the current holder.
    pub fn acquire_lease(&self, owner: &str, ttl: Duration) -> Result<TunerLease, TunerLease> {
        let now = Instant::now();
        let mut lease = self.lease.lock();
        if let Some(l) = lease.as_ref() {
            if l.owner != owner && l.expires > now {
                return Err(TunerLease {
                    owner: l.owner.clone(),
                    expires_in_ms: (l.expires - now).as_millis() as u64,
                });
            }
        }
        *lease = Some(Lease {
            owner: owner.to_string(),
            expires: now + ttl,
        });
        Ok(TunerLease {
            owner: owner.to_string(),
            expires_in_ms: ttl.as_millis() as u64,
        })
    }

    /// Releases the lease if `owner` holds it.
    pub fn release_lease(&self, owner: &str) -> bool {
        let mut lease = self.lease.lock();
        if lease.as_ref().is_some_and(|l| l.owner == owner) {
            *lease = None;
            true
        } else {
            false
        }
    }

    pub fn current_lease(&self) -> Option<TunerLease> {
        let now = Instant::now();
        self.lease.lock().as_ref().filter(|l| l.expires > now).map(|l| TunerLease {
            owner: l.owner.clone(),
            expires_in_ms: (l.expires - now).as_millis() as u64,
        })
    }
}

pub struct ApiError(StatusCode, String);

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        ApiError(StatusCode::BAD_REQUEST, msg.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let code = match e {
            EngineError::Busy(_) => StatusCode::CONFLICT,
            EngineError::Range { .. } | EngineError::Workload(_) => StatusCode::BAD_REQUEST,
        };
        ApiError(code, e.to_string())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid body: {e}")))
}

fn ack() -> Json<Ack> {
    Json(Ack {
        ok: true,
        message: None,
    })
}

#[derive(Debug, Deserialize)]
struct WhichQuery {
    which: Option<String>,
}

fn which_of(q: &WhichQuery) -> Result<Which, ApiError> {
    match q.which.as_deref() {
        None => Ok(Which::Both),
        Some(w) => w.parse().map_err(ApiError::bad_request),
    }
}

#[derive(Debug, Deserialize)]
struct OwnerQuery {
    owner: String,
}

/// The agent's routes, all under `/api/v1`.
pub fn router(state: Arc<AgentState>) -> Router {
    let api = Router::new()
        .route("/status", get(status))
        .route("/workload/start", post(start))
        .route("/workload/stop", post(stop))
        .route("/backfill", post(backfill))
        .route("/stats", get(stats))
        .route("/stats/reset", post(reset_stats))
        .route("/properties", get(get_properties).post(set_property))
        .route("/tuner/lease", get(get_lease).post(take_lease).delete(drop_lease));
    Router::new()
        .nest(API_PREFIX, api)
        .fallback(not_found)
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AgentState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

async fn not_found() -> ApiError {
    ApiError(StatusCode::NOT_FOUND, "no such endpoint".into())
}

async fn status(State(s): State<Arc<AgentState>>) -> Json<NodeStatus> {
    Json(s.node_status())
}

async fn start(State(s): State<Arc<AgentState>>, Query(q): Query<WhichQuery>) -> ApiResult<Ack> {
    let which = which_of(&q)?;
    let engine = s.engine.clone();
    tokio::task::spawn_blocking(move || engine.start(which))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(ack())
}

async fn stop(State(s): State<Arc<AgentState>>, Query(q): Query<WhichQuery>) -> ApiResult<Ack> {
    let which = which_of(&q)?;
    let engine = s.engine.clone();
    tokio::task::spawn_blocking(move || engine.stop(which))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(ack())
}

async fn backfill(State(s): State<Arc<AgentState>>, body: Bytes) -> ApiResult<Ack> {
    let req: BackfillRequest = parse_body(&body)?;
    s.engine.backfill(req.start, req.end)?;
    Ok(ack())
}

async fn stats(
    State(s): State<Arc<AgentState>>,
    Query(q): Query<SlaQuery>,
) -> ApiResult<crate::metrics::StatsSnapshot> {
    let policy = sla_policy(&s.props().effective_map(), &q).map_err(ApiError::bad_request)?;
    Ok(Json(s.engine.metrics().snapshot_with(&policy)))
}

async fn reset_stats(State(s): State<Arc<AgentState>>) -> Json<Ack> {
    s.engine.metrics().reset();
    ack()
}

async fn get_properties(State(s): State<Arc<AgentState>>) -> Json<BTreeMap<String, String>> {
    Json(s.props().effective_map())
}

/// Accepts string, number or boolean values (and `null` to clear).
#[derive(Debug, Deserialize)]
struct RawUpdate {
    name: String,
    value: serde_json::Value,
}

async fn set_property(State(s): State<Arc<AgentState>>, body: Bytes) -> ApiResult<Ack> {
    let raw: RawUpdate = parse_body(&body)?;
    let value = match raw.value {
        serde_json::Value::Null => None,
        serde_json::Value::String(v) => Some(v),
        serde_json::Value::Number(n) => Some(n.to_string()),
        serde_json::Value::Bool(b) => Some(b.to_string()),
        other => return Err(ApiError::bad_request(format!("unsupported value {other}"))),
    };
    let update = PropertyUpdate {
        name: raw.name,
        value,
    };
    validate_update(s.props(), &update).map_err(ApiError::bad_request)?;
    let props = s.props().clone();
    // Property watchers may resize worker pools; keep that off the reactor.
    tokio::task::spawn_blocking(move || match update.value {
        Some(v) => props.set_property(update.name, v),
        None => props.clear_property(&update.name),
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(ack())
}

async fn get_lease(State(s): State<Arc<AgentState>>) -> Json<Option<TunerLease>> {
    Json(s.current_lease())
}

async fn take_lease(State(s): State<Arc<AgentState>>, body: Bytes) -> Result<Json<TunerLease>, ApiError> {
    let req: LeaseRequest = parse_body(&body)?;
    if req.owner.is_empty() {
        return Err(ApiError::bad_request("owner must not be empty"));
    }
    let ttl = req
        .ttl_seconds
        .map(Duration::from_secs)
        .unwrap_or(DEFAULT_LEASE_TTL);
    s.acquire_lease(&req.owner, ttl).map(Json).map_err(|held| {
        ApiError(
            StatusCode::CONFLICT,
            format!("tuner lease held by `{}`", held.owner),
        )
    })
}

async fn drop_lease(State(s): State<Arc<AgentState>>, Query(q): Query<OwnerQuery>) -> Json<Ack> {
    let released = s.release_lease(&q.owner);
    Json(Ack {
        ok: released,
        message: (!released).then(|| "lease not held by this owner".to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Metrics;
    use crate::plugins::{FaultProfile, InMemoryStore};

    fn state() -> Arc<AgentState> {
        let props = Arc::new(PropertySet::new());
        let engine = Engine::new(
            Arc::new(InMemoryStore::new(FaultProfile::default())),
            props,
            Arc::new(Metrics::new()),
            1,
        )
        .unwrap();
        AgentState::new(engine, "node-a", "127.0.0.1", 1, "inmemory")
    }

    #[test]
    fn lease_is_exclusive_until_released() {
        let s = state();
        assert!(s.acquire_lease("t1", Duration::from_secs(60)).is_ok());
        assert!(s.acquire_lease("t1", Duration::from_secs(60)).is_ok());
        assert_eq!(s.acquire_lease("t2", Duration::from_secs(60)).unwrap_err().owner, "t1");
        assert!(!s.release_lease("t2"));
        assert!(s.release_lease("t1"));
        assert!(s.acquire_lease("t2", Duration::from_secs(60)).is_ok());
    }

    #[test]
    fn expired_lease_can_be_taken() {
        let s = state();
        s.acquire_lease("t1", Duration::ZERO).unwrap();
        assert!(s.current_lease().is_none());
        assert!(s.acquire_lease("t2", Duration::from_secs(1)).is_ok());
    }

    #[test]
    fn status_reports_up_and_idle() {
        let st = state().node_status();
        assert_eq!(st.health, Health::Up);
        assert_eq!(st.phase, Some(crate::engine::Phase::Idle));
        assert_eq!(st.plugin_name.as_deref(), Some("inmemory"));
    }
}
