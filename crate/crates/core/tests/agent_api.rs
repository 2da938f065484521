mod common;

use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use reqwest::Method;
use serde_json::{json, Value};

use flexbench::config::PropertySet;
use flexbench::plugins::{FaultProfile, InMemoryStore};

use common::{LocalAgent, Runtime};

fn agent(rt: &Runtime, props: &[(&str, &str)]) -> LocalAgent {
    let set = Arc::new(PropertySet::new());
    for (k, v) in props {
        set.set_property(*k, v);
    }
    let fault = FaultProfile {
        base_latency: Duration::from_millis(1),
        ..FaultProfile::default()
    };
    LocalAgent::start(rt, "api-test", set, Arc::new(InMemoryStore::new(fault))).unwrap()
}

#[test]
fn property_round_trip_and_clear() {
    let rt = Runtime::new();
    let a = agent(&rt, &[]);
    a.post("/properties", Some(json!({"name": "numReaders", "value": 3}))).unwrap();
    a.post("/properties", Some(json!({"name": "readEnabled", "value": false}))).unwrap();
    a.post("/properties", Some(json!({"name": "plugin.x.y", "value": "z"}))).unwrap();
    let p = a.properties().unwrap();
    assert_eq!(p["numReaders"], "3");
    assert_eq!(p["readEnabled"], "false");
    assert_eq!(p["plugin.x.y"], "z");
    a.post("/properties", Some(json!({"name": "plugin.x.y", "value": null}))).unwrap();
    assert!(!a.properties().unwrap().contains_key("plugin.x.y"));
}

#[test]
fn gets_are_idempotent() {
    let rt = Runtime::new();
    let a = agent(&rt, &[("numKeys", "50")]);
    let first: Value = a.get("/properties").unwrap();
    let _: Value = a.get("/status").unwrap();
    let _: Value = a.get("/stats").unwrap();
    let second: Value = a.get("/properties").unwrap();
    assert_eq!(first, second);
    let s1 = a.stats().unwrap();
    let s2 = a.stats().unwrap();
    assert_eq!(s1.total_ops(), 0);
    assert_eq!(s1.read, s2.read);
}

#[test]
fn invalid_requests_are_rejected_with_json_errors() {
    let rt = Runtime::new();
    let a = agent(&rt, &[]);
    let (code, body) = a
        .request(Method::POST, "/properties", Some(json!({"name": "numKeys", "value": "0"})))
        .unwrap();
    assert_eq!(code, 400);
    assert!(serde_json::from_str::<Value>(&body).unwrap()["error"].is_string());
    assert_eq!(a.properties().unwrap().get("numKeys"), None);

    let (code, _) = a.request(Method::POST, "/backfill", Some(json!({"begin": 1}))).unwrap();
    assert_eq!(code, 400);
    let (code, _) = a.request(Method::POST, "/workload/start?which=sideways", None).unwrap();
    assert_eq!(code, 400);
    let (code, _) = a.request(Method::GET, "/stats?slaMetric=p42", None).unwrap();
    assert_eq!(code, 400);
    let (code, body) = a.request(Method::GET, "/nope", None).unwrap();
    assert_eq!(code, 404);
    assert!(serde_json::from_str::<Value>(&body).unwrap()["error"].is_string());
}

#[test]
fn backfill_conflicts() {
    let rt = Runtime::new();
    let a = agent(&rt, &[("numKeys", "2000"), ("numWriters", "1")]);
    a.post("/backfill", Some(json!({"start": 0, "end": 2000}))).unwrap();
    let (code, _) = a.request(Method::POST, "/backfill", Some(json!({"start": 0, "end": 10}))).unwrap();
    assert_eq!(code, 409);
    let (code, _) = a.request(Method::POST, "/workload/start", None).unwrap();
    assert_eq!(code, 409);
    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        let st = a.status().unwrap();
        let b = st.engine.unwrap().backfill.unwrap();
        if b.done {
            assert_eq!(b.success, 2000);
            break;
        }
        assert!(Instant::now() < deadline, "backfill stuck at {}", b.completed());
        thread::sleep(Duration::from_millis(50));
    }
    let (code, _) = a.request(Method::POST, "/backfill", Some(json!({"start": 0, "end": 5000}))).unwrap();
    assert_eq!(code, 400);
    a.post("/workload/start", None).unwrap();
    let (code, _) = a.request(Method::POST, "/backfill", Some(json!({"start": 0, "end": 10}))).unwrap();
    assert_eq!(code, 409);
    a.post("/workload/stop", None).unwrap();
}

#[test]
fn tuner_lease_is_exclusive() {
    let rt = Runtime::new();
    let a = agent(&rt, &[]);
    let (code, _) = a
        .request(Method::POST, "/tuner/lease", Some(json!({"owner": "t1", "ttlSeconds": 60})))
        .unwrap();
    assert_eq!(code, 200);
    let (code, body) = a
        .request(Method::POST, "/tuner/lease", Some(json!({"owner": "t2"})))
        .unwrap();
    assert_eq!(code, 409, "{body}");
    let held: Value = a.get("/tuner/lease").unwrap();
    assert_eq!(held["owner"], "t1");
    let (code, _) = a.request(Method::DELETE, "/tuner/lease?owner=t1", None).unwrap();
    assert_eq!(code, 200);
    let (code, _) = a
        .request(Method::POST, "/tuner/lease", Some(json!({"owner": "t2"})))
        .unwrap();
    assert_eq!(code, 200);
}

#[test]
fn start_stop_and_reset_stats() {
    let rt = Runtime::new();
    let a = agent(&rt, &[("readRateLimit", "200"), ("writeRateLimit", "50")]);
    a.post("/workload/start?which=reads", None).unwrap();
    thread::sleep(Duration::from_millis(600));
    let st = a.status().unwrap().engine.unwrap();
    assert!(st.reads_running && !st.writes_running);
    a.post("/workload/stop?which=reads", None).unwrap();
    let s = a.stats().unwrap();
    assert!(s.read.total() > 0);
    assert_eq!(s.write.total(), 0);
    a.post("/stats/reset", None).unwrap();
    assert_eq!(a.stats().unwrap().total_ops(), 0);
}
