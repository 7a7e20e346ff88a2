use std::net::SocketAddr;
use std::process::Command;
use std::thread;
use std::time::Duration;

use nodepower::api::SimNode;
use nodepower::worker::BusWorker;
use nodepower_core::bus::EventKind;
use nodepower_core::config::Config;
use nodepower_core::node::NodeSpec;
use serde_json::{json, Value};

struct Server {
    base: String,
    worker: BusWorker,
    agent: ureq::Agent,
}

fn start(config: Config) -> Server {
    let (tx, rx) = std::sync::mpsc::channel::<(SocketAddr, BusWorker)>();
    thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let (router, worker) = nodepower::prepare(&config).await.unwrap();
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send((listener.local_addr().unwrap(), worker)).unwrap();
            nodepower::serve(listener, router, std::future::pending())
                .await
                .unwrap();
        });
    });
    let (addr, worker) = rx.recv_timeout(Duration::from_secs(30)).unwrap();
    let agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into();
    Server {
        base: format!("http://{addr}"),
        worker,
        agent,
    }
}

fn config(addrs: &[u8]) -> Config {
    Config {
        nodes: addrs.iter().map(|&a| NodeSpec::new(a)).collect(),
        ..Config::default()
    }
}

impl Server {
    fn get(&self, path: &str) -> (u16, Value) {
        let mut r = self
            .agent
            .get(format!("{}{path}", self.base))
            .call()
            .unwrap();
        let status = r.status().as_u16();
        (status, r.body_mut().read_json().unwrap_or(Value::Null))
    }

    fn post(&self, path: &str, actor: Option<&str>, body: Value) -> (u16, Value) {
        let mut req = self.agent.post(format!("{}{path}", self.base));
        if let Some(a) = actor {
            req = req.header("X-Actor", a);
        }
        let mut r = req.send_json(&body).unwrap();
        let status = r.status().as_u16();
        (status, r.body_mut().read_json().unwrap_or(Value::Null))
    }

    fn sim_nodes(&self) -> Vec<SimNode> {
        serde_json::from_value(self.get("/sim/nodes").1).unwrap()
    }

    fn audit_len(&self) -> usize {
        self.get("/audit").1.as_array().unwrap().len()
    }
}

#[test]
fn power_off_acks_and_audits() {
    let s = start(config(&[1, 2, 3, 4, 5, 6, 7, 8]));
    let before = s.audit_len();
    let (status, body) = s.post("/nodes/5/power", Some("alice"), json!({"state": "off"}));
    assert_eq!(status, 200);
    assert_eq!(body, json!({"outcome": "acked"}));
    let node5 = s.sim_nodes().into_iter().find(|n| n.address == 5).unwrap();
    assert!(!node5.relay_on);
    let log = s.get("/audit?actor=alice").1;
    assert_eq!(s.audit_len(), before + 1);
    assert_eq!(log[0]["target"], 5);
    assert_eq!(log[0]["command"], "power_off");
}

#[test]
fn validation_errors() {
    let s = start(config(&[1]));
    let before = s.audit_len();
    for path in ["/nodes/300/power", "/nodes/0/power", "/nodes/abc/power"] {
        let (status, body) = s.post(path, None, json!({"state": "on"}));
        assert_eq!(status, 400, "{path}");
        assert_eq!(body["error"], "invalid-address");
    }
    let (status, body) = s.post("/nodes/1/power", None, json!({"state": "sideways"}));
    assert_eq!(status, 400);
    assert_eq!(body["error"], "invalid-body");
    let (status, body) = s.post("/bus/scan", None, json!({"from": 0, "to": 300}));
    assert_eq!(
        (status, body["error"].as_str()),
        (400, Some("invalid-range"))
    );
    let (status, body) = s.post("/blocks/missing/power", None, json!({"state": "on"}));
    assert_eq!(
        (status, body["error"].as_str()),
        (404, Some("unknown-block"))
    );
    // Requests rejected before reaching the bus leave no trace in the audit log.
    assert_eq!(s.audit_len(), before);
}

#[test]
fn absent_node_times_out_with_504() {
    let s = start(config(&[1]));
    let (status, body) = s.post("/nodes/200/power", None, json!({"state": "on"}));
    assert_eq!(status, 504);
    assert_eq!(body, json!({"outcome": "timeout"}));
    let (status, body) = s.get("/nodes/200/sensors");
    assert_eq!(status, 504);
    assert_eq!(body["error"], "timeout");
    let last = s
        .get("/audit")
        .1
        .as_array()
        .unwrap()
        .last()
        .cloned()
        .unwrap();
    assert_eq!(last["outcome"], "timeout");
    assert_eq!(last["actor"], "anonymous");
}

#[test]
fn node_list_matches_registry_after_scan() {
    let population = [2u8, 3, 11, 40];
    let s = start(Config {
        server: nodepower_core::config::ServerConfig {
            scan_on_start: false,
            ..Default::default()
        },
        ..config(&population)
    });
    assert_eq!(s.get("/nodes").1, json!([]));
    let (status, body) = s.post("/bus/scan", Some("op"), json!({"from": 1, "to": 60}));
    assert_eq!(status, 200);
    assert_eq!(body["responders"], json!(population));
    let listed = s.get("/nodes").1;
    let registry = serde_json::to_value(s.worker.registry().records().collect::<Vec<_>>()).unwrap();
    assert_eq!(listed, registry);
    let addrs: Vec<u64> = listed
        .as_array()
        .unwrap()
        .iter()
        .map(|n| n["address"].as_u64().unwrap())
        .collect();
    assert_eq!(addrs, vec![2, 3, 11, 40]);
}

#[test]
fn sensors_blocks_and_refresh() {
    let mut cfg = config(&[1, 2, 3]);
    cfg.nodes[1].temp_baseline = 280;
    cfg.nodes[1].humid_baseline = 550;
    let s = start(cfg);
    let (status, r) = s.get("/nodes/2/sensors");
    assert_eq!(status, 200);
    let t = r["temperature"].as_u64().unwrap();
    let h = r["humidity"].as_u64().unwrap();
    assert!((275..=285).contains(&t) && (545..=555).contains(&h), "{r}");

    let (status, block) = s.post(
        "/blocks",
        Some("op"),
        json!({"name": "alpha", "nodes": [1, 3]}),
    );
    assert_eq!(status, 201);
    assert_eq!(block, json!({"name": "alpha", "nodes": [1, 3]}));
    let (status, res) = s.post("/blocks/alpha/power", Some("op"), json!({"state": "on"}));
    assert_eq!(status, 200);
    assert_eq!(res["results"].as_array().unwrap().len(), 2);
    let relays: Vec<bool> = s.sim_nodes().iter().map(|n| n.relay_on).collect();
    assert_eq!(relays, vec![true, false, true]);
    assert_eq!(s.get("/nodes/3?refresh=true").1["last_status"], "on");
    assert_eq!(s.get("/blocks").1[0]["name"], "alpha");
}

#[test]
fn simulation_controls_are_audited() {
    let s = start(config(&[4, 6]));
    let before = s.audit_len();
    assert_eq!(
        s.post("/sim/nodes/0/unplug", Some("lab"), json!(null)).0,
        204
    );
    assert_eq!(
        s.post("/nodes/4/power", None, json!({"state": "on"})).0,
        504
    );
    assert_eq!(s.post("/sim/nodes/0/plug", Some("lab"), json!(null)).0, 204);
    let mut r = s
        .agent
        .put(format!("{}/sim/nodes/1/dip", s.base))
        .send_json(json!({"address": 7}))
        .unwrap();
    assert_eq!(r.status().as_u16(), 204);
    let _ = r.body_mut().read_to_string();
    assert_eq!(
        s.post("/nodes/6/power", None, json!({"state": "on"})).0,
        504
    );
    assert_eq!(
        s.post("/nodes/7/power", None, json!({"state": "on"})).0,
        200
    );
    assert_eq!(s.audit_len(), before + 6);
}

#[test]
fn concurrent_requests_are_serialized() {
    let s = start(config(&[1, 2, 3, 4, 5, 6, 7, 8]));
    let before = s.audit_len();
    thread::scope(|scope| {
        for a in 1..=8u8 {
            let s = &s;
            scope.spawn(move || {
                for i in 0..5 {
                    let state = if i % 2 == 0 { "on" } else { "off" };
                    let (status, _) = s.post(
                        &format!("/nodes/{a}/power"),
                        Some("t"),
                        json!({"state": state}),
                    );
                    assert_eq!(status, 200);
                }
            });
        }
    });
    assert_eq!(s.audit_len(), before + 40);
    let trace: Vec<Value> = serde_json::from_value(s.get("/bus/trace?limit=100000").1).unwrap();
    assert!(trace
        .iter()
        .all(|e| e["kind"] != EventKind::Collision.as_str()));
    assert!(s.sim_nodes().iter().all(|n| n.relay_on));
    let diag = s.get("/diagnostics").1;
    assert_eq!(diag["delivery"]["misdeliveries"], 0);
}

#[test]
fn cli_drives_a_running_server() {
    let s = start(config(&[3, 9]));
    let bin = env!("CARGO_BIN_EXE_nodepower");
    let run = |args: &[&str]| {
        Command::new(bin)
            .args(["--server", &s.base, "--actor", "cli-user"])
            .args(args)
            .env_remove("NODEPOWER_CONFIG")
            .output()
            .unwrap()
    };
    let out = run(&["power", "9", "on"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v, json!({"outcome": "acked"}));
    let out = run(&["power", "300", "on"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid-address"));
    let out = run(&["audit", "--by", "cli-user"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 1);
    let out = run(&["trace", "--limit", "3"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    let out = run(&["status"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
}
