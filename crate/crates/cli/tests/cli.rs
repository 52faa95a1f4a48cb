use std::process::Command;

use ems_core::scenario::Scenario;

fn ems() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ems"))
}

fn short_mission(dir: &std::path::Path) -> std::path::PathBuf {
    let mut s = Scenario::default_mission();
    s.t_end = 34.0;
    let path = dir.join("short.json");
    std::fs::write(&path, s.to_json()).unwrap();
    path
}

#[test]
fn run_writes_trace_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = short_mission(dir.path());
    let (trace, metrics) = (dir.path().join("t.csv"), dir.path().join("m.json"));
    let out = ems()
        .args(["run", "--scenario"])
        .arg(&scenario)
        .arg("--trace")
        .arg(&trace)
        .arg("--metrics")
        .arg(&metrics)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(csv.lines().count(), 3402);
    assert!(csv.starts_with("t,"));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(m["balance_violations"], 0);
    assert!(m["final_e_es"].as_f64().unwrap() > 7.9);
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = short_mission(dir.path());
    assert_eq!(ems().args(["validate", "--scenario"]).arg(&good).status().unwrap().code(), Some(0));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, Scenario::default_mission().to_json().replace("\"e_initial\": 3.0", "\"e_initial\": 30.0")).unwrap();
    let out = ems().args(["validate", "--scenario"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/storage"));

    let missing = dir.path().join("none.json");
    assert_eq!(ems().args(["validate", "--scenario"]).arg(&missing).status().unwrap().code(), Some(1));
}

#[test]
fn infeasible_mission_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Scenario::default_mission();
    s.t_end = 60.0;
    s.events.retain(|e| e.t < 40.0);
    s.events.push(ems_core::MissionEvent {
        t: 40.0,
        action: ems_core::Action::SetPropulsion { target: 20.0, rate: 2.0 },
    });
    let path = dir.path().join("overload.json");
    std::fs::write(&path, s.to_json()).unwrap();
    let out = ems().args(["run", "--scenario"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("infeasible"));
}

#[test]
fn selftest_passes() {
    let out = ems().arg("selftest").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(text.lines().count() >= 4);
    assert!(text.lines().all(|l| l.starts_with("[PASS]")));
}

#[test]
fn serve_starts_a_session() {
    use std::io::{BufRead, BufReader, Read, Write};
    let mut child = ems()
        .args(["serve", "--port", "0", "--speed", "10"])
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let port = line.split(':').nth(2).and_then(|p| p.split(',').next()).unwrap().to_string();
    assert!(line.contains("session s1"), "{line}");
    let mut conn = std::net::TcpStream::connect(format!("127.0.0.1:{port}")).unwrap();
    write!(conn, "GET /sessions/s1/state HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = String::new();
    conn.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains("\"status\":\"running\""));
}
