//! External fault handlers over stdio and TCP, using the bundled reference
//! handler (`vmsim handler`).

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_vmsim");

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn run(config: &Path, set: &[String]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(["run", "-c", config.to_str().unwrap()]);
    for s in set {
        cmd.args(["--set", s]);
    }
    cmd.output().expect("spawn vmsim")
}

fn handler_set(endpoint: &str) -> Vec<String> {
    vec![format!("fault.handler=\"{endpoint}\""), "fault.timeout_ms=20000".into()]
}

fn policy_of(config: &Path) -> String {
    let v: Value = serde_json::from_str(&fs::read_to_string(config).unwrap()).unwrap();
    v["mm"]["policy"].as_str().unwrap_or("demand4k").to_string()
}

/// Bundled scenarios whose policy the reference handler implements.
fn handler_scenarios() -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(scenarios())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .filter(|p| matches!(policy_of(p).as_str(), "demand4k" | "thp_reserve"))
        .collect();
    v.sort();
    v
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn error_json(o: &Output) -> Value {
    let text = stderr(o);
    serde_json::from_str(text.lines().last().unwrap_or_default()).unwrap_or_else(|_| panic!("stderr: {text}"))
}

#[test]
fn exec_handler_reports_match_in_process() {
    let configs = handler_scenarios();
    assert!(configs.len() >= 4);
    for c in configs {
        let inproc = run(&c, &[]);
        assert_eq!(inproc.status.code(), Some(0), "{}: {}", c.display(), stderr(&inproc));
        let policy = if policy_of(&c) == "thp_reserve" { "thp" } else { "demand4k" };
        let ext = run(&c, &handler_set(&format!("exec:{BIN} handler --policy {policy}")));
        assert_eq!(ext.status.code(), Some(0), "{}: {}", c.display(), stderr(&ext));
        assert!(inproc.stdout == ext.stdout, "{}: exec report differs from in-process", c.display());
    }
}

#[test]
fn tcp_handler_report_matches_in_process() {
    let c = scenarios().join("thp_strided.json");
    let mut server = Command::new(BIN)
        .args(["handler", "--policy", "thp", "--tcp", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("address banner").to_string();
    let ext = run(&c, &handler_set(&format!("tcp:{addr}")));
    let status = server.wait().unwrap();
    assert_eq!(ext.status.code(), Some(0), "{}", stderr(&ext));
    assert!(status.success());
    let inproc = run(&c, &[]);
    assert!(inproc.stdout == ext.stdout, "tcp report differs from in-process");
}

#[test]
fn version_mismatch_aborts_setup() {
    let c = scenarios().join("demand4k_radix.json");
    let out = run(&c, &handler_set(&format!("exec:{BIN} handler --proto vfault/2")));
    assert_eq!(out.status.code(), Some(3));
    let e = error_json(&out);
    assert_eq!(e["exit_code"], 3);
    assert!(e["message"].as_str().unwrap().contains("vfault/2"), "{e}");
}

#[test]
fn dead_tcp_endpoint_fails_to_connect() {
    // Bind and drop to find a port nobody listens on.
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let c = scenarios().join("demand4k_radix.json");
    let out = run(&c, &handler_set(&format!("tcp:127.0.0.1:{port}")));
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["exit_code"], 3);
}

#[test]
fn missing_handler_program_fails_to_connect() {
    let c = scenarios().join("demand4k_radix.json");
    let out = run(&c, &handler_set("exec:/nonexistent/handler"));
    assert_eq!(out.status.code(), Some(3));
}

/// A scripted handler plus a config whose first event is a fault (the
/// access creates its own VMA, so no vma_alloc request precedes it).
fn script_handler(body: &str) -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("h.sh");
    fs::write(&p, body).unwrap();
    fs::write(dir.path().join("t.trace"), "M 1 R 0x40000000\nM 1 R 0x40001000\n").unwrap();
    fs::write(dir.path().join("c.json"), r#"{"trace":"t.trace"}"#).unwrap();
    let ep = format!("exec:sh {}", p.display());
    (dir, ep)
}

#[test]
fn malformed_response_aborts_the_run() {
    let (d, ep) = script_handler(
        "read hello\necho '{\"type\":\"hello\",\"proto\":\"vfault/1\"}'\nread req\necho '{\"re\":1,\"type\":\"fault_done\",'\nexec sleep 5\n",
    );
    let c = d.path().join("c.json");
    let out = run(&c, &handler_set(&ep));
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let e = error_json(&out);
    assert!(e["event"].is_u64(), "{e}");
}

#[test]
fn garbage_hello_aborts_setup() {
    let (_d, ep) = script_handler("read hello\necho 'not json'\nexec sleep 5\n");
    let out = run(&scenarios().join("demand4k_radix.json"), &handler_set(&ep));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn silent_handler_times_out() {
    let (_d, ep) = script_handler("read hello\necho '{\"type\":\"hello\",\"proto\":\"vfault/1\"}'\nexec sleep 30\n");
    let c = scenarios().join("demand4k_radix.json");
    let set = vec![format!("fault.handler=\"{ep}\""), "fault.timeout_ms=300".into()];
    let out = run(&c, &set);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn kill_action_aborts_with_ordinal() {
    let (d, ep) = script_handler(
        "read hello\necho '{\"type\":\"hello\",\"proto\":\"vfault/1\"}'\nread req\necho '{\"re\":1,\"type\":\"fault_done\",\"actions\":[{\"op\":\"kill\",\"reason\":\"segv\"}],\"handler_cycles\":0,\"touches\":[]}'\nexec sleep 5\n",
    );
    let c = d.path().join("c.json");
    let out = run(&c, &handler_set(&ep));
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let e = error_json(&out);
    assert_eq!(e["event"], 0);
    assert!(e["message"].as_str().unwrap().contains("segv"), "{e}");
}
