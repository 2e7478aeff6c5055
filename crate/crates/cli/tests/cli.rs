use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use serde_json::Value;
use tomen::net::DirClient;
use tomen::txgossip::Txid;

const BIN: &str = env!("CARGO_BIN_EXE_tomen");

fn tomen(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_file(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::File::create(&p).unwrap().write_all(text.as_bytes()).unwrap();
    p.to_string_lossy().into_owned()
}

/// A long-running subcommand, killed on drop.
struct Service(Child);

impl Service {
    /// Start and wait for its first JSON line.
    fn start(args: &[&str]) -> (Service, Value) {
        let mut child = Command::new(BIN)
            .arg("--json")
            .args(args)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let out = child.stdout.take().unwrap();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut line = String::new();
            let _ = BufReader::new(out).read_line(&mut line);
            let _ = tx.send(line);
        });
        let line = rx.recv_timeout(Duration::from_secs(10)).expect("service did not start");
        let value = serde_json::from_str(&line).unwrap_or_else(|_| panic!("not json: {line:?} for {args:?}"));
        (Service(child), value)
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(code(&tomen(&["--no-such-flag"])), 1);
    assert_eq!(code(&tomen(&["sim"])), 1);
    assert_eq!(code(&tomen(&["--help"])), 0);
    assert_eq!(code(&tomen(&["relay", "--help"])), 0);
}

#[test]
fn config_errors_exit_two_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_file(dir.path(), "relay.conf", "relay.address = 127.0.0.1:0\nrelay.colour = blue\n");
    let o = tomen(&["relay", "--config", &cfg]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let o = tomen(&["relay", "--config", "/nonexistent/relay.conf"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn relay_with_unreachable_directory_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_file(
        dir.path(),
        "relay.conf",
        "relay.address = 127.0.22.1:0\ndirectory.address = 127.0.22.2:1\n",
    );
    let o = tomen(&["relay", "--config", &cfg]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("directory"), "{}", stderr(&o));
}

#[test]
fn port_in_use_exits_two() {
    let (_echo, ev) = Service::start(&["echo", "--listen", "127.0.23.1:0"]);
    let addr = ev["addr"].as_str().unwrap().to_string();
    let o = tomen(&["echo", "--listen", &addr]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn dir_serves_an_empty_consensus() {
    let (_dir, ev) = Service::start(&["dir", "--listen", "127.0.24.1:0"]);
    assert_eq!(ev["event"], "listening");
    let addr: SocketAddr = ev["addr"].as_str().unwrap().parse().unwrap();
    assert!(DirClient::new(addr).fetch().unwrap().descriptors.is_empty());
}

#[test]
fn end_to_end_send_tx_prints_the_txid() {
    let tmp = tempfile::tempdir().unwrap();
    let (_dir, ev) = Service::start(&["dir", "--listen", "127.0.25.1:0"]);
    let dir_addr = ev["addr"].as_str().unwrap().to_string();

    let gossip_cfg = write_file(
        tmp.path(),
        "gossip.conf",
        "gossip.id = g1\ngossip.submit_address = 127.0.25.50:8333\ngossip.peer_address = 127.0.25.50:8334\n",
    );
    let (_gossip, ev) = Service::start(&["gossip", "--config", &gossip_cfg]);
    let submit = ev["submit"].as_str().unwrap().to_string();

    let mut relays = Vec::new();
    for k in 1..=3 {
        let cfg = write_file(
            tmp.path(),
            &format!("relay{k}.conf"),
            &format!(
                "# relay {k}\nrelay.address = 127.0.25.{k}:0\nrelay.exit_ports = 8333\ndirectory.address = {dir_addr}\n"
            ),
        );
        let (svc, ev) = Service::start(&["relay", "--config", &cfg]);
        assert_eq!(ev["service"], "relay");
        relays.push(svc);
    }

    let o = tomen(&[
        "client",
        "--dir",
        &dir_addr,
        "--bind",
        "127.0.25.100",
        "send-tx",
        "--payload-hex",
        "636f66666565",
        "--to",
        &submit,
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let txid = Txid::of(b"coffee").to_hex();
    assert_eq!(stdout(&o).trim(), format!("ack txid {txid}"));

    let o = tomen(&[
        "--json", "client", "--dir", &dir_addr, "--deterministic", "send-tx", "--payload-hex", "636f66666565",
        "--to", &submit, "--direct",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let last: Value = serde_json::from_str(stdout(&o).lines().last().unwrap()).unwrap();
    assert_eq!(last["event"], "ack");
    assert_eq!(last["txid"], txid);
    assert_eq!(last["known"], true);

    let o = tomen(&["--json", "client", "--dir", &dir_addr, "--seed", "4", "build"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let events: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events[0]["event"], "circuit_built");
    assert_eq!(events.last().unwrap()["path"].as_array().unwrap().len(), 3);

    let o = tomen(&["client", "--dir", &dir_addr, "send-tx", "--payload-hex", "zz", "--to", &submit]);
    assert_eq!(code(&o), 2);
}

#[test]
fn sim_run_replay_and_link() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("t.jsonl");
    let p = path.to_string_lossy().into_owned();

    let o = tomen(&["sim", "run", "--seed", "9", "--out", &p]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("single-observer links: 0"));

    let o = tomen(&["sim", "replay", &p]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = tomen(&["--json", "sim", "link", &p, "--coalition", "guard,exit"]);
    assert_eq!(code(&o), 0);
    let last: Value = serde_json::from_str(stdout(&o).lines().last().unwrap()).unwrap();
    assert_eq!(last["linked"], last["transactions"]);

    let o = tomen(&["sim", "link", &p, "--coalition", "r1"]);
    assert!(stdout(&o).contains("0 links found by r1"), "{}", stdout(&o));

    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replacen("\"n_bytes\":512", "\"n_bytes\":511", 1)).unwrap();
    let o = tomen(&["sim", "replay", &p]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverges"), "{}", stderr(&o));
}

#[test]
fn sim_direct_mode_links_every_tx() {
    let o = tomen(&["sim", "run", "--mode", "direct", "--seed", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let line = stdout(&o).lines().find(|l| l.starts_with("single-observer links:")).unwrap().to_string();
    let n: usize = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(n >= 1);
}

#[test]
fn sim_rejects_two_relay_onion_before_running() {
    let o = tomen(&["sim", "run", "--relays", "2"]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).is_empty());
}

#[test]
fn sim_scenario_file_with_unknown_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_file(tmp.path(), "s.conf", "scenario.seed = 4\nnetwork.relais = 5\n");
    let o = tomen(&["sim", "run", "--config", &cfg]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn demo_echo_ip_verdict() {
    let o = tomen(&["--json", "demo", "echo-ip", "--runs", "3", "--seed", "10"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let events: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let verdict = events.last().unwrap();
    assert_eq!(verdict["event"], "verdict");
    assert_eq!(verdict["pass"], true);
}
