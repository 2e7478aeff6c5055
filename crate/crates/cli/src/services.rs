//! Long-running services and the client verbs.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde_json::json;
use tomen::clock::SystemClock;
use tomen::config::KvConfig;
use tomen::directory::EgressPolicy;
use tomen::net::{
    serve_directory, serve_echo, submit_direct, DirClient, EchoMode, GossipServer, GossipServerConfig, OnionProxy,
    RelayServer, RelayServerConfig, DEFAULT_TIMEOUT,
};
use tomen::txgossip::{SubmitReply, Transaction};

use crate::failure::Failure;
use crate::output::Output;
use crate::{ClientArgs, ClientVerb, EchoKind};

const DIR_KEYS: &[&str] = &["directory.address"];
const RELAY_KEYS: &[&str] = &[
    "directory.address",
    "relay.address",
    "relay.identity_seed",
    "relay.rng_seed",
    "relay.exit_ports",
    "relay.bandwidth",
    "relay.heartbeat_secs",
];
const GOSSIP_KEYS: &[&str] = &[
    "gossip.id",
    "gossip.submit_address",
    "gossip.peer_address",
    "gossip.peers",
];
const CLIENT_KEYS: &[&str] = &[
    "client.directory",
    "client.seed",
    "client.deterministic",
    "client.bind",
];

const DEFAULT_DIR: &str = "127.0.0.1:7000";

fn listening(out: &Output, service: &str, addr: SocketAddr) {
    out.emit(
        format!("{service} listening on {addr}"),
        json!({"event": "listening", "service": service, "addr": addr.to_string()}),
    );
}

pub fn dir(out: &Output, listen: Option<SocketAddr>, config: Option<PathBuf>) -> Result<(), Failure> {
    let from_file = match config {
        Some(p) => KvConfig::load(&p, DIR_KEYS)?.get("directory.address")?,
        None => None,
    };
    let addr = listen.or(from_file).unwrap_or_else(|| DEFAULT_DIR.parse().unwrap());
    let server = serve_directory(addr, Arc::new(SystemClock))?;
    listening(out, "directory", server.addr());
    server.wait();
    Ok(())
}

pub fn relay(out: &Output, path: &Path) -> Result<(), Failure> {
    let cfg = KvConfig::load(path, RELAY_KEYS)?;
    let ports: Vec<u16> = cfg.list("relay.exit_ports")?;
    let policy = if ports.is_empty() {
        EgressPolicy::ExitDisallowed
    } else {
        EgressPolicy::allow(ports)
    };
    let mut rc = RelayServerConfig::new(cfg.get_or("relay.address", "127.0.0.1:9001".parse().unwrap())?, policy);
    rc.identity_seed = cfg.get("relay.identity_seed")?;
    rc.rng_seed = cfg.get("relay.rng_seed")?;
    rc.bandwidth = cfg.get_or("relay.bandwidth", rc.bandwidth)?;
    rc.heartbeat_every = Duration::from_secs(cfg.get_or("relay.heartbeat_secs", 30)?);
    rc.directory = Some(cfg.get_or("directory.address", DEFAULT_DIR.parse().unwrap())?);
    let server = RelayServer::start(rc)?;
    let d = server.descriptor();
    out.emit(
        format!("relay {} listening on {} ({})", d.relay_id, server.addr(), d.egress_policy),
        json!({"event": "listening", "service": "relay", "addr": server.addr().to_string(), "relay_id": d.relay_id}),
    );
    server.wait();
    Ok(())
}

pub fn gossip(out: &Output, path: &Path) -> Result<(), Failure> {
    let cfg = KvConfig::load(path, GOSSIP_KEYS)?;
    let server = GossipServer::start(GossipServerConfig {
        node_id: cfg.get_or("gossip.id", "g1".to_string())?,
        submit_listen: cfg.get_or("gossip.submit_address", "127.0.0.1:8333".parse().unwrap())?,
        peer_listen: cfg.get_or("gossip.peer_address", "127.0.0.1:8334".parse().unwrap())?,
        peers: cfg.list("gossip.peers")?,
    })?;
    out.emit(
        format!("gossip submit on {} peers on {}", server.submit_addr(), server.peer_addr()),
        json!({
            "event": "listening",
            "service": "gossip",
            "submit": server.submit_addr().to_string(),
            "peer": server.peer_addr().to_string(),
        }),
    );
    server.wait();
    Ok(())
}

pub fn echo(out: &Output, listen: SocketAddr, kind: EchoKind) -> Result<(), Failure> {
    let mode = match kind {
        EchoKind::PeerAddr => EchoMode::PeerAddr,
        EchoKind::Bytes => EchoMode::Bytes,
    };
    let server = serve_echo(listen, mode)?;
    listening(out, "echo", server.addr());
    server.wait();
    Ok(())
}

struct ClientSetup {
    dir: SocketAddr,
    proxy: OnionProxy,
    bind: Option<std::net::IpAddr>,
}

fn client_setup(args: &ClientArgs) -> Result<ClientSetup, Failure> {
    let cfg = match &args.config {
        Some(p) => KvConfig::load(p, CLIENT_KEYS)?,
        None => KvConfig::parse("", CLIENT_KEYS)?,
    };
    let dir = match args.dir {
        Some(d) => d,
        None => cfg
            .get("client.directory")?
            .ok_or_else(|| Failure::Config("no directory: pass --dir or set client.directory".into()))?,
    };
    let deterministic = args.deterministic || cfg.get_or("client.deterministic", false)?;
    let seed = match args.seed.or(cfg.get("client.seed")?) {
        Some(s) => s,
        None if deterministic => 0,
        None => rand::random(),
    };
    let bind = args.bind.or(cfg.get("client.bind")?);
    Ok(ClientSetup {
        dir,
        proxy: OnionProxy::new(seed, bind, Arc::new(SystemClock)),
        bind,
    })
}

fn print_events(out: &Output, proxy: &OnionProxy) {
    for e in proxy.events() {
        out.event(serde_json::to_value(e).unwrap_or_default());
    }
}

pub fn client(out: &Output, args: ClientArgs) -> Result<(), Failure> {
    let setup = client_setup(&args)?;
    let result = client_verb(out, &setup, &args.verb);
    if result.is_err() {
        print_events(out, &setup.proxy);
    }
    result
}

fn client_verb(out: &Output, setup: &ClientSetup, verb: &ClientVerb) -> Result<(), Failure> {
    let ClientSetup { dir, proxy, bind } = setup;
    let directory = DirClient::new(*dir).from_ip(*bind);
    match verb {
        ClientVerb::Build { port } => {
            let circ = proxy.build_circuit(&directory.fetch()?, *port)?;
            print_events(out, proxy);
            let info = proxy.circuit(circ).expect("circuit just built");
            let path: Vec<String> = info.path.iter().map(ToString::to_string).collect();
            out.emit(format!("circuit {circ}: {}", path.join(" -> ")), json!({"event": "path", "path": path}));
        }
        ClientVerb::SendTx { payload_hex, to, direct } => {
            let payload =
                hex::decode(payload_hex).map_err(|e| Failure::Config(format!("--payload-hex: {e}")))?;
            let tx = Transaction::new(payload).map_err(|e| Failure::Config(format!("transaction: {e}")))?;
            let reply = if *direct {
                submit_direct(*to, &tx, *bind, DEFAULT_TIMEOUT)?
            } else {
                let circ = proxy.build_circuit(&directory.fetch()?, to.port())?;
                let reply = proxy.broadcast_via_circuit(circ, *to, &tx)?;
                print_events(out, proxy);
                reply
            };
            match reply {
                SubmitReply::Ack { txid, known } => out.emit(
                    format!("ack txid {txid}{}", if known { " (already known)" } else { "" }),
                    json!({"event": "ack", "txid": txid.to_hex(), "known": known, "direct": direct}),
                ),
                SubmitReply::Reject { reason } => return Err(Failure::Protocol(format!("rejected: {reason}"))),
            }
        }
        ClientVerb::Echo { target, message } => {
            let circ = proxy.build_circuit(&directory.fetch()?, target.port())?;
            let sid = proxy.open_stream(circ, *target)?;
            if let Some(m) = message {
                proxy.send(circ, sid, m.as_bytes())?;
            }
            let reply = proxy.recv_line(circ, sid)?;
            proxy.close_stream(circ, sid)?;
            print_events(out, proxy);
            let text = String::from_utf8_lossy(&reply).trim_end().to_string();
            out.emit(&text, json!({"event": "echo", "reply": text}));
        }
    }
    Ok(())
}
