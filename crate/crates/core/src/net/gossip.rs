//! A gossip node with a submit port and a peer port.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::{IpAddr, Shutdown, SocketAddr, TcpStream};
use std::sync::mpsc::Sender;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use super::{channel, connect_from, listen, write_loop, NetError, Out, Registry, ServerHandle, DEFAULT_TIMEOUT};
use crate::txgossip::{
    decode_hello, encode_hello, serialize_tx, FrameDecoder, GossipMetrics, GossipNode, GossipSend, SubmitLogEntry,
    SubmitReply, Transaction, Txid,
};

const PEER_CONNECT_ATTEMPTS: u32 = 50;
const PEER_RETRY: Duration = Duration::from_millis(100);

#[derive(Debug, Clone)]
pub struct GossipServerConfig {
    pub node_id: String,
    pub submit_listen: SocketAddr,
    pub peer_listen: SocketAddr,
    pub peers: Vec<SocketAddr>,
}

struct Shared {
    node: Mutex<GossipNode>,
    peers: Mutex<HashMap<SocketAddr, Sender<Out>>>,
    local_ip: IpAddr,
    registry: Registry,
}

pub struct GossipServer {
    shared: Arc<Shared>,
    submit: ServerHandle,
    peer: ServerHandle,
}

impl GossipServer {
    pub fn start(cfg: GossipServerConfig) -> Result<Self, NetError> {
        let peer_listener = listen(cfg.peer_listen)?;
        let submit_listener = listen(cfg.submit_listen)?;
        let peer_addr = peer_listener.local_addr()?;
        let registry = Registry::default();
        let shared = Arc::new(Shared {
            node: Mutex::new(GossipNode::new(cfg.node_id.clone(), peer_addr, cfg.peers)),
            peers: Mutex::new(HashMap::new()),
            local_ip: peer_addr.ip(),
            registry: registry.clone(),
        });

        let s = shared.clone();
        let peer = ServerHandle::spawn(peer_listener, registry.clone(), move |stream, _| serve_peer(&s, stream))?;
        let s = shared.clone();
        let submit = ServerHandle::spawn(submit_listener, registry, move |stream, from| {
            serve_submit(&s, stream, from)
        })?;
        log::info!(
            "gossip {} submit on {} peers on {}",
            cfg.node_id,
            submit.addr(),
            peer.addr()
        );
        Ok(GossipServer { shared, submit, peer })
    }

    pub fn submit_addr(&self) -> SocketAddr {
        self.submit.addr()
    }

    pub fn peer_addr(&self) -> SocketAddr {
        self.peer.addr()
    }

    pub fn mempool_txids(&self) -> Vec<Txid> {
        self.shared.node.lock().unwrap().mempool().keys().copied().collect()
    }

    pub fn submit_log(&self) -> Vec<SubmitLogEntry> {
        self.shared.node.lock().unwrap().submit_log().to_vec()
    }

    pub fn metrics(&self) -> GossipMetrics {
        self.shared.node.lock().unwrap().metrics()
    }

    pub fn wait(self) {
        let GossipServer { submit, peer: _peer, .. } = self;
        submit.wait();
    }

    pub fn stop(self) {}
}

fn serve_submit(shared: &Arc<Shared>, mut stream: TcpStream, from: SocketAddr) {
    let _ = stream.set_read_timeout(Some(DEFAULT_TIMEOUT));
    let mut frames = FrameDecoder::new();
    let mut buf = [0u8; 4096];
    let frame = loop {
        if let Some(f) = frames.next_frame() {
            break Some(f);
        }
        match stream.read(&mut buf) {
            Ok(0) | Err(_) => break None,
            Ok(n) => frames.push(&buf[..n]),
        }
    };
    let reply = match frame {
        Some(f) => {
            let (reply, sends) = shared.node.lock().unwrap().submit(from, &f);
            flood(shared, sends);
            reply
        }
        None => SubmitReply::Reject {
            reason: "truncated transaction".into(),
        },
    };
    let _ = stream.write_all(&reply.to_line());
    let _ = stream.shutdown(Shutdown::Write);
    // drain until the submitter hangs up so the reply is not lost to a reset
    while matches!(stream.read(&mut buf), Ok(n) if n > 0) {}
}

fn serve_peer(shared: &Arc<Shared>, mut stream: TcpStream) {
    let mut pending = Vec::new();
    let mut buf = [0u8; 4096];
    let from = loop {
        match decode_hello(&pending) {
            Some(Ok((addr, used))) => {
                pending.drain(..used);
                break addr;
            }
            Some(Err(e)) => {
                log::debug!("bad peer hello: {e}");
                return;
            }
            None => match stream.read(&mut buf) {
                Ok(0) | Err(_) => return,
                Ok(n) => pending.extend_from_slice(&buf[..n]),
            },
        }
    };
    let mut frames = FrameDecoder::new();
    frames.push(&pending);
    loop {
        while let Some(f) = frames.next_frame() {
            let sends = shared.node.lock().unwrap().on_gossip(from, &f);
            flood(shared, sends);
        }
        match stream.read(&mut buf) {
            Ok(0) | Err(_) => return,
            Ok(n) => frames.push(&buf[..n]),
        }
    }
}

fn flood(shared: &Arc<Shared>, sends: Vec<GossipSend>) {
    let mut peers = shared.peers.lock().unwrap();
    for GossipSend { to, bytes } in sends {
        let tx = peers.entry(to).or_insert_with(|| open_peer(shared, to));
        if tx.send(Out::Bytes(bytes.clone())).is_err() {
            let tx = open_peer(shared, to);
            let _ = tx.send(Out::Bytes(bytes));
            peers.insert(to, tx);
        }
    }
}

fn open_peer(shared: &Arc<Shared>, to: SocketAddr) -> Sender<Out> {
    let (tx, rx) = channel();
    let me = shared.node.lock().map(|n| n.peer_addr()).ok();
    let local_ip = shared.local_ip;
    let registry = shared.registry.clone();
    thread::spawn(move || {
        for _ in 0..PEER_CONNECT_ATTEMPTS {
            match connect_from(Some(local_ip), to, DEFAULT_TIMEOUT) {
                Ok(mut stream) => {
                    registry.add(&stream);
                    if let Some(me) = me {
                        if stream.write_all(&encode_hello(me)).is_err() {
                            return;
                        }
                    }
                    write_loop(stream, rx);
                    return;
                }
                Err(_) => thread::sleep(PEER_RETRY),
            }
        }
        log::warn!("gave up connecting to peer {to}");
    });
    tx
}

/// Hand a transaction straight to a gossip node's submit port.
pub fn submit_direct(
    target: SocketAddr,
    tx: &Transaction,
    local: Option<IpAddr>,
    timeout: Duration,
) -> Result<SubmitReply, NetError> {
    let mut stream = connect_from(local, target, timeout).map_err(|e| NetError::Unreachable {
        addr: target,
        message: e.to_string(),
    })?;
    stream.set_read_timeout(Some(timeout))?;
    stream.write_all(&serialize_tx(tx))?;
    let mut line = Vec::new();
    let mut buf = [0u8; 512];
    while !line.contains(&b'\n') {
        match stream.read(&mut buf)? {
            0 => break,
            n => line.extend_from_slice(&buf[..n]),
        }
    }
    let end = line.iter().position(|&b| b == b'\n').map_or(line.len(), |i| i + 1);
    SubmitReply::from_line(&line[..end]).map_err(NetError::Protocol)
}
