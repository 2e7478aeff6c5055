//! A relay listening for cell links.

use std::collections::HashMap;
use std::io::{ErrorKind, Read};
use std::net::{IpAddr, SocketAddr, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::Sender;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::dir::DirClient;
use super::{channel, connect_from, listen, write_loop, NetError, Out, Registry, ServerHandle, DEFAULT_TIMEOUT};
use crate::cellwire::{encode_cell, CELL_LEN};
use crate::clock::{Clock, SystemClock};
use crate::crypto::KeyPair;
use crate::directory::{EgressPolicy, RelayDescriptor};
use crate::relay::{ExtId, LinkId, Relay, RelayMetrics, RelayOutput};

#[derive(Debug, Clone)]
pub struct RelayServerConfig {
    pub listen: SocketAddr,
    /// Fixed identity key seed; a fresh random identity when `None`.
    pub identity_seed: Option<u64>,
    /// Seed for circuit ids and handshake ephemerals; random when `None`.
    pub rng_seed: Option<u64>,
    pub policy: EgressPolicy,
    pub bandwidth: u64,
    pub directory: Option<SocketAddr>,
    pub heartbeat_every: Duration,
}

impl RelayServerConfig {
    pub fn new(listen: SocketAddr, policy: EgressPolicy) -> Self {
        RelayServerConfig {
            listen,
            identity_seed: None,
            rng_seed: None,
            policy,
            bandwidth: 1_000_000,
            directory: None,
            heartbeat_every: Duration::from_secs(30),
        }
    }
}

struct State {
    relay: Relay,
    links: HashMap<LinkId, Sender<Out>>,
    exts: HashMap<ExtId, Sender<Out>>,
}

struct Shared {
    state: Mutex<State>,
    local_ip: IpAddr,
    registry: Registry,
}

pub struct RelayServer {
    shared: Arc<Shared>,
    descriptor: RelayDescriptor,
    handle: ServerHandle,
}

impl RelayServer {
    /// Bind, publish to the directory if one is configured, and start serving.
    pub fn start(cfg: RelayServerConfig) -> Result<Self, NetError> {
        let listener = listen(cfg.listen)?;
        let addr = listener.local_addr()?;
        let identity = match cfg.identity_seed {
            Some(seed) => KeyPair::generate(&mut ChaCha20Rng::seed_from_u64(seed)),
            None => KeyPair::generate(&mut ChaCha20Rng::from_entropy()),
        };
        let relay = Relay::new(identity, addr, cfg.policy.clone(), cfg.rng_seed.unwrap_or_else(rand::random));
        let descriptor = relay.descriptor(cfg.bandwidth, SystemClock.now_secs());

        if let Some(dir) = cfg.directory {
            DirClient::new(dir).from_ip(Some(addr.ip())).publish(&descriptor)?;
        }

        let shared = Arc::new(Shared {
            state: Mutex::new(State {
                relay,
                links: HashMap::new(),
                exts: HashMap::new(),
            }),
            local_ip: addr.ip(),
            registry: Registry::default(),
        });
        let s = shared.clone();
        let handle = ServerHandle::spawn(listener, shared.registry.clone(), move |stream, peer| {
            let (tx, rx) = channel();
            let link = {
                let mut st = s.state.lock().unwrap();
                let link = st.relay.accept_link(peer);
                st.links.insert(link, tx);
                link
            };
            let Ok(writer) = stream.try_clone() else { return };
            thread::spawn(move || write_loop(writer, rx));
            read_cells(&s, link, stream);
        })?;

        if let Some(dir) = cfg.directory {
            spawn_heartbeats(
                DirClient::new(dir).from_ip(Some(addr.ip())),
                descriptor.relay_id.clone(),
                cfg.heartbeat_every,
                handle.stop_flag(),
            );
        }
        log::info!("relay {} listening on {addr}", descriptor.relay_id);
        Ok(RelayServer {
            shared,
            descriptor,
            handle,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.handle.addr()
    }

    pub fn descriptor(&self) -> &RelayDescriptor {
        &self.descriptor
    }

    pub fn metrics(&self) -> RelayMetrics {
        self.shared.state.lock().unwrap().relay.metrics()
    }

    pub fn circuit_count(&self) -> usize {
        self.shared.state.lock().unwrap().relay.circuit_count()
    }

    pub fn wait(self) {
        self.handle.wait()
    }

    pub fn stop(self) {}
}

fn spawn_heartbeats(dir: DirClient, relay_id: String, every: Duration, stop: Arc<AtomicBool>) {
    thread::spawn(move || {
        let mut last = Instant::now();
        while !stop.load(Ordering::SeqCst) {
            thread::sleep(Duration::from_millis(100));
            if last.elapsed() >= every {
                last = Instant::now();
                if let Err(e) = dir.heartbeat(&relay_id) {
                    log::warn!("heartbeat failed: {e}");
                }
            }
        }
    });
}

fn read_cells(shared: &Arc<Shared>, link: LinkId, mut stream: TcpStream) {
    let mut buf = [0u8; CELL_LEN];
    while stream.read_exact(&mut buf).is_ok() {
        let mut st = shared.state.lock().unwrap();
        let obs = st.relay.handle_cell(link, &buf);
        log::trace!("{link:?}: {:?} {:?}", obs.command, obs.disposition);
        dispatch(shared, &mut st);
    }
    let mut st = shared.state.lock().unwrap();
    if st.links.remove(&link).is_some() {
        st.relay.link_closed(link);
        dispatch(shared, &mut st);
    }
}

fn read_external(shared: &Arc<Shared>, ext: ExtId, mut stream: TcpStream) {
    let mut buf = vec![0u8; 16 * 1024];
    loop {
        let n = match stream.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(_) => break,
        };
        let mut st = shared.state.lock().unwrap();
        st.relay.external_data(ext, &buf[..n]);
        dispatch(shared, &mut st);
    }
    let mut st = shared.state.lock().unwrap();
    if let Some(tx) = st.exts.remove(&ext) {
        let _ = tx.send(Out::Close);
        st.relay.external_closed(ext);
        dispatch(shared, &mut st);
    }
}

fn dispatch(shared: &Arc<Shared>, st: &mut State) {
    for ev in st.relay.take_events() {
        log::debug!("relay event: {ev:?}");
    }
    for out in st.relay.take_outputs() {
        match out {
            RelayOutput::SendCell { link, cell } => {
                if let (Some(tx), Ok(bytes)) = (st.links.get(&link), encode_cell(&cell)) {
                    let _ = tx.send(Out::Bytes(bytes.to_vec()));
                }
            }
            RelayOutput::CloseLink { link } => {
                if let Some(tx) = st.links.remove(&link) {
                    let _ = tx.send(Out::Close);
                }
            }
            RelayOutput::Connect { link, addr } => {
                let (tx, rx) = channel();
                st.links.insert(link, tx);
                let s = shared.clone();
                thread::spawn(move || match connect_from(Some(s.local_ip), addr, DEFAULT_TIMEOUT) {
                    Ok(stream) => {
                        s.registry.add(&stream);
                        let Ok(reader) = stream.try_clone() else { return };
                        let r = s.clone();
                        thread::spawn(move || read_cells(&r, link, reader));
                        write_loop(stream, rx);
                    }
                    Err(e) => {
                        log::debug!("link to {addr} failed: {e}");
                        let mut st = s.state.lock().unwrap();
                        st.links.remove(&link);
                        st.relay.link_failed(link);
                        dispatch(&s, &mut st);
                    }
                });
            }
            RelayOutput::ExternalConnect { ext, addr } => {
                let (tx, rx) = channel();
                st.exts.insert(ext, tx);
                let s = shared.clone();
                thread::spawn(move || match connect_from(Some(s.local_ip), addr, DEFAULT_TIMEOUT) {
                    Ok(stream) => {
                        s.registry.add(&stream);
                        let Ok(reader) = stream.try_clone() else { return };
                        {
                            let mut st = s.state.lock().unwrap();
                            st.relay.external_connected(ext);
                            dispatch(&s, &mut st);
                        }
                        let r = s.clone();
                        thread::spawn(move || read_external(&r, ext, reader));
                        write_loop(stream, rx);
                    }
                    Err(e) => {
                        log::debug!("exit connect to {addr} failed: {e}");
                        let mut st = s.state.lock().unwrap();
                        st.exts.remove(&ext);
                        st.relay.external_failed(ext);
                        dispatch(&s, &mut st);
                    }
                });
            }
            RelayOutput::ExternalSend { ext, bytes } => {
                if let Some(tx) = st.exts.get(&ext) {
                    let _ = tx.send(Out::Bytes(bytes));
                }
            }
            RelayOutput::ExternalClose { ext } => {
                if let Some(tx) = st.exts.remove(&ext) {
                    let _ = tx.send(Out::Close);
                }
            }
        }
    }
}
