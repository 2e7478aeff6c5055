//! A blocking Onion Proxy over real sockets.

use std::collections::HashMap;
use std::io::Read;
use std::net::{IpAddr, SocketAddr, TcpStream};
use std::sync::mpsc::Sender;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use super::{channel, connect_from, write_loop, NetError, Out, Registry, DEFAULT_TIMEOUT};
use crate::cellwire::{encode_cell, CELL_LEN};
use crate::client::{
    CircHandle, CircuitInfo, CircuitState, ClientEvent, ClientMetrics, ClientOutput, OnionClient, StreamState,
};
use crate::clock::Clock;
use crate::directory::{Consensus, PathConstraints, RelayDescriptor};
use crate::relay::LinkId;
use crate::txgossip::{serialize_tx, SubmitReply, Transaction};

struct State {
    client: OnionClient,
    links: HashMap<LinkId, Sender<Out>>,
    log: Vec<ClientEvent>,
    /// Bytes already taken from the client but not yet handed to the caller.
    pending: HashMap<(CircHandle, u16), Vec<u8>>,
}

struct Shared {
    state: Mutex<State>,
    changed: Condvar,
    local_ip: Option<IpAddr>,
    registry: Registry,
}

pub struct OnionProxy {
    shared: Arc<Shared>,
    clock: Arc<dyn Clock>,
    timeout: Duration,
}

impl OnionProxy {
    /// `local_ip` fixes the source address of links to guards.
    pub fn new(seed: u64, local_ip: Option<IpAddr>, clock: Arc<dyn Clock>) -> Self {
        OnionProxy {
            shared: Arc::new(Shared {
                state: Mutex::new(State {
                    client: OnionClient::new(seed),
                    links: HashMap::new(),
                    log: Vec::new(),
                    pending: HashMap::new(),
                }),
                changed: Condvar::new(),
                local_ip,
                registry: Registry::default(),
            }),
            clock,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.shared.state.lock().unwrap()
    }

    /// Block until `check` yields a value or the timeout passes.
    fn wait_for<R>(&self, what: &str, mut check: impl FnMut(&mut State) -> Option<R>) -> Result<R, NetError> {
        let deadline = Instant::now() + self.timeout;
        let mut st = self.lock();
        loop {
            if let Some(r) = check(&mut st) {
                return Ok(r);
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(NetError::Timeout(what.to_string()));
            }
            st = self.shared.changed.wait_timeout(st, left).unwrap().0;
        }
    }

    /// Every client event so far, oldest first.
    pub fn events(&self) -> Vec<ClientEvent> {
        self.lock().log.clone()
    }

    pub fn metrics(&self) -> ClientMetrics {
        self.lock().client.metrics()
    }

    pub fn circuit(&self, circ: CircHandle) -> Option<CircuitInfo> {
        self.lock().client.circuit(circ)
    }

    pub fn build_circuit(&self, consensus: &Consensus, target_port: u16) -> Result<CircHandle, NetError> {
        let constraints = PathConstraints::new(target_port).map_err(crate::client::ClientError::from)?;
        let now = self.clock.now_secs();
        let circ = {
            let mut st = self.lock();
            let circ = st.client.build_circuit(consensus, &constraints, now)?;
            dispatch(&self.shared, &mut st);
            circ
        };
        self.await_built(circ)
    }

    pub fn build_circuit_on(&self, path: [RelayDescriptor; 3]) -> Result<CircHandle, NetError> {
        let now = self.clock.now_secs();
        let circ = {
            let mut st = self.lock();
            let circ = st.client.build_circuit_on(path, now)?;
            dispatch(&self.shared, &mut st);
            circ
        };
        self.await_built(circ)
    }

    fn await_built(&self, circ: CircHandle) -> Result<CircHandle, NetError> {
        let outcome = self.wait_for("circuit build", |st| match st.client.circuit(circ).map(|c| c.state) {
            Some(CircuitState::Open) => Some(Ok(circ)),
            Some(CircuitState::Building) => None,
            _ => Some(Err(failure_of(&st.log, circ))),
        });
        match outcome {
            Ok(r) => r,
            Err(e) => {
                self.destroy_circuit(circ);
                Err(e)
            }
        }
    }

    /// The newest circuit still allowed to take new streams.
    pub fn eligible_circuit(&self) -> Option<CircHandle> {
        self.lock().client.eligible_circuit(self.clock.now_secs())
    }

    pub fn rotation_check(&self) {
        let now = self.clock.now_secs();
        let mut st = self.lock();
        st.client.rotation_check(now);
        dispatch(&self.shared, &mut st);
    }

    pub fn destroy_circuit(&self, circ: CircHandle) {
        let mut st = self.lock();
        st.client.destroy_circuit(circ);
        dispatch(&self.shared, &mut st);
    }

    pub fn open_stream(&self, circ: CircHandle, target: SocketAddr) -> Result<u16, NetError> {
        let (sid, from) = {
            let mut st = self.lock();
            let from = st.log.len();
            let sid = st.client.open_stream(circ, target)?;
            dispatch(&self.shared, &mut st);
            (sid, from)
        };
        self.wait_for("stream to connect", |st| {
            // the target may answer and hang up before we get to look
            let connected = st.log[from..].iter().any(
                |e| matches!(e, ClientEvent::StreamConnected { circ: c, stream_id } if *c == circ && *stream_id == sid),
            );
            match st.client.stream_state(circ, sid) {
                _ if connected => Some(Ok(sid)),
                Some(StreamState::Opening) => None,
                Some(StreamState::Connected) => Some(Ok(sid)),
                Some(StreamState::Ended(reason)) => Some(Err(NetError::Stream(reason))),
                None => Some(Err(NetError::Stream(crate::client::REASON_CIRCUIT_DESTROYED.into()))),
            }
        })?
    }

    pub fn send(&self, circ: CircHandle, sid: u16, bytes: &[u8]) -> Result<(), NetError> {
        let mut st = self.lock();
        st.client.send(circ, sid, bytes)?;
        dispatch(&self.shared, &mut st);
        Ok(())
    }

    /// Next chunk of stream data; empty once the stream has ended and everything was read.
    pub fn recv(&self, circ: CircHandle, sid: u16) -> Result<Vec<u8>, NetError> {
        self.wait_for("stream data", |st| {
            let mut data = st.pending.remove(&(circ, sid)).unwrap_or_default();
            data.extend(st.client.take_received(circ, sid));
            if !data.is_empty() {
                return Some(data);
            }
            match st.client.stream_state(circ, sid) {
                Some(StreamState::Connected | StreamState::Opening) => None,
                _ => Some(Vec::new()),
            }
        })
    }

    /// Read until `n` bytes arrived or the stream ended.
    pub fn recv_exact_or_end(&self, circ: CircHandle, sid: u16, n: usize) -> Result<Vec<u8>, NetError> {
        let mut out = Vec::new();
        while out.len() < n {
            let chunk = self.recv(circ, sid)?;
            if chunk.is_empty() {
                break;
            }
            out.extend(chunk);
        }
        if out.len() > n {
            let rest = out.split_off(n);
            self.lock().pending.insert((circ, sid), rest);
        }
        Ok(out)
    }

    /// Read up to and including the first newline, or to the end of the stream.
    pub fn recv_line(&self, circ: CircHandle, sid: u16) -> Result<Vec<u8>, NetError> {
        let mut out = Vec::new();
        while !out.contains(&b'\n') {
            let chunk = self.recv(circ, sid)?;
            if chunk.is_empty() {
                return Ok(out);
            }
            out.extend(chunk);
        }
        let end = out.iter().position(|&b| b == b'\n').unwrap() + 1;
        let rest = out.split_off(end);
        if !rest.is_empty() {
            self.lock().pending.insert((circ, sid), rest);
        }
        Ok(out)
    }

    pub fn close_stream(&self, circ: CircHandle, sid: u16) -> Result<(), NetError> {
        let mut st = self.lock();
        st.pending.remove(&(circ, sid));
        if matches!(st.client.stream_state(circ, sid), Some(StreamState::Ended(_)) | None) {
            return Ok(());
        }
        st.client.close_stream(circ, sid)?;
        dispatch(&self.shared, &mut st);
        Ok(())
    }

    /// Submit `tx` to a gossip node through the circuit's exit.
    pub fn broadcast_via_circuit(
        &self,
        circ: CircHandle,
        target: SocketAddr,
        tx: &Transaction,
    ) -> Result<SubmitReply, NetError> {
        let sid = self.open_stream(circ, target)?;
        self.send(circ, sid, &serialize_tx(tx))?;
        let line = self.recv_line(circ, sid)?;
        let _ = self.close_stream(circ, sid);
        SubmitReply::from_line(&line).map_err(NetError::Protocol)
    }

    /// Close every link.
    pub fn shutdown(&self) {
        let mut st = self.lock();
        let circs: Vec<CircHandle> = st.client.circuits().iter().map(|c| c.handle).collect();
        for c in circs {
            st.client.destroy_circuit(c);
        }
        dispatch(&self.shared, &mut st);
    }
}

impl Drop for OnionProxy {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn failure_of(log: &[ClientEvent], circ: CircHandle) -> NetError {
    log.iter()
        .rev()
        .find_map(|e| match e {
            ClientEvent::CircuitFailed { circ: c, hop, reason } if *c == circ => Some(NetError::CircuitFailed {
                circ: circ.to_string(),
                hop: *hop,
                reason: reason.clone(),
            }),
            ClientEvent::CircuitClosed { circ: c, reason } if *c == circ => Some(NetError::CircuitFailed {
                circ: circ.to_string(),
                hop: 0,
                reason: reason.clone(),
            }),
            _ => None,
        })
        .unwrap_or_else(|| NetError::Protocol(format!("circuit {circ} vanished")))
}

fn read_cells(shared: &Arc<Shared>, link: LinkId, mut stream: TcpStream) {
    let mut buf = [0u8; CELL_LEN];
    while stream.read_exact(&mut buf).is_ok() {
        let mut st = shared.state.lock().unwrap();
        st.client.handle_cell(link, &buf);
        dispatch(shared, &mut st);
    }
    let mut st = shared.state.lock().unwrap();
    if st.links.remove(&link).is_some() {
        st.client.link_failed(link);
        dispatch(shared, &mut st);
    }
}

fn dispatch(shared: &Arc<Shared>, st: &mut State) {
    let events = st.client.take_events();
    for e in &events {
        log::debug!("client event: {e:?}");
    }
    st.log.extend(events);
    for out in st.client.take_outputs() {
        match out {
            ClientOutput::SendCell { link, cell } => {
                if let (Some(tx), Ok(bytes)) = (st.links.get(&link), encode_cell(&cell)) {
                    let _ = tx.send(Out::Bytes(bytes.to_vec()));
                }
            }
            ClientOutput::CloseLink { link } => {
                if let Some(tx) = st.links.remove(&link) {
                    let _ = tx.send(Out::Close);
                }
            }
            ClientOutput::Connect { link, addr } => {
                let (tx, rx) = channel();
                st.links.insert(link, tx);
                let s = shared.clone();
                thread::spawn(move || match connect_from(s.local_ip, addr, DEFAULT_TIMEOUT) {
                    Ok(stream) => {
                        s.registry.add(&stream);
                        let Ok(reader) = stream.try_clone() else { return };
                        let r = s.clone();
                        thread::spawn(move || read_cells(&r, link, reader));
                        write_loop(stream, rx);
                    }
                    Err(e) => {
                        log::debug!("guard link to {addr} failed: {e}");
                        let mut st = s.state.lock().unwrap();
                        st.links.remove(&link);
                        st.client.link_failed(link);
                        dispatch(&s, &mut st);
                    }
                });
            }
        }
    }
    shared.changed.notify_all();
}
