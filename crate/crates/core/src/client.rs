//! Onion proxy state machine.
//!
//! Like [`crate::relay::Relay`] this does no I/O: the driver executes
//! [`ClientOutput`]s and feeds back link cells. Each circuit rides its own
//! link to its guard.

use std::collections::BTreeMap;
use std::fmt;
use std::net::SocketAddr;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use crate::cellwire::{
    decode_cell, decode_relay_payload, encode_relay_payload, Cell, CellCommand, RelayCommand,
    RelayPayload, CELL_PAYLOAD_LEN, RELAY_DATA_LEN,
};
use crate::crypto::{
    client_create_payload, client_finish, gen_keypair, DigestState, KeyPair, LayerCipherState,
};
use crate::directory::{
    select_path_with_mode, Consensus, PathConstraints, PathError, RelayDescriptor, SelectionMode,
};
use crate::relay::{encode_extend_body, CircKey, LinkId};

/// Circuit lifetime before it stops accepting new streams.
pub const ROTATION_SECS: u64 = 600;
pub const HOPS: usize = 3;
pub const REASON_CIRCUIT_DESTROYED: &str = "circuit destroyed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct CircHandle(pub u64);

impl fmt::Display for CircHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClientError {
    #[error(transparent)]
    Path(#[from] PathError),
    #[error("unknown circuit {0}")]
    UnknownCircuit(CircHandle),
    #[error("circuit {0} is not open")]
    CircuitNotOpen(CircHandle),
    #[error("unknown stream {1} on {0}")]
    UnknownStream(CircHandle, u16),
    #[error("stream {1} on {0} is not connected")]
    StreamNotConnected(CircHandle, u16),
    #[error("stream ended: {0}")]
    StreamEnded(String),
    #[error("no free stream id")]
    StreamIdsExhausted,
    #[error("path hops are not distinct")]
    DuplicateHop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientOutput {
    Connect { link: LinkId, addr: SocketAddr },
    SendCell { link: LinkId, cell: Cell },
    CloseLink { link: LinkId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ClientEvent {
    CircuitBuilt { circ: CircHandle, path: Vec<String> },
    CircuitFailed { circ: CircHandle, hop: usize, reason: String },
    CircuitClosed { circ: CircHandle, reason: String },
    Rotated { circ: CircHandle },
    #[serde(rename = "stream_opened")]
    StreamConnected { circ: CircHandle, stream_id: u16 },
    StreamData { circ: CircHandle, stream_id: u16, len: usize },
    StreamEnded { circ: CircHandle, stream_id: u16, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CircuitState {
    Building,
    Open,
    Closing,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StreamState {
    Opening,
    Connected,
    Ended(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClientMetrics {
    pub circuits_built: u64,
    pub circuits_failed: u64,
    pub rotations: u64,
    pub replacement_failures: u64,
    pub digest_failures: u64,
    pub cells_sent: u64,
    pub cells_received: u64,
}

struct Hop {
    relay: RelayDescriptor,
    forward: LayerCipherState,
    backward: LayerCipherState,
    forward_digest: DigestState,
    backward_digest: DigestState,
}

struct Stream {
    target: SocketAddr,
    state: StreamState,
    received: Vec<u8>,
}

struct Circuit {
    link: LinkId,
    circuit_id: u32,
    path: [RelayDescriptor; HOPS],
    hops: Vec<Hop>,
    pending_eph: Option<KeyPair>,
    state: CircuitState,
    created_at: u64,
    rotated: bool,
    streams: BTreeMap<u16, Stream>,
    next_stream: u16,
}

impl Circuit {
    fn eligible(&self, now_secs: u64) -> bool {
        self.state == CircuitState::Open
            && !self.rotated
            && now_secs.saturating_sub(self.created_at) < ROTATION_SECS
    }
}

/// Read-only view of one circuit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CircuitInfo {
    pub handle: CircHandle,
    pub circuit_id: u32,
    pub state: CircuitState,
    pub created_at: u64,
    pub hop_count: usize,
    pub path: Vec<SocketAddr>,
    pub relay_ids: Vec<String>,
    pub open_streams: usize,
}

pub struct OnionClient {
    rng: ChaCha20Rng,
    mode: SelectionMode,
    circuits: BTreeMap<CircHandle, Circuit>,
    by_link: BTreeMap<CircKey, CircHandle>,
    next_handle: u64,
    outputs: Vec<ClientOutput>,
    events: Vec<ClientEvent>,
    metrics: ClientMetrics,
}

impl OnionClient {
    pub fn new(rng_seed: u64) -> Self {
        OnionClient {
            rng: ChaCha20Rng::seed_from_u64(rng_seed),
            mode: SelectionMode::Uniform,
            circuits: BTreeMap::new(),
            by_link: BTreeMap::new(),
            next_handle: 1,
            outputs: Vec::new(),
            events: Vec::new(),
            metrics: ClientMetrics::default(),
        }
    }

    pub fn with_selection_mode(mut self, mode: SelectionMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn take_outputs(&mut self) -> Vec<ClientOutput> {
        std::mem::take(&mut self.outputs)
    }

    pub fn take_events(&mut self) -> Vec<ClientEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn metrics(&self) -> ClientMetrics {
        self.metrics
    }

    pub fn circuit(&self, circ: CircHandle) -> Option<CircuitInfo> {
        let c = self.circuits.get(&circ)?;
        Some(CircuitInfo {
            handle: circ,
            circuit_id: c.circuit_id,
            state: c.state,
            created_at: c.created_at,
            hop_count: c.hops.len(),
            path: c.path.iter().map(|d| d.address).collect(),
            relay_ids: c.path.iter().map(|d| d.relay_id.clone()).collect(),
            open_streams: c.streams.len(),
        })
    }

    pub fn circuits(&self) -> Vec<CircuitInfo> {
        self.circuits.keys().filter_map(|h| self.circuit(*h)).collect()
    }

    pub fn circuit_for_link(&self, link: LinkId) -> Option<CircHandle> {
        self.by_link
            .range(CircKey::new(link, 0)..=CircKey::new(link, u32::MAX))
            .next()
            .map(|(_, h)| *h)
    }

    /// Choose a path from `consensus` and start building through it.
    pub fn build_circuit(
        &mut self,
        consensus: &Consensus,
        constraints: &PathConstraints,
        now_secs: u64,
    ) -> Result<CircHandle, ClientError> {
        let path = select_path_with_mode(consensus, constraints, self.mode, &mut self.rng)?;
        let hops = [path.guard, path.middle, path.exit];
        self.build_circuit_on(hops, now_secs)
    }

    /// Build through an explicit guard, middle, exit.
    pub fn build_circuit_on(
        &mut self,
        path: [RelayDescriptor; HOPS],
        now_secs: u64,
    ) -> Result<CircHandle, ClientError> {
        if path[0].relay_id == path[1].relay_id
            || path[1].relay_id == path[2].relay_id
            || path[0].relay_id == path[2].relay_id
        {
            return Err(ClientError::DuplicateHop);
        }
        let handle = CircHandle(self.next_handle);
        let link = LinkId(self.next_handle);
        self.next_handle += 1;
        let circuit_id = self.rng.gen_range(1..=u32::MAX);
        let eph = gen_keypair(&mut self.rng);
        let create = client_create_payload(&eph);
        let guard_addr = path[0].address;
        self.circuits.insert(
            handle,
            Circuit {
                link,
                circuit_id,
                path,
                hops: Vec::with_capacity(HOPS),
                pending_eph: Some(eph),
                state: CircuitState::Building,
                created_at: now_secs,
                rotated: false,
                streams: BTreeMap::new(),
                next_stream: 1,
            },
        );
        self.by_link.insert(CircKey::new(link, circuit_id), handle);
        self.outputs.push(ClientOutput::Connect { link, addr: guard_addr });
        self.send_cell(link, Cell::new(circuit_id, CellCommand::Create, create.to_vec()));
        Ok(handle)
    }

    fn send_cell(&mut self, link: LinkId, cell: Cell) {
        self.metrics.cells_sent += 1;
        self.outputs.push(ClientOutput::SendCell { link, cell });
    }

    /// Seal for `hop` and wrap with that hop's layer and every layer before it.
    pub fn encrypt_outbound(
        &mut self,
        circ: CircHandle,
        hop: usize,
        rp: &RelayPayload,
    ) -> Result<Cell, ClientError> {
        let c = self.circuits.get_mut(&circ).ok_or(ClientError::UnknownCircuit(circ))?;
        let mut block = encode_relay_payload(rp).expect("relay payload within bounds");
        c.hops[hop].forward_digest.seal_block(&mut block);
        for h in c.hops[..=hop].iter_mut().rev() {
            h.forward
                .apply_layer(&mut block)
                .map_err(|_| ClientError::CircuitNotOpen(circ))?;
        }
        Ok(Cell::relay(c.circuit_id, block))
    }

    /// Peel backward layers from the guard inward until some hop recognizes the cell.
    pub fn decrypt_inbound(
        &mut self,
        circ: CircHandle,
        block: &[u8; CELL_PAYLOAD_LEN],
    ) -> Result<Option<(usize, RelayPayload)>, ClientError> {
        let c = self.circuits.get_mut(&circ).ok_or(ClientError::UnknownCircuit(circ))?;
        let mut block = *block;
        for (i, h) in c.hops.iter_mut().enumerate() {
            h.backward
                .apply_layer(&mut block)
                .map_err(|_| ClientError::CircuitNotOpen(circ))?;
            if block[0] == 0 && block[1] == 0 {
                let mut trial = h.backward_digest.clone();
                if trial.verify_block(&block) {
                    h.backward_digest = trial;
                    return Ok(decode_relay_payload(&block).ok().map(|rp| (i, rp)));
                }
            }
        }
        Ok(None)
    }

    fn send_relay(&mut self, circ: CircHandle, hop: usize, rp: RelayPayload) -> Result<(), ClientError> {
        let cell = self.encrypt_outbound(circ, hop, &rp)?;
        let link = self.circuits[&circ].link;
        self.send_cell(link, cell);
        Ok(())
    }

    pub fn handle_cell(&mut self, link: LinkId, bytes: &[u8]) {
        self.metrics.cells_received += 1;
        let Ok(cell) = decode_cell(bytes) else {
            debug!("malformed cell from guard on {link:?}");
            return;
        };
        let Some(circ) = self.by_link.get(&CircKey::new(link, cell.circuit_id)).copied() else {
            return;
        };
        match cell.command {
            CellCommand::Created => self.on_created(circ, &cell.payload),
            CellCommand::Relay => self.on_relay(circ, &cell.payload_block()),
            CellCommand::Destroy => {
                self.close_circuit(circ, false, "destroyed by network");
            }
            CellCommand::Create => {}
        }
    }

    fn on_created(&mut self, circ: CircHandle, payload: &[u8]) {
        let c = &self.circuits[&circ];
        if c.state != CircuitState::Building || !c.hops.is_empty() {
            self.close_circuit(circ, true, "unexpected CREATED");
            return;
        }
        self.finish_hop(circ, payload);
    }

    fn finish_hop(&mut self, circ: CircHandle, payload: &[u8]) {
        let c = self.circuits.get_mut(&circ).expect("circuit");
        let idx = c.hops.len();
        let Some(eph) = c.pending_eph.take() else {
            self.close_circuit(circ, true, "no handshake pending");
            return;
        };
        let expected = match c.path[idx].identity() {
            Ok(pk) => pk,
            Err(e) => {
                self.fail_build(circ, idx, &e.to_string());
                return;
            }
        };
        let keys = match client_finish(&eph, payload, &expected) {
            Ok(k) => k,
            Err(e) => {
                self.fail_build(circ, idx, &e.to_string());
                return;
            }
        };
        c.hops.push(Hop {
            relay: c.path[idx].clone(),
            forward: keys.forward_cipher(),
            backward: keys.backward_cipher(),
            forward_digest: keys.forward_digest,
            backward_digest: keys.backward_digest,
        });
        if c.hops.len() == HOPS {
            c.state = CircuitState::Open;
            let path = c.hops.iter().map(|h| h.relay.address.to_string()).collect();
            self.metrics.circuits_built += 1;
            self.events.push(ClientEvent::CircuitBuilt { circ, path });
            self.reap_drained();
            return;
        }
        let next = c.path[idx + 1].address;
        let eph = gen_keypair(&mut self.rng);
        let body = encode_extend_body(next, &client_create_payload(&eph));
        self.circuits.get_mut(&circ).expect("circuit").pending_eph = Some(eph);
        let _ = self.send_relay(circ, idx, RelayPayload::new(RelayCommand::Extend, 0, body));
    }

    fn fail_build(&mut self, circ: CircHandle, hop: usize, reason: &str) {
        self.metrics.circuits_failed += 1;
        if self.circuits.values().any(|c| c.rotated && c.state == CircuitState::Open) {
            self.metrics.replacement_failures += 1;
        }
        self.events.push(ClientEvent::CircuitFailed {
            circ,
            hop,
            reason: reason.to_string(),
        });
        self.teardown(circ, true);
    }

    fn on_relay(&mut self, circ: CircHandle, block: &[u8; CELL_PAYLOAD_LEN]) {
        let (hop, rp) = match self.decrypt_inbound(circ, block) {
            Ok(Some(r)) => r,
            Ok(None) | Err(_) => {
                self.metrics.digest_failures += 1;
                self.close_circuit(circ, true, "inbound digest failure");
                return;
            }
        };
        let c = self.circuits.get_mut(&circ).expect("circuit");
        match rp.relay_command {
            RelayCommand::Extended => {
                if c.state != CircuitState::Building || hop + 1 != c.hops.len() {
                    self.close_circuit(circ, true, "unexpected EXTENDED");
                    return;
                }
                self.finish_hop(circ, &rp.data);
            }
            RelayCommand::Connected => {
                if let Some(s) = c.streams.get_mut(&rp.stream_id) {
                    if s.state == StreamState::Opening {
                        s.state = StreamState::Connected;
                        self.events.push(ClientEvent::StreamConnected {
                            circ,
                            stream_id: rp.stream_id,
                        });
                    }
                }
            }
            RelayCommand::Data => {
                if let Some(s) = c.streams.get_mut(&rp.stream_id) {
                    s.received.extend_from_slice(&rp.data);
                    self.events.push(ClientEvent::StreamData {
                        circ,
                        stream_id: rp.stream_id,
                        len: rp.data.len(),
                    });
                }
            }
            RelayCommand::End => {
                if let Some(s) = c.streams.get_mut(&rp.stream_id) {
                    let reason = String::from_utf8_lossy(&rp.data).into_owned();
                    s.state = StreamState::Ended(reason.clone());
                    self.events.push(ClientEvent::StreamEnded {
                        circ,
                        stream_id: rp.stream_id,
                        reason,
                    });
                }
            }
            RelayCommand::Extend | RelayCommand::Begin => {
                self.close_circuit(circ, true, "unexpected relay command");
            }
        }
    }

    /// The link to the guard broke or never connected.
    pub fn link_failed(&mut self, link: LinkId) {
        let Some(circ) = self.circuit_for_link(link) else {
            return;
        };
        let c = &self.circuits[&circ];
        if c.state == CircuitState::Building {
            let hop = c.hops.len();
            self.fail_build(circ, hop, "link failed");
        } else {
            self.close_circuit(circ, false, "link closed");
        }
    }

    fn close_circuit(&mut self, circ: CircHandle, send_destroy: bool, reason: &str) {
        let Some(c) = self.circuits.get(&circ) else {
            return;
        };
        if c.state == CircuitState::Building {
            let hop = c.hops.len();
            self.fail_build(circ, hop, reason);
            return;
        }
        self.events.push(ClientEvent::CircuitClosed {
            circ,
            reason: reason.to_string(),
        });
        self.teardown(circ, send_destroy);
    }

    fn teardown(&mut self, circ: CircHandle, send_destroy: bool) {
        let Some(mut c) = self.circuits.remove(&circ) else {
            return;
        };
        c.state = CircuitState::Closed;
        for (sid, s) in &c.streams {
            if !matches!(s.state, StreamState::Ended(_)) {
                self.events.push(ClientEvent::StreamEnded {
                    circ,
                    stream_id: *sid,
                    reason: REASON_CIRCUIT_DESTROYED.to_string(),
                });
            }
        }
        self.by_link.remove(&CircKey::new(c.link, c.circuit_id));
        if send_destroy {
            self.send_cell(c.link, Cell::destroy(c.circuit_id));
        }
        self.outputs.push(ClientOutput::CloseLink { link: c.link });
    }

    /// Tear a circuit down from the client side.
    pub fn destroy_circuit(&mut self, circ: CircHandle) {
        if self.circuits.contains_key(&circ) {
            self.events.push(ClientEvent::CircuitClosed {
                circ,
                reason: "closed by client".into(),
            });
            self.teardown(circ, true);
        }
    }

    pub fn open_stream(&mut self, circ: CircHandle, target: SocketAddr) -> Result<u16, ClientError> {
        let c = self.circuits.get_mut(&circ).ok_or(ClientError::UnknownCircuit(circ))?;
        if c.state != CircuitState::Open || c.rotated {
            return Err(ClientError::CircuitNotOpen(circ));
        }
        let mut sid = c.next_stream;
        let start = sid;
        while sid == 0 || c.streams.contains_key(&sid) {
            sid = sid.wrapping_add(1);
            if sid == start {
                return Err(ClientError::StreamIdsExhausted);
            }
        }
        c.next_stream = sid.wrapping_add(1);
        c.streams.insert(
            sid,
            Stream {
                target,
                state: StreamState::Opening,
                received: Vec::new(),
            },
        );
        self.send_relay(
            circ,
            HOPS - 1,
            RelayPayload::new(RelayCommand::Begin, sid, target.to_string().into_bytes()),
        )?;
        Ok(sid)
    }

    pub fn stream_state(&self, circ: CircHandle, stream_id: u16) -> Option<StreamState> {
        self.circuits.get(&circ)?.streams.get(&stream_id).map(|s| s.state.clone())
    }

    pub fn stream_target(&self, circ: CircHandle, stream_id: u16) -> Option<SocketAddr> {
        self.circuits.get(&circ)?.streams.get(&stream_id).map(|s| s.target)
    }

    /// Chunk `bytes` into DATA cells for the exit.
    pub fn send(&mut self, circ: CircHandle, stream_id: u16, bytes: &[u8]) -> Result<(), ClientError> {
        let c = self.circuits.get(&circ).ok_or(ClientError::UnknownCircuit(circ))?;
        let s = c
            .streams
            .get(&stream_id)
            .ok_or(ClientError::UnknownStream(circ, stream_id))?;
        match &s.state {
            StreamState::Connected => {}
            StreamState::Ended(r) => return Err(ClientError::StreamEnded(r.clone())),
            StreamState::Opening => return Err(ClientError::StreamNotConnected(circ, stream_id)),
        }
        for chunk in bytes.chunks(RELAY_DATA_LEN) {
            self.send_relay(circ, HOPS - 1, RelayPayload::new(RelayCommand::Data, stream_id, chunk.to_vec()))?;
        }
        Ok(())
    }

    /// Take everything received so far on a stream.
    pub fn take_received(&mut self, circ: CircHandle, stream_id: u16) -> Vec<u8> {
        self.circuits
            .get_mut(&circ)
            .and_then(|c| c.streams.get_mut(&stream_id))
            .map(|s| std::mem::take(&mut s.received))
            .unwrap_or_default()
    }

    pub fn close_stream(&mut self, circ: CircHandle, stream_id: u16) -> Result<(), ClientError> {
        let c = self.circuits.get_mut(&circ).ok_or(ClientError::UnknownCircuit(circ))?;
        let s = c
            .streams
            .remove(&stream_id)
            .ok_or(ClientError::UnknownStream(circ, stream_id))?;
        if !matches!(s.state, StreamState::Ended(_)) {
            self.send_relay(
                circ,
                HOPS - 1,
                RelayPayload::new(RelayCommand::End, stream_id, crate::relay::REASON_DONE.as_bytes().to_vec()),
            )?;
        }
        self.reap_drained();
        Ok(())
    }

    /// Destroy rotated circuits whose streams have closed, once a replacement is open.
    fn reap_drained(&mut self) {
        let replaced = self
            .circuits
            .values()
            .any(|c| c.state == CircuitState::Open && !c.rotated);
        if !replaced {
            return;
        }
        let drained: Vec<CircHandle> = self
            .circuits
            .iter()
            .filter(|(_, c)| c.rotated && c.streams.is_empty())
            .map(|(h, _)| *h)
            .collect();
        for circ in drained {
            self.circuits.get_mut(&circ).expect("circuit").state = CircuitState::Closing;
            self.events.push(ClientEvent::CircuitClosed {
                circ,
                reason: "rotated".into(),
            });
            self.teardown(circ, true);
        }
    }

    /// Retire circuits that reached the rotation age. Retired circuits keep
    /// their streams until those close.
    pub fn rotation_check(&mut self, now_secs: u64) {
        let due: Vec<CircHandle> = self
            .circuits
            .iter()
            .filter(|(_, c)| {
                c.state == CircuitState::Open
                    && !c.rotated
                    && now_secs.saturating_sub(c.created_at) >= ROTATION_SECS
            })
            .map(|(h, _)| *h)
            .collect();
        for circ in due {
            self.circuits.get_mut(&circ).expect("circuit").rotated = true;
            self.metrics.rotations += 1;
            self.events.push(ClientEvent::Rotated { circ });
        }
        self.reap_drained();
    }

    pub fn is_eligible(&self, circ: CircHandle, now_secs: u64) -> bool {
        self.circuits.get(&circ).is_some_and(|c| c.eligible(now_secs))
    }

    /// Newest open circuit still young enough for new streams.
    pub fn eligible_circuit(&self, now_secs: u64) -> Option<CircHandle> {
        self.circuits
            .iter()
            .rev()
            .find(|(_, c)| c.eligible(now_secs))
            .map(|(h, _)| *h)
    }
}
