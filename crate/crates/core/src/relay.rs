//! Relay node state machine.
//!
//! The relay does no I/O. Drivers feed it link cells and external-stream
//! events, then drain [`RelayOutput`]s and perform them in order. All cells of
//! one circuit must be fed in arrival order; cipher and digest states depend on
//! it.
//!
//! A relay has no fixed role. For each circuit it either forwards toward a
//! next hop (after an EXTEND) or terminates streams (after a BEGIN), never both.

use std::collections::BTreeMap;
use std::net::SocketAddr;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::cellwire::{
    decode_cell, decode_relay_payload, encode_relay_payload, Cell, CellCommand, RelayCommand,
    RelayPayload, RELAY_DATA_LEN,
};
use crate::crypto::{
    relay_respond, DigestState, KeyPair, LayerCipherState, CREATE_PAYLOAD_LEN,
};
use crate::directory::{EgressPolicy, RelayDescriptor};

pub const REASON_POLICY: &str = "exit policy refused";
pub const REASON_UNREACHABLE: &str = "unreachable";
pub const REASON_DONE: &str = "done";
pub const REASON_BAD_TARGET: &str = "bad target";
pub const REASON_STREAM_IN_USE: &str = "stream id in use";

/// Driver-visible handle for a relay-to-relay (or client-to-relay) link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct LinkId(pub u64);

/// Driver-visible handle for an exit's plaintext connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ExtId(pub u64);

/// A circuit as seen on one link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct CircKey {
    pub link: LinkId,
    pub circuit_id: u32,
}

impl CircKey {
    pub fn new(link: LinkId, circuit_id: u32) -> Self {
        CircKey { link, circuit_id }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RelayOutput {
    SendCell { link: LinkId, cell: Cell },
    /// Open a link to `addr`; cells sent on `link` before it connects must be queued.
    Connect { link: LinkId, addr: SocketAddr },
    /// Close after flushing everything already queued on the link.
    CloseLink { link: LinkId },
    ExternalConnect { ext: ExtId, addr: SocketAddr },
    ExternalSend { ext: ExtId, bytes: Vec<u8> },
    ExternalClose { ext: ExtId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RelayEvent {
    CircuitCreated { inbound: CircKey, peer: SocketAddr },
    CircuitExtended { inbound: CircKey, outbound: CircKey, next: SocketAddr },
    StreamOpened { inbound: CircKey, stream_id: u16, target: String },
    StreamRefused { inbound: CircKey, stream_id: u16, reason: String },
    CircuitDestroyed { inbound: CircKey, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    Created,
    Rejected,
    Forwarded,
    Recognized(String),
    Wrapped,
    Destroyed,
    Dropped,
}

/// What a relay could see of one incoming cell, and what it did with it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellObservation {
    pub link: LinkId,
    pub peer: Option<SocketAddr>,
    pub circuit_id: u32,
    pub command: Option<CellCommand>,
    pub direction: Direction,
    /// Inbound key of the circuit this cell belonged to.
    pub entry: Option<CircKey>,
    pub outbound: Option<CircKey>,
    pub disposition: Disposition,
    /// Application bytes readable at this hop (BEGIN target or DATA at the exit).
    pub plaintext: Option<Vec<u8>>,
    pub layer_ops: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RelayMetrics {
    pub cells_received: u64,
    pub cells_sent: u64,
    pub forward_layer_ops: u64,
    pub backward_layer_ops: u64,
    pub dropped_unknown_circuit: u64,
    pub malformed_cells: u64,
    pub protocol_errors: u64,
    pub circuits_created: u64,
    pub circuits_destroyed: u64,
    pub bytes_received: u64,
    pub bytes_sent: u64,
}

#[derive(Debug)]
struct LinkState {
    peer: SocketAddr,
}

#[derive(Debug, Clone)]
struct Outbound {
    key: CircKey,
    peer: SocketAddr,
    pending: bool,
}

#[derive(Debug, Clone)]
struct ExitStream {
    ext: ExtId,
}

struct CircuitEntry {
    inbound: CircKey,
    forward: LayerCipherState,
    backward: LayerCipherState,
    forward_digest: DigestState,
    backward_digest: DigestState,
    outbound: Option<Outbound>,
    exit_streams: BTreeMap<u16, ExitStream>,
}

pub fn encode_extend_body(next: SocketAddr, create_payload: &[u8; CREATE_PAYLOAD_LEN]) -> Vec<u8> {
    let addr = next.to_string();
    let mut out = Vec::with_capacity(1 + addr.len() + CREATE_PAYLOAD_LEN);
    out.push(addr.len() as u8);
    out.extend_from_slice(addr.as_bytes());
    out.extend_from_slice(create_payload);
    out
}

pub fn decode_extend_body(data: &[u8]) -> Option<(SocketAddr, [u8; CREATE_PAYLOAD_LEN])> {
    let (&len, rest) = data.split_first()?;
    let len = len as usize;
    if rest.len() != len + CREATE_PAYLOAD_LEN {
        return None;
    }
    let addr = std::str::from_utf8(&rest[..len]).ok()?.parse().ok()?;
    let payload = rest[len..].try_into().ok()?;
    Some((addr, payload))
}

pub struct Relay {
    identity: KeyPair,
    address: SocketAddr,
    policy: EgressPolicy,
    rng: ChaCha20Rng,
    links: BTreeMap<LinkId, LinkState>,
    circuits: BTreeMap<CircKey, CircuitEntry>,
    outbound_index: BTreeMap<CircKey, CircKey>,
    exts: BTreeMap<ExtId, (CircKey, u16)>,
    next_handle: u64,
    outputs: Vec<RelayOutput>,
    events: Vec<RelayEvent>,
    metrics: RelayMetrics,
}

impl Relay {
    pub fn new(identity: KeyPair, address: SocketAddr, policy: EgressPolicy, rng_seed: u64) -> Self {
        Relay {
            identity,
            address,
            policy,
            rng: ChaCha20Rng::seed_from_u64(rng_seed),
            links: BTreeMap::new(),
            circuits: BTreeMap::new(),
            outbound_index: BTreeMap::new(),
            exts: BTreeMap::new(),
            next_handle: 1,
            outputs: Vec::new(),
            events: Vec::new(),
            metrics: RelayMetrics::default(),
        }
    }

    pub fn address(&self) -> SocketAddr {
        self.address
    }

    pub fn identity(&self) -> &KeyPair {
        &self.identity
    }

    pub fn policy(&self) -> &EgressPolicy {
        &self.policy
    }

    pub fn descriptor(&self, bandwidth: u64, now_secs: u64) -> RelayDescriptor {
        RelayDescriptor::new(
            &self.identity.public(),
            self.address,
            self.policy.clone(),
            bandwidth,
            now_secs,
        )
    }

    pub fn metrics(&self) -> RelayMetrics {
        self.metrics
    }

    pub fn circuit_count(&self) -> usize {
        self.circuits.len()
    }

    pub fn has_circuit(&self, inbound: CircKey) -> bool {
        self.circuits.contains_key(&inbound)
    }

    pub fn outbound_of(&self, inbound: CircKey) -> Option<CircKey> {
        self.circuits.get(&inbound)?.outbound.as_ref().map(|o| o.key)
    }

    pub fn exit_stream_count(&self, inbound: CircKey) -> usize {
        self.circuits
            .get(&inbound)
            .map_or(0, |e| e.exit_streams.len())
    }

    pub fn link_peer(&self, link: LinkId) -> Option<SocketAddr> {
        self.links.get(&link).map(|l| l.peer)
    }

    pub fn take_outputs(&mut self) -> Vec<RelayOutput> {
        std::mem::take(&mut self.outputs)
    }

    pub fn take_events(&mut self) -> Vec<RelayEvent> {
        std::mem::take(&mut self.events)
    }

    /// Every outbound mapping has a reverse entry and vice versa; a circuit
    /// never both forwards and terminates streams.
    pub fn check_consistency(&self) -> Result<(), String> {
        for (key, entry) in &self.circuits {
            if let Some(out) = &entry.outbound {
                if self.outbound_index.get(&out.key) != Some(key) {
                    return Err(format!("missing reverse mapping for {key:?}"));
                }
                if !entry.exit_streams.is_empty() {
                    return Err(format!("{key:?} both forwards and has exit streams"));
                }
            }
            for (sid, st) in &entry.exit_streams {
                if self.exts.get(&st.ext) != Some(&(*key, *sid)) {
                    return Err(format!("stream {sid} on {key:?} missing from ext table"));
                }
            }
        }
        for (out, inbound) in &self.outbound_index {
            let ok = self
                .circuits
                .get(inbound)
                .and_then(|e| e.outbound.as_ref())
                .is_some_and(|o| o.key == *out);
            if !ok {
                return Err(format!("dangling reverse mapping {out:?}"));
            }
        }
        Ok(())
    }

    fn alloc(&mut self) -> u64 {
        let h = self.next_handle;
        self.next_handle += 1;
        h
    }

    pub fn accept_link(&mut self, peer: SocketAddr) -> LinkId {
        let link = LinkId(self.alloc());
        self.links.insert(link, LinkState { peer });
        link
    }

    fn send(&mut self, link: LinkId, cell: Cell) {
        self.metrics.cells_sent += 1;
        self.metrics.bytes_sent += crate::cellwire::CELL_LEN as u64;
        self.outputs.push(RelayOutput::SendCell { link, cell });
    }

    pub fn handle_cell(&mut self, link: LinkId, bytes: &[u8]) -> CellObservation {
        self.metrics.cells_received += 1;
        self.metrics.bytes_received += bytes.len() as u64;
        let peer = self.link_peer(link);
        let mut obs = CellObservation {
            link,
            peer,
            circuit_id: 0,
            command: None,
            direction: Direction::Unknown,
            entry: None,
            outbound: None,
            disposition: Disposition::Dropped,
            plaintext: None,
            layer_ops: 0,
        };
        let cell = match decode_cell(bytes) {
            Ok(c) => c,
            Err(e) => {
                debug!("malformed cell on {link:?}: {e}");
                self.metrics.malformed_cells += 1;
                return obs;
            }
        };
        obs.circuit_id = cell.circuit_id;
        obs.command = Some(cell.command);
        let key = CircKey::new(link, cell.circuit_id);

        if let Some(entry) = self.circuits.get(&key) {
            obs.direction = Direction::Forward;
            obs.entry = Some(key);
            obs.outbound = entry.outbound.as_ref().map(|o| o.key);
        } else if let Some(inbound) = self.outbound_index.get(&key).copied() {
            obs.direction = Direction::Backward;
            obs.entry = Some(inbound);
            obs.outbound = Some(key);
        }

        match cell.command {
            CellCommand::Create => self.handle_create(key, &cell, &mut obs),
            CellCommand::Created => self.handle_created(key, &cell, &mut obs),
            CellCommand::Destroy => self.handle_destroy(key, &mut obs),
            CellCommand::Relay => match obs.direction {
                Direction::Forward => self.handle_relay_forward(key, &cell, &mut obs),
                Direction::Backward => self.handle_backward(key, &cell, &mut obs),
                Direction::Unknown => {
                    self.metrics.dropped_unknown_circuit += 1;
                }
            },
        }
        obs
    }

    fn handle_create(&mut self, key: CircKey, cell: &Cell, obs: &mut CellObservation) {
        if obs.direction != Direction::Unknown {
            self.metrics.protocol_errors += 1;
            obs.disposition = Disposition::Rejected;
            self.send(key.link, Cell::destroy(key.circuit_id));
            return;
        }
        let (created, keys) = match relay_respond(&cell.payload, &self.identity, &mut self.rng) {
            Ok(r) => r,
            Err(e) => {
                debug!("handshake failed on {key:?}: {e}");
                self.metrics.protocol_errors += 1;
                obs.disposition = Disposition::Rejected;
                self.send(key.link, Cell::destroy(key.circuit_id));
                return;
            }
        };
        self.circuits.insert(
            key,
            CircuitEntry {
                inbound: key,
                forward: keys.forward_cipher(),
                backward: keys.backward_cipher(),
                forward_digest: keys.forward_digest,
                backward_digest: keys.backward_digest,
                outbound: None,
                exit_streams: BTreeMap::new(),
            },
        );
        self.metrics.circuits_created += 1;
        obs.entry = Some(key);
        obs.disposition = Disposition::Created;
        let peer = self.link_peer(key.link).unwrap_or(self.address);
        self.events.push(RelayEvent::CircuitCreated { inbound: key, peer });
        self.send(key.link, Cell::new(key.circuit_id, CellCommand::Created, created.to_vec()));
    }

    fn handle_created(&mut self, key: CircKey, cell: &Cell, obs: &mut CellObservation) {
        let Some(inbound) = self.outbound_index.get(&key).copied() else {
            self.metrics.dropped_unknown_circuit += 1;
            return;
        };
        let pending = self
            .circuits
            .get(&inbound)
            .and_then(|e| e.outbound.as_ref())
            .is_some_and(|o| o.pending);
        if !pending {
            self.metrics.protocol_errors += 1;
            self.teardown(inbound, true, true, "unexpected CREATED");
            obs.disposition = Disposition::Destroyed;
            return;
        }
        let entry = self.circuits.get_mut(&inbound).expect("indexed");
        let out = entry.outbound.as_mut().expect("pending outbound");
        out.pending = false;
        let next = out.peer;
        self.events.push(RelayEvent::CircuitExtended {
            inbound,
            outbound: key,
            next,
        });
        obs.disposition = Disposition::Wrapped;
        obs.layer_ops = 1;
        self.send_backward_relay(
            inbound,
            RelayPayload::new(RelayCommand::Extended, 0, cell.payload.clone()),
        );
    }

    fn handle_destroy(&mut self, key: CircKey, obs: &mut CellObservation) {
        match obs.direction {
            Direction::Forward => {
                self.teardown(key, false, true, "destroyed by previous hop");
                obs.disposition = Disposition::Destroyed;
            }
            Direction::Backward => {
                let inbound = obs.entry.expect("backward has entry");
                // the next hop is gone; do not send DESTROY back to it
                self.detach_outbound(inbound);
                self.teardown(inbound, true, false, "destroyed by next hop");
                obs.disposition = Disposition::Destroyed;
            }
            Direction::Unknown => {}
        }
    }

    fn detach_outbound(&mut self, inbound: CircKey) {
        if let Some(entry) = self.circuits.get_mut(&inbound) {
            if let Some(out) = entry.outbound.take() {
                self.outbound_index.remove(&out.key);
                self.links.remove(&out.key.link);
                self.outputs.push(RelayOutput::CloseLink { link: out.key.link });
            }
        }
    }

    /// Peel one layer; dispatch if the cell is addressed here, otherwise pass it on.
    fn handle_relay_forward(&mut self, key: CircKey, cell: &Cell, obs: &mut CellObservation) {
        let mut block = cell.payload_block();
        let entry = self.circuits.get_mut(&key).expect("forward entry");
        if entry.forward.apply_layer(&mut block).is_err() {
            self.teardown(key, true, true, "cipher counter exhausted");
            obs.disposition = Disposition::Destroyed;
            return;
        }
        self.metrics.forward_layer_ops += 1;
        obs.layer_ops = 1;

        if block[0] == 0 && block[1] == 0 {
            let mut trial = entry.forward_digest.clone();
            if trial.verify_block(&block) {
                entry.forward_digest = trial;
                match decode_relay_payload(&block) {
                    Ok(rp) => {
                        obs.disposition = Disposition::Recognized(rp.relay_command.as_str().to_string());
                        self.dispatch(key, rp, obs);
                    }
                    Err(_) => {
                        self.metrics.protocol_errors += 1;
                        self.teardown(key, true, true, "undecodable relay payload");
                        obs.disposition = Disposition::Destroyed;
                    }
                }
                return;
            }
        }

        match entry.outbound.as_ref().map(|o| o.key) {
            Some(out) => {
                obs.disposition = Disposition::Forwarded;
                self.send(out.link, Cell::relay(out.circuit_id, block));
            }
            None => {
                // fell off the end of the circuit: tampering or a wrong key upstream
                self.metrics.protocol_errors += 1;
                self.teardown(key, true, true, "unrecognized cell at last hop");
                obs.disposition = Disposition::Destroyed;
            }
        }
    }

    /// Add this hop's backward layer and pass the cell toward the client.
    fn handle_backward(&mut self, key: CircKey, cell: &Cell, obs: &mut CellObservation) {
        let inbound = obs.entry.expect("backward entry");
        let mut block = cell.payload_block();
        let entry = self.circuits.get_mut(&inbound).expect("indexed entry");
        if entry.backward.apply_layer(&mut block).is_err() {
            self.teardown(inbound, true, true, "cipher counter exhausted");
            obs.disposition = Disposition::Destroyed;
            return;
        }
        let _ = key;
        self.metrics.backward_layer_ops += 1;
        obs.layer_ops = 1;
        obs.disposition = Disposition::Forwarded;
        self.send(inbound.link, Cell::relay(inbound.circuit_id, block));
    }

    fn dispatch(&mut self, key: CircKey, rp: RelayPayload, obs: &mut CellObservation) {
        match rp.relay_command {
            RelayCommand::Extend => self.handle_extend(key, &rp.data),
            RelayCommand::Begin => {
                obs.plaintext = Some(rp.data.clone());
                self.handle_begin(key, rp.stream_id, &rp.data);
            }
            RelayCommand::Data => {
                obs.plaintext = Some(rp.data.clone());
                self.handle_data(key, rp.stream_id, rp.data);
            }
            RelayCommand::End => self.handle_end(key, rp.stream_id),
            RelayCommand::Extended | RelayCommand::Connected => {
                self.metrics.protocol_errors += 1;
            }
        }
    }

    fn handle_extend(&mut self, key: CircKey, data: &[u8]) {
        let entry = self.circuits.get(&key).expect("entry");
        if entry.outbound.is_some() || !entry.exit_streams.is_empty() {
            self.metrics.protocol_errors += 1;
            self.teardown(key, true, true, "second EXTEND on circuit");
            return;
        }
        let Some((next, create_payload)) = decode_extend_body(data) else {
            self.metrics.protocol_errors += 1;
            self.teardown(key, true, true, "malformed EXTEND");
            return;
        };
        let link = LinkId(self.alloc());
        let circuit_id = self.rng.gen_range(1..=u32::MAX);
        let out_key = CircKey::new(link, circuit_id);
        self.links.insert(link, LinkState { peer: next });
        self.outbound_index.insert(out_key, key);
        self.circuits.get_mut(&key).expect("entry").outbound = Some(Outbound {
            key: out_key,
            peer: next,
            pending: true,
        });
        self.outputs.push(RelayOutput::Connect { link, addr: next });
        self.send(link, Cell::new(circuit_id, CellCommand::Create, create_payload.to_vec()));
    }

    fn handle_begin(&mut self, key: CircKey, stream_id: u16, data: &[u8]) {
        let entry = self.circuits.get(&key).expect("entry");
        if entry.outbound.is_some() {
            self.metrics.protocol_errors += 1;
            self.teardown(key, true, true, "BEGIN on forwarding circuit");
            return;
        }
        if entry.exit_streams.contains_key(&stream_id) || stream_id == 0 {
            self.refuse(key, stream_id, REASON_STREAM_IN_USE);
            return;
        }
        let target = match std::str::from_utf8(data).ok().and_then(|s| s.parse::<SocketAddr>().ok()) {
            Some(t) => t,
            None => {
                self.refuse(key, stream_id, REASON_BAD_TARGET);
                return;
            }
        };
        if !self.policy.allows(target.port()) {
            self.refuse(key, stream_id, REASON_POLICY);
            return;
        }
        let ext = ExtId(self.alloc());
        self.exts.insert(ext, (key, stream_id));
        self.circuits
            .get_mut(&key)
            .expect("entry")
            .exit_streams
            .insert(stream_id, ExitStream { ext });
        self.events.push(RelayEvent::StreamOpened {
            inbound: key,
            stream_id,
            target: target.to_string(),
        });
        self.outputs.push(RelayOutput::ExternalConnect { ext, addr: target });
    }

    fn refuse(&mut self, key: CircKey, stream_id: u16, reason: &str) {
        self.events.push(RelayEvent::StreamRefused {
            inbound: key,
            stream_id,
            reason: reason.to_string(),
        });
        self.send_backward_relay(key, RelayPayload::new(RelayCommand::End, stream_id, reason.as_bytes().to_vec()));
    }

    fn handle_data(&mut self, key: CircKey, stream_id: u16, data: Vec<u8>) {
        let entry = self.circuits.get(&key).expect("entry");
        match entry.exit_streams.get(&stream_id) {
            Some(st) => {
                let ext = st.ext;
                self.outputs.push(RelayOutput::ExternalSend { ext, bytes: data });
            }
            None => self.metrics.protocol_errors += 1,
        }
    }

    fn handle_end(&mut self, key: CircKey, stream_id: u16) {
        let entry = self.circuits.get_mut(&key).expect("entry");
        if let Some(st) = entry.exit_streams.remove(&stream_id) {
            self.exts.remove(&st.ext);
            self.outputs.push(RelayOutput::ExternalClose { ext: st.ext });
        }
    }

    fn send_backward_relay(&mut self, inbound: CircKey, rp: RelayPayload) {
        let Some(entry) = self.circuits.get_mut(&inbound) else {
            return;
        };
        let mut block = encode_relay_payload(&rp).expect("relay payload within bounds");
        entry.backward_digest.seal_block(&mut block);
        if entry.backward.apply_layer(&mut block).is_err() {
            self.teardown(inbound, true, true, "cipher counter exhausted");
            return;
        }
        self.metrics.backward_layer_ops += 1;
        self.send(inbound.link, Cell::relay(inbound.circuit_id, block));
    }

    pub fn external_connected(&mut self, ext: ExtId) {
        if let Some(&(key, sid)) = self.exts.get(&ext) {
            self.send_backward_relay(key, RelayPayload::new(RelayCommand::Connected, sid, Vec::new()));
        }
    }

    pub fn external_failed(&mut self, ext: ExtId) {
        if let Some((key, sid)) = self.exts.remove(&ext) {
            if let Some(entry) = self.circuits.get_mut(&key) {
                entry.exit_streams.remove(&sid);
            }
            self.send_backward_relay(key, RelayPayload::new(RelayCommand::End, sid, REASON_UNREACHABLE.as_bytes().to_vec()));
        }
    }

    /// Bytes from the external side, chunked into DATA cells.
    pub fn external_data(&mut self, ext: ExtId, bytes: &[u8]) {
        if let Some(&(key, sid)) = self.exts.get(&ext) {
            for chunk in bytes.chunks(RELAY_DATA_LEN) {
                self.send_backward_relay(key, RelayPayload::new(RelayCommand::Data, sid, chunk.to_vec()));
            }
        }
    }

    pub fn external_closed(&mut self, ext: ExtId) {
        if let Some((key, sid)) = self.exts.remove(&ext) {
            if let Some(entry) = self.circuits.get_mut(&key) {
                entry.exit_streams.remove(&sid);
            }
            self.send_backward_relay(key, RelayPayload::new(RelayCommand::End, sid, REASON_DONE.as_bytes().to_vec()));
        }
    }

    /// An outbound connect failed. Circuits waiting on it are torn down toward the client.
    pub fn link_failed(&mut self, link: LinkId) {
        self.link_closed(link);
    }

    pub fn link_closed(&mut self, link: LinkId) {
        self.links.remove(&link);
        let inbound_keys: Vec<CircKey> = self.circuits.keys().filter(|k| k.link == link).copied().collect();
        for k in inbound_keys {
            self.teardown(k, false, true, "inbound link closed");
        }
        let outbound_keys: Vec<CircKey> = self
            .outbound_index
            .iter()
            .filter(|(out, _)| out.link == link)
            .map(|(_, inbound)| *inbound)
            .collect();
        for k in outbound_keys {
            if let Some(entry) = self.circuits.get_mut(&k) {
                if let Some(out) = entry.outbound.take() {
                    self.outbound_index.remove(&out.key);
                }
            }
            self.teardown(k, true, false, "outbound link closed");
        }
    }

    fn teardown(&mut self, inbound: CircKey, notify_inbound: bool, notify_outbound: bool, reason: &str) {
        let Some(entry) = self.circuits.remove(&inbound) else {
            return;
        };
        debug_assert_eq!(entry.inbound, inbound);
        self.metrics.circuits_destroyed += 1;
        for st in entry.exit_streams.values() {
            self.exts.remove(&st.ext);
            self.outputs.push(RelayOutput::ExternalClose { ext: st.ext });
        }
        if let Some(out) = entry.outbound {
            self.outbound_index.remove(&out.key);
            if notify_outbound {
                self.send(out.key.link, Cell::destroy(out.key.circuit_id));
            }
            self.links.remove(&out.key.link);
            self.outputs.push(RelayOutput::CloseLink { link: out.key.link });
        }
        if notify_inbound && self.links.contains_key(&inbound.link) {
            self.send(inbound.link, Cell::destroy(inbound.circuit_id));
        }
        self.events.push(RelayEvent::CircuitDestroyed {
            inbound,
            reason: reason.to_string(),
        });
    }
}
