//! Deterministic discrete-event network.
//!
//! Every entity is one of the sans-IO state machines; this module owns the
//! wires. Events are ordered by `(tick, seq)` and each direction of each
//! connection is FIFO with a seeded 1..=5 tick latency. One tick is one
//! millisecond of logical time.

use std::collections::{BTreeMap, VecDeque};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::json;

use crate::cellwire::{encode_cell, CellCommand, CELL_LEN};
use crate::client::{CircHandle, ClientEvent, ClientOutput, OnionClient, ROTATION_SECS};
use crate::clock::ManualClock;
use crate::crypto::gen_keypair;
use crate::directory::{Directory, EgressPolicy, PathConstraints};
use crate::relay::{CellObservation, Direction, Disposition, ExtId, LinkId, Relay, RelayOutput};
use crate::txgossip::{
    plaintext_digest, serialize_tx, FrameDecoder, GossipNode, GossipSend, SubmitReply, Transaction, Txid,
    TXID_LEN,
};

use super::scenario::{Mode, Scenario};
use super::transcript::{
    ByteCounts, ClientLogEntry, ConnKind, MempoolDump, MempoolEntry, Metrics, Role, Transcript, TxRecord,
    VantageRecord,
};
use super::HarnessError;

pub const RELAY_PORT: u16 = 9001;
pub const SUBMIT_PORT: u16 = 8333;
pub const PEER_PORT: u16 = 8334;
const HEARTBEAT_TICKS: u64 = 30_000;
const MAX_ATTEMPTS: u32 = 3;
const MAX_EVENTS: u64 = 20_000_000;

pub fn relay_addr(i: usize) -> SocketAddr {
    SocketAddr::new(IpAddr::V4(Ipv4Addr::new(10, 0, 1, (i + 1) as u8)), RELAY_PORT)
}

pub fn gossip_ip(i: usize) -> IpAddr {
    IpAddr::V4(Ipv4Addr::new(10, 0, 2, (i + 1) as u8))
}

pub fn client_ip(i: usize) -> IpAddr {
    IpAddr::V4(Ipv4Addr::new(10, 0, 3, (i + 1) as u8))
}

pub fn relay_name(i: usize) -> String {
    format!("r{}", i + 1)
}

pub fn gossip_name(i: usize) -> String {
    format!("g{}", i + 1)
}

pub fn client_name(i: usize) -> String {
    format!("c{}", i + 1)
}

pub fn tap_name(conn: u64) -> String {
    format!("tap{conn}")
}

type ConnId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    ClientDirect(usize),
    ClientLink(usize, LinkId),
    RelayLink(usize, LinkId),
    RelayExt(usize, ExtId),
    GossipSubmit(usize),
    GossipPeer(usize),
    Unattached,
}

struct Conn {
    kind: ConnKind,
    a: Side,
    b: Side,
    a_addr: SocketAddr,
    b_addr: SocketAddr,
    established: bool,
    /// Sender has closed: index 0 for a, 1 for b.
    closed: [bool; 2],
    horizon: [u64; 2],
    /// Decoders for bytes arriving at a (0) and at b (1).
    dec: [FrameDecoder; 2],
}

#[derive(Debug)]
enum Ev {
    Connect { conn: ConnId },
    Connected { conn: ConnId, ok: bool },
    Deliver { conn: ConnId, to_b: bool, bytes: Vec<u8> },
    Close { conn: ConnId, to_b: bool },
    ClientWake(usize),
    Heartbeat,
}

struct Job {
    tx_index: usize,
    tx: Transaction,
    target: usize,
    circ: Option<CircHandle>,
    stream: Option<u16>,
    conn: Option<ConnId>,
    reply: Vec<u8>,
    attempts: u32,
}

struct SimClient {
    ip: IpAddr,
    onion: OnionClient,
    pending: VecDeque<(Transaction, usize)>,
    job: Option<Job>,
    building: Option<CircHandle>,
    done: bool,
}

pub struct Sim {
    scenario: Scenario,
    rng: ChaCha20Rng,
    now: u64,
    seq: u64,
    events_run: u64,
    queue: BTreeMap<(u64, u64), Ev>,
    conns: BTreeMap<ConnId, Conn>,
    next_conn: ConnId,
    ports: BTreeMap<IpAddr, u16>,
    clock: ManualClock,
    directory: Directory,
    relays: Vec<Relay>,
    relay_links: BTreeMap<(usize, LinkId), ConnId>,
    relay_exts: BTreeMap<(usize, ExtId), ConnId>,
    gossip: Vec<GossipNode>,
    peer_conns: BTreeMap<(usize, SocketAddr), ConnId>,
    clients: Vec<SimClient>,
    client_links: BTreeMap<(usize, LinkId), ConnId>,
    circ_pos: BTreeMap<(ConnId, u32), u8>,
    records: Vec<VantageRecord>,
    client_events: Vec<ClientLogEntry>,
    txs: Vec<TxRecord>,
    tx_by_id: BTreeMap<Txid, usize>,
    link_tx: BTreeMap<(ConnId, bool, Txid), u64>,
    active_clients: usize,
    gap_ticks: (u64, u64),
}

pub fn run_scenario(scenario: &Scenario) -> Result<Transcript, HarnessError> {
    scenario.validate()?;
    let mut sim = Sim::new(scenario.clone());
    sim.run()?;
    Ok(sim.finish())
}

impl Sim {
    fn new(scenario: Scenario) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(scenario.seed);
        let clock = ManualClock::new(0);
        let mut directory = Directory::new(Arc::new(clock.clone()));

        let relays: Vec<Relay> = (0..scenario.n_relays)
            .map(|i| {
                let kp = gen_keypair(&mut rng);
                let policy = if i % 2 == 0 {
                    EgressPolicy::allow([SUBMIT_PORT])
                } else {
                    EgressPolicy::ExitDisallowed
                };
                let seed = rng.next_u64();
                Relay::new(kp, relay_addr(i), policy, seed)
            })
            .collect();
        for r in &relays {
            directory
                .publish(r.descriptor(100, 0))
                .expect("generated descriptors are valid");
        }

        let edges = scenario.topology.edges(scenario.n_gossip, &mut rng);
        let peer_addr = |i: usize| SocketAddr::new(gossip_ip(i), PEER_PORT);
        let gossip: Vec<GossipNode> = (0..scenario.n_gossip)
            .map(|i| {
                let peers = edges
                    .iter()
                    .filter_map(|&(a, b)| match (a == i, b == i) {
                        (true, _) => Some(peer_addr(b)),
                        (_, true) => Some(peer_addr(a)),
                        _ => None,
                    })
                    .collect();
                GossipNode::new(gossip_name(i), peer_addr(i), peers)
            })
            .collect();

        let mut clients = Vec::new();
        for c in 0..scenario.n_clients {
            let seed = rng.next_u64();
            let mut pending = VecDeque::new();
            for _ in 0..scenario.tx_per_client {
                let len = rng.gen_range(16..=64);
                let mut payload = vec![0u8; len];
                rng.fill_bytes(&mut payload);
                let target = rng.gen_range(0..scenario.n_gossip);
                pending.push_back((Transaction::new(payload).expect("payload within bounds"), target));
            }
            clients.push(SimClient {
                ip: client_ip(c),
                onion: OnionClient::new(seed),
                pending,
                job: None,
                building: None,
                done: false,
            });
        }

        let gap_ticks = if scenario.rotation {
            (ROTATION_SECS * 1000, ROTATION_SECS * 1000)
        } else {
            (20, 100)
        };
        let mut sim = Sim {
            active_clients: clients.len(),
            scenario,
            rng,
            now: 0,
            seq: 0,
            events_run: 0,
            queue: BTreeMap::new(),
            conns: BTreeMap::new(),
            next_conn: 1,
            ports: BTreeMap::new(),
            clock,
            directory,
            relays,
            relay_links: BTreeMap::new(),
            relay_exts: BTreeMap::new(),
            gossip,
            peer_conns: BTreeMap::new(),
            clients,
            client_links: BTreeMap::new(),
            circ_pos: BTreeMap::new(),
            records: Vec::new(),
            client_events: Vec::new(),
            txs: Vec::new(),
            tx_by_id: BTreeMap::new(),
            link_tx: BTreeMap::new(),
            gap_ticks,
        };

        for &(a, b) in &edges {
            let a_addr = sim.ephemeral(gossip_ip(a));
            let id = sim.new_conn(ConnKind::Peer, Side::GossipPeer(a), a_addr, peer_addr(b));
            let conn = sim.conns.get_mut(&id).expect("conn");
            conn.b = Side::GossipPeer(b);
            conn.established = true;
            sim.peer_conns.insert((a, peer_addr(b)), id);
            sim.peer_conns.insert((b, peer_addr(a)), id);
        }
        for c in 0..sim.clients.len() {
            let t = sim.rng.gen_range(0..200);
            sim.at(t, Ev::ClientWake(c));
        }
        sim.at(HEARTBEAT_TICKS, Ev::Heartbeat);
        sim
    }

    fn at(&mut self, t: u64, ev: Ev) {
        self.queue.insert((t, self.seq), ev);
        self.seq += 1;
    }

    fn ephemeral(&mut self, ip: IpAddr) -> SocketAddr {
        let port = self.ports.entry(ip).or_insert(40000);
        let p = *port;
        *port += 1;
        SocketAddr::new(ip, p)
    }

    fn new_conn(&mut self, kind: ConnKind, a: Side, a_addr: SocketAddr, b_addr: SocketAddr) -> ConnId {
        let id = self.next_conn;
        self.next_conn += 1;
        self.conns.insert(
            id,
            Conn {
                kind,
                a,
                b: Side::Unattached,
                a_addr,
                b_addr,
                established: false,
                closed: [false; 2],
                horizon: [0; 2],
                dec: [FrameDecoder::new(), FrameDecoder::new()],
            },
        );
        id
    }

    fn open(&mut self, kind: ConnKind, a: Side, ip: IpAddr, to: SocketAddr) -> ConnId {
        let a_addr = self.ephemeral(ip);
        let id = self.new_conn(kind, a, a_addr, to);
        self.fifo(id, true, Ev::Connect { conn: id });
        id
    }

    /// Schedule `ev` on the a->b (or b->a) lane of `conn`, after everything already on it.
    fn fifo(&mut self, conn: ConnId, from_a: bool, ev: Ev) {
        let lat = self.rng.gen_range(1..=5);
        let lane = if from_a { 0 } else { 1 };
        let c = self.conns.get_mut(&conn).expect("conn");
        let t = (self.now + lat).max(c.horizon[lane]);
        c.horizon[lane] = t;
        self.at(t, ev);
    }

    fn send(&mut self, conn: ConnId, from_a: bool, bytes: Vec<u8>) {
        let lane = if from_a { 0 } else { 1 };
        if self.conns[&conn].closed[lane] {
            return;
        }
        self.fifo(conn, from_a, Ev::Deliver { conn, to_b: from_a, bytes });
    }

    fn close(&mut self, conn: ConnId, from_a: bool) {
        let lane = if from_a { 0 } else { 1 };
        let c = self.conns.get_mut(&conn).expect("conn");
        if c.closed[lane] {
            return;
        }
        c.closed[lane] = true;
        self.fifo(conn, from_a, Ev::Close { conn, to_b: from_a });
    }

    fn run(&mut self) -> Result<(), HarnessError> {
        while let Some(((t, _), ev)) = self.queue.pop_first() {
            self.now = t;
            self.clock.set_millis(t);
            self.events_run += 1;
            if self.events_run > MAX_EVENTS {
                return Err(HarnessError::Stalled { tick: t });
            }
            match ev {
                Ev::Connect { conn } => self.on_connect(conn),
                Ev::Connected { conn, ok } => self.on_connected(conn, ok),
                Ev::Deliver { conn, to_b, bytes } => self.on_deliver(conn, to_b, bytes),
                Ev::Close { conn, to_b } => self.on_close(conn, to_b),
                Ev::ClientWake(c) => self.client_wake(c),
                Ev::Heartbeat => {
                    if self.active_clients > 0 {
                        for r in &self.relays {
                            let id = r.descriptor(100, 0).relay_id;
                            let _ = self.directory.heartbeat(&id);
                        }
                        self.at(t + HEARTBEAT_TICKS, Ev::Heartbeat);
                    }
                }
            }
        }
        Ok(())
    }

    // ----- connection events -------------------------------------------------

    fn on_connect(&mut self, conn: ConnId) {
        let (to, from) = {
            let c = &self.conns[&conn];
            (c.b_addr, c.a_addr)
        };
        let side = if let Some(i) = self.relays.iter().position(|r| r.address() == to) {
            let link = self.relays[i].accept_link(from);
            self.relay_links.insert((i, link), conn);
            Some(Side::RelayLink(i, link))
        } else if to.port() == SUBMIT_PORT {
            (0..self.gossip.len())
                .find(|&j| gossip_ip(j) == to.ip())
                .map(Side::GossipSubmit)
        } else {
            None
        };
        let ok = side.is_some();
        let c = self.conns.get_mut(&conn).expect("conn");
        if let Some(s) = side {
            c.b = s;
            c.established = true;
        } else {
            c.closed = [true, true];
        }
        self.fifo(conn, false, Ev::Connected { conn, ok });
    }

    fn on_connected(&mut self, conn: ConnId, ok: bool) {
        let a = self.conns[&conn].a;
        match (a, ok) {
            (Side::RelayExt(i, ext), true) => {
                self.relays[i].external_connected(ext);
                self.pump_relay(i, None);
            }
            (Side::RelayExt(i, ext), false) => {
                self.relays[i].external_failed(ext);
                self.pump_relay(i, None);
            }
            (Side::RelayLink(i, link), false) => {
                self.relays[i].link_failed(link);
                self.pump_relay(i, None);
            }
            (Side::ClientLink(c, link), false) => {
                self.clients[c].onion.link_failed(link);
                self.pump_client(c);
            }
            (Side::ClientDirect(c), false) => self.direct_failed(c),
            _ => {}
        }
    }

    fn on_close(&mut self, conn: ConnId, to_b: bool) {
        let side = {
            let c = &self.conns[&conn];
            if to_b {
                c.b
            } else {
                c.a
            }
        };
        match side {
            Side::RelayLink(i, link) => {
                self.relay_links.remove(&(i, link));
                self.relays[i].link_closed(link);
                self.pump_relay(i, None);
            }
            Side::RelayExt(i, ext) => {
                self.relay_exts.remove(&(i, ext));
                self.relays[i].external_closed(ext);
                self.pump_relay(i, None);
            }
            Side::ClientLink(c, link) => {
                self.client_links.remove(&(c, link));
                self.clients[c].onion.link_failed(link);
                self.pump_client(c);
            }
            _ => {}
        }
        // a closed peer will not read anything further either
        let lane = if to_b { 1 } else { 0 };
        if let Some(c) = self.conns.get_mut(&conn) {
            c.closed[lane] = true;
        }
    }

    fn on_deliver(&mut self, conn: ConnId, to_b: bool, bytes: Vec<u8>) {
        let (established, receiver_closed, kind, src, dst, side) = {
            let c = &self.conns[&conn];
            let (src, dst, side) = if to_b { (c.a_addr, c.b_addr, c.b) } else { (c.b_addr, c.a_addr, c.a) };
            (c.established, c.closed[if to_b { 1 } else { 0 }], c.kind, src, dst, side)
        };
        if !established || receiver_closed {
            return;
        }
        self.tap_record(conn, kind, src, dst, &bytes);
        match side {
            Side::RelayLink(i, link) => {
                let obs = self.relays[i].handle_cell(link, &bytes);
                self.pump_relay(i, Some((conn, src, dst, obs)));
            }
            Side::RelayExt(i, ext) => {
                let mut rec = VantageRecord::new(self.now, relay_name(i), Role::Exit, conn, kind);
                rec.src_addr = src.to_string();
                rec.dst_addr = dst.to_string();
                rec.n_bytes = bytes.len();
                rec.exit_conn = Some(conn);
                rec.action = Some("external_data".into());
                rec.visible_plaintext_digest = Some(plaintext_digest(&bytes));
                self.push_record(rec);
                self.relays[i].external_data(ext, &bytes);
                self.pump_relay(i, None);
            }
            Side::ClientLink(c, link) => {
                self.clients[c].onion.handle_cell(link, &bytes);
                self.pump_client(c);
            }
            Side::ClientDirect(c) => self.direct_reply(c, &bytes),
            Side::GossipSubmit(j) => self.gossip_submit(j, conn, src, dst, bytes),
            Side::GossipPeer(j) => self.gossip_peer(j, conn, to_b, src, dst, bytes),
            Side::Unattached => {}
        }
    }

    fn push_record(&mut self, mut rec: VantageRecord) {
        rec.seq = self.records.len() as u64;
        self.records.push(rec);
    }

    fn tap_record(&mut self, conn: ConnId, kind: ConnKind, src: SocketAddr, dst: SocketAddr, bytes: &[u8]) {
        let mut rec = VantageRecord::new(self.now, tap_name(conn), Role::Tap, conn, kind);
        rec.src_addr = src.to_string();
        rec.dst_addr = dst.to_string();
        rec.n_bytes = bytes.len();
        match kind {
            ConnKind::Link if bytes.len() == CELL_LEN => {
                rec.circuit_id = Some(u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]));
                rec.command = CellCommand::try_from(bytes[4]).ok().map(|c| c.as_str().to_string());
            }
            ConnKind::Link => {}
            ConnKind::Stream | ConnKind::Peer => {
                rec.visible_plaintext_digest = Some(plaintext_digest(bytes));
            }
        }
        self.push_record(rec);
    }

    // ----- relays -------------------------------------------------------------

    fn conn_key(&self, i: usize, key: crate::relay::CircKey) -> Option<(ConnId, u32)> {
        self.relay_links.get(&(i, key.link)).map(|c| (*c, key.circuit_id))
    }

    fn pump_relay(&mut self, i: usize, obs: Option<(ConnId, SocketAddr, SocketAddr, CellObservation)>) {
        let entry_key = obs
            .as_ref()
            .and_then(|(_, _, _, o)| o.entry)
            .and_then(|k| self.conn_key(i, k));
        if let (Some((_, _, _, o)), Some(ek)) = (&obs, entry_key) {
            if o.disposition == Disposition::Created && !self.circ_pos.contains_key(&ek) {
                if matches!(self.conns[&ek.0].a, Side::ClientLink(..)) {
                    self.circ_pos.insert(ek, 0);
                }
            }
        }
        let pos = entry_key.and_then(|k| self.circ_pos.get(&k).copied());
        let mut exit_conn = None;

        for out in self.relays[i].take_outputs() {
            match out {
                RelayOutput::Connect { link, addr } => {
                    let conn = self.open(ConnKind::Link, Side::RelayLink(i, link), relay_addr(i).ip(), addr);
                    self.relay_links.insert((i, link), conn);
                }
                RelayOutput::SendCell { link, cell } => {
                    let Some(&conn) = self.relay_links.get(&(i, link)) else {
                        continue;
                    };
                    if cell.command == CellCommand::Create {
                        if let Some(p) = pos {
                            self.circ_pos.insert((conn, cell.circuit_id), p + 1);
                        }
                    }
                    let from_a = self.conns[&conn].a == Side::RelayLink(i, link);
                    self.send(conn, from_a, encode_cell(&cell).expect("relay cells encode").to_vec());
                }
                RelayOutput::CloseLink { link } => {
                    if let Some(conn) = self.relay_links.remove(&(i, link)) {
                        let from_a = self.conns[&conn].a == Side::RelayLink(i, link);
                        self.close(conn, from_a);
                    }
                }
                RelayOutput::ExternalConnect { ext, addr } => {
                    let conn = self.open(ConnKind::Stream, Side::RelayExt(i, ext), relay_addr(i).ip(), addr);
                    self.relay_exts.insert((i, ext), conn);
                    exit_conn = Some(conn);
                }
                RelayOutput::ExternalSend { ext, bytes } => {
                    if let Some(&conn) = self.relay_exts.get(&(i, ext)) {
                        exit_conn = Some(conn);
                        self.send(conn, true, bytes);
                    }
                }
                RelayOutput::ExternalClose { ext } => {
                    if let Some(conn) = self.relay_exts.remove(&(i, ext)) {
                        self.close(conn, true);
                    }
                }
            }
        }
        self.relays[i].take_events();

        let Some((conn, src, dst, o)) = obs else {
            return;
        };
        let role = match pos {
            Some(0) => Role::Guard,
            Some(1) => Role::Middle,
            Some(_) => Role::Exit,
            None => Role::Relay,
        };
        let mut rec = VantageRecord::new(self.now, relay_name(i), role, conn, ConnKind::Link);
        rec.src_addr = src.to_string();
        rec.dst_addr = dst.to_string();
        rec.n_bytes = CELL_LEN;
        rec.circuit_id = Some(o.circuit_id);
        rec.command = o.command.map(|c| c.as_str().to_string());
        rec.direction = match o.direction {
            Direction::Forward => Some("forward".into()),
            Direction::Backward => Some("backward".into()),
            Direction::Unknown => None,
        };
        rec.action = Some(match &o.disposition {
            Disposition::Recognized(cmd) => format!("recognized:{cmd}"),
            other => format!("{other:?}").to_lowercase(),
        });
        rec.circuit_in = entry_key.map(|(c, id)| format!("{c}/{id}"));
        if let Some(out) = o.outbound.and_then(|k| self.conn_key(i, k)) {
            rec.circuit_out = Some(format!("{}/{}", out.0, out.1));
            rec.next_addr = Some(self.conns[&out.0].b_addr.to_string());
        }
        if o.plaintext.is_some() {
            rec.exit_conn = exit_conn;
        }
        rec.visible_plaintext_digest = o.plaintext.as_deref().map(plaintext_digest);
        self.push_record(rec);
    }

    // ----- gossip ---------------------------------------------------------------

    fn gossip_submit(&mut self, j: usize, conn: ConnId, src: SocketAddr, dst: SocketAddr, bytes: Vec<u8>) {
        let mut rec = VantageRecord::new(self.now, gossip_name(j), Role::Gossip, conn, ConnKind::Stream);
        rec.src_addr = src.to_string();
        rec.dst_addr = dst.to_string();
        rec.n_bytes = bytes.len();
        let c = self.conns.get_mut(&conn).expect("conn");
        c.dec[1].push(&bytes);
        let mut frames = Vec::new();
        while let Some(f) = c.dec[1].next_frame() {
            frames.push(f);
        }
        rec.visible_plaintext_digest = frames.last().map(|f| plaintext_digest(f));
        self.push_record(rec);
        for frame in frames {
            let (reply, sends) = self.gossip[j].submit(src, &frame);
            self.send(conn, false, reply.to_line());
            self.close(conn, false);
            self.flood(j, sends);
        }
    }

    fn gossip_peer(&mut self, j: usize, conn: ConnId, to_b: bool, src: SocketAddr, dst: SocketAddr, bytes: Vec<u8>) {
        let mut rec = VantageRecord::new(self.now, gossip_name(j), Role::Gossip, conn, ConnKind::Peer);
        rec.src_addr = src.to_string();
        rec.dst_addr = dst.to_string();
        rec.n_bytes = bytes.len();
        let lane = if to_b { 1 } else { 0 };
        let c = self.conns.get_mut(&conn).expect("conn");
        c.dec[lane].push(&bytes);
        let mut frames = Vec::new();
        while let Some(f) = c.dec[lane].next_frame() {
            frames.push(f);
        }
        let (a, b) = (c.a, c.b);
        rec.visible_plaintext_digest = frames.last().map(|f| plaintext_digest(f));
        self.push_record(rec);
        let sender = match if to_b { a } else { b } {
            Side::GossipPeer(k) => k,
            _ => return,
        };
        let from = self.gossip[sender].peer_addr();
        for frame in frames {
            let sends = self.gossip[j].on_gossip(from, &frame);
            self.flood(j, sends);
        }
    }

    fn flood(&mut self, j: usize, sends: Vec<GossipSend>) {
        for s in sends {
            let Some(&conn) = self.peer_conns.get(&(j, s.to)) else {
                continue;
            };
            let from_a = self.conns[&conn].a == Side::GossipPeer(j);
            if s.bytes.len() >= TXID_LEN {
                let mut id = [0u8; TXID_LEN];
                id.copy_from_slice(&s.bytes[s.bytes.len() - TXID_LEN..]);
                *self.link_tx.entry((conn, from_a, Txid(id))).or_insert(0) += 1;
            }
            self.send(conn, from_a, s.bytes);
        }
        self.check_propagation();
    }

    fn check_propagation(&mut self) {
        for t in self.txs.iter_mut().filter(|t| t.propagated_at.is_none()) {
            let id: Txid = t.txid.parse().expect("own txid");
            if self.gossip.iter().all(|g| g.mempool().contains_key(&id)) {
                t.propagated_at = Some(self.now);
            }
        }
    }

    // ----- clients --------------------------------------------------------------

    fn log_client(&mut self, c: usize, event: serde_json::Value) {
        self.client_events.push(ClientLogEntry {
            time: self.now,
            client: client_name(c),
            event,
        });
    }

    fn client_wake(&mut self, c: usize) {
        if self.clients[c].job.is_some() || self.clients[c].done {
            return;
        }
        let Some((tx, target)) = self.clients[c].pending.pop_front() else {
            self.clients[c].done = true;
            self.active_clients -= 1;
            return;
        };
        let txid = tx.txid();
        let tx_index = self.txs.len();
        self.txs.push(TxRecord {
            client: client_name(c),
            client_addr: self.clients[c].ip.to_string(),
            txid: txid.to_hex(),
            target: gossip_name(target),
            started_at: self.now,
            acked_at: None,
            propagated_at: None,
            path: Vec::new(),
        });
        self.tx_by_id.insert(txid, tx_index);
        self.log_client(c, json!({"event": "tx_started", "txid": txid.to_hex(), "target": gossip_name(target)}));
        self.clients[c].job = Some(Job {
            tx_index,
            tx,
            target,
            circ: None,
            stream: None,
            conn: None,
            reply: Vec::new(),
            attempts: 0,
        });
        match self.scenario.mode {
            Mode::Direct => self.direct_start(c),
            Mode::Onion => self.onion_place(c),
        }
    }

    fn finish_job(&mut self, c: usize, acked: bool) {
        let Some(job) = self.clients[c].job.take() else {
            return;
        };
        let txid = self.txs[job.tx_index].txid.clone();
        if acked {
            self.txs[job.tx_index].acked_at = Some(self.now);
            self.log_client(c, json!({"event": "tx_acked", "txid": txid}));
        } else {
            self.log_client(c, json!({"event": "tx_failed", "txid": txid}));
        }
        let gap = self.rng.gen_range(self.gap_ticks.0..=self.gap_ticks.1);
        self.at(self.now + gap, Ev::ClientWake(c));
    }

    fn direct_start(&mut self, c: usize) {
        let (bytes, target) = {
            let job = self.clients[c].job.as_ref().expect("job");
            (serialize_tx(&job.tx), job.target)
        };
        let to = SocketAddr::new(gossip_ip(target), SUBMIT_PORT);
        let conn = self.open(ConnKind::Stream, Side::ClientDirect(c), self.clients[c].ip, to);
        self.clients[c].job.as_mut().expect("job").conn = Some(conn);
        self.send(conn, true, bytes);
    }

    fn direct_failed(&mut self, c: usize) {
        let retry = self.clients[c].job.as_mut().is_some_and(|j| {
            j.attempts += 1;
            j.attempts < MAX_ATTEMPTS
        });
        if retry {
            self.direct_start(c);
        } else {
            self.finish_job(c, false);
        }
    }

    fn direct_reply(&mut self, c: usize, bytes: &[u8]) {
        let Some(job) = self.clients[c].job.as_mut() else {
            return;
        };
        job.reply.extend_from_slice(bytes);
        if !job.reply.contains(&b'\n') {
            return;
        }
        let ok = matches!(SubmitReply::from_line(&job.reply), Ok(SubmitReply::Ack { .. }));
        if let Some(conn) = job.conn {
            self.close(conn, true);
        }
        self.finish_job(c, ok);
    }

    /// Put the current job on an eligible circuit, building one if needed.
    fn onion_place(&mut self, c: usize) {
        let now_secs = self.now / 1000;
        let target = {
            let cl = &mut self.clients[c];
            cl.onion.rotation_check(now_secs);
            match cl.job.as_ref() {
                Some(j) if j.stream.is_none() => SocketAddr::new(gossip_ip(j.target), SUBMIT_PORT),
                _ => return,
            }
        };
        if let Some(circ) = self.clients[c].onion.eligible_circuit(now_secs) {
            match self.clients[c].onion.open_stream(circ, target) {
                Ok(sid) => {
                    let path = self.path_names(c, circ);
                    let job = self.clients[c].job.as_mut().expect("job");
                    job.circ = Some(circ);
                    job.stream = Some(sid);
                    self.txs[job.tx_index].path = path;
                    self.log_client(c, json!({"event": "stream_opened", "circ": circ.0, "stream_id": sid}));
                }
                Err(e) => self.log_client(c, json!({"event": "error", "message": e.to_string()})),
            }
        } else if self.clients[c].building.is_none() {
            let consensus = self.directory.fetch_consensus();
            let constraints = PathConstraints::new(SUBMIT_PORT).expect("nonzero port");
            match self.clients[c].onion.build_circuit(&consensus, &constraints, now_secs) {
                Ok(circ) => self.clients[c].building = Some(circ),
                Err(e) => {
                    self.log_client(c, json!({"event": "error", "message": e.to_string()}));
                    self.finish_job(c, false);
                }
            }
        }
        self.pump_client(c);
    }

    fn path_names(&self, c: usize, circ: CircHandle) -> Vec<String> {
        self.clients[c]
            .onion
            .circuit(circ)
            .map(|info| {
                info.path
                    .iter()
                    .filter_map(|a| self.relays.iter().position(|r| r.address() == *a))
                    .map(relay_name)
                    .collect()
            })
            .unwrap_or_default()
    }

    fn pump_client(&mut self, c: usize) {
        loop {
            let outputs = self.clients[c].onion.take_outputs();
            let events = self.clients[c].onion.take_events();
            if outputs.is_empty() && events.is_empty() {
                return;
            }
            for out in outputs {
                match out {
                    ClientOutput::Connect { link, addr } => {
                        let conn = self.open(ConnKind::Link, Side::ClientLink(c, link), self.clients[c].ip, addr);
                        self.client_links.insert((c, link), conn);
                    }
                    ClientOutput::SendCell { link, cell } => {
                        if let Some(&conn) = self.client_links.get(&(c, link)) {
                            self.send(conn, true, encode_cell(&cell).expect("client cells encode").to_vec());
                        }
                    }
                    ClientOutput::CloseLink { link } => {
                        if let Some(conn) = self.client_links.remove(&(c, link)) {
                            self.close(conn, true);
                        }
                    }
                }
            }
            for ev in events {
                self.log_client(c, serde_json::to_value(&ev).expect("event serializes"));
                self.on_client_event(c, ev);
            }
        }
    }

    fn on_client_event(&mut self, c: usize, ev: ClientEvent) {
        let job_on = |cl: &SimClient, circ: CircHandle, sid: Option<u16>| {
            cl.job
                .as_ref()
                .is_some_and(|j| j.circ == Some(circ) && (sid.is_none() || j.stream == sid))
        };
        match ev {
            ClientEvent::CircuitBuilt { circ, .. } => {
                if self.clients[c].building == Some(circ) {
                    self.clients[c].building = None;
                }
                self.onion_place(c);
            }
            ClientEvent::CircuitFailed { circ, .. } => {
                if self.clients[c].building == Some(circ) {
                    self.clients[c].building = None;
                    self.retry_onion(c);
                }
            }
            ClientEvent::StreamConnected { circ, stream_id } => {
                if job_on(&self.clients[c], circ, Some(stream_id)) {
                    let bytes = serialize_tx(&self.clients[c].job.as_ref().expect("job").tx);
                    if let Err(e) = self.clients[c].onion.send(circ, stream_id, &bytes) {
                        self.log_client(c, json!({"event": "error", "message": e.to_string()}));
                    }
                }
            }
            ClientEvent::StreamData { circ, stream_id, .. } => {
                if !job_on(&self.clients[c], circ, Some(stream_id)) {
                    return;
                }
                let data = self.clients[c].onion.take_received(circ, stream_id);
                let job = self.clients[c].job.as_mut().expect("job");
                job.reply.extend_from_slice(&data);
                if job.reply.contains(&b'\n') {
                    let ok = matches!(SubmitReply::from_line(&job.reply), Ok(SubmitReply::Ack { .. }));
                    let _ = self.clients[c].onion.close_stream(circ, stream_id);
                    self.finish_job(c, ok);
                }
            }
            ClientEvent::StreamEnded { circ, stream_id, .. } => {
                if job_on(&self.clients[c], circ, Some(stream_id)) {
                    let _ = self.clients[c].onion.close_stream(circ, stream_id);
                    let job = self.clients[c].job.as_mut().expect("job");
                    job.stream = None;
                    job.circ = None;
                    self.retry_onion(c);
                }
            }
            ClientEvent::CircuitClosed { .. } | ClientEvent::Rotated { .. } => {}
        }
    }

    fn retry_onion(&mut self, c: usize) {
        let retry = self.clients[c].job.as_mut().is_some_and(|j| {
            j.attempts += 1;
            j.attempts < MAX_ATTEMPTS
        });
        if retry {
            self.onion_place(c);
        } else if self.clients[c].job.is_some() {
            self.finish_job(c, false);
        }
    }

    // ----- transcript -------------------------------------------------------------

    fn finish(self) -> Transcript {
        let mut metrics = Metrics {
            end_time: self.now,
            records: self.records.len() as u64,
            ..Metrics::default()
        };
        for (i, r) in self.relays.iter().enumerate() {
            let m = r.metrics();
            metrics.cells_sent += m.cells_sent;
            metrics.per_relay.insert(
                relay_name(i),
                ByteCounts {
                    cells_in: m.cells_received,
                    cells_out: m.cells_sent,
                    bytes_in: m.bytes_received,
                    bytes_out: m.bytes_sent,
                },
            );
        }
        for c in &self.clients {
            let m = c.onion.metrics();
            metrics.cells_sent += m.cells_sent;
            metrics.circuits_built += m.circuits_built;
            metrics.circuit_failures += m.circuits_failed;
            metrics.rotations += m.rotations;
        }
        metrics.relay_cell_hops = self
            .records
            .iter()
            .filter(|r| matches!(r.role, Role::Guard | Role::Middle | Role::Exit))
            .filter(|r| r.command.as_deref() == Some("RELAY"))
            .count() as u64;
        metrics.gossip_transmissions = self.gossip.iter().map(|g| g.metrics().messages_sent).sum();
        metrics.max_link_tx_transmissions = self.link_tx.values().copied().max().unwrap_or(0);
        for t in &self.txs {
            if let Some(p) = t.propagated_at {
                metrics.tx_latency_ticks.insert(t.txid.clone(), p - t.started_at);
            }
        }
        let mempools = self
            .gossip
            .iter()
            .map(|g| MempoolDump {
                node: g.node_id().to_string(),
                txs: g
                    .mempool()
                    .iter()
                    .map(|(id, tx)| MempoolEntry {
                        txid: id.to_hex(),
                        payload: hex::encode(tx.payload()),
                    })
                    .collect(),
            })
            .collect();
        Transcript {
            scenario: self.scenario,
            records: self.records,
            client_events: self.client_events,
            txs: self.txs,
            mempools,
            metrics,
        }
    }
}
