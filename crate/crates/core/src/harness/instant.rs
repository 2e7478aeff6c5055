//! Instant-delivery relay network driven entirely in memory.

use std::collections::{BTreeMap, VecDeque};
use std::net::SocketAddr;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::cellwire::encode_cell;
use crate::client::{ClientOutput, OnionClient};
use crate::crypto::gen_keypair;
use crate::directory::{EgressPolicy, RelayDescriptor};
use crate::relay::{CellObservation, ExtId, LinkId, Relay, RelayOutput};

/// Instant-delivery network of relays and one client. External connections
/// go to an echo service unless their address is listed in `unreachable`.
pub struct InstantNet {
    pub relays: Vec<Relay>,
    pub client: OnionClient,
    pub dead: Vec<SocketAddr>,
    pub unreachable: Vec<SocketAddr>,
    pub observations: Vec<(usize, CellObservation)>,
    /// Raw bytes of every cell a relay handled, parallel to `observations`.
    pub delivered: Vec<[u8; 512]>,
    pub external: BTreeMap<(usize, ExtId), Vec<u8>>,
    /// (relay index, link) -> where cells on it go
    ends: BTreeMap<(Option<usize>, LinkId), End>,
    queue: VecDeque<Msg>,
}

#[derive(Clone, Copy, Debug)]
enum End {
    Client(LinkId),
    Relay(usize, LinkId),
}

enum Msg {
    Cell(End, [u8; 512]),
    Closed(End),
    ExtConnected(usize, ExtId, bool),
    ExtData(usize, ExtId, Vec<u8>),
}

pub fn descriptors(relays: &[Relay]) -> Vec<RelayDescriptor> {
    relays.iter().map(|r| r.descriptor(100, 0)).collect()
}

impl InstantNet {
    /// `n` relays that all allow `exit_ports` (none: exit-disallowed).
    pub fn new(n: usize, exit_ports: &[u16], seed: u64) -> Self {
        let policy = if exit_ports.is_empty() {
            EgressPolicy::ExitDisallowed
        } else {
            EgressPolicy::allow(exit_ports.iter().copied())
        };
        Self::with_policies(vec![policy; n], seed)
    }

    /// One relay per policy, at 10.0.1.1, 10.0.1.2, ...
    pub fn with_policies(policies: Vec<EgressPolicy>, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let relays = policies
            .into_iter()
            .enumerate()
            .map(|(k, policy)| {
                let i = k + 1;
                Relay::new(
                    gen_keypair(&mut rng),
                    format!("10.0.1.{i}:9001").parse().unwrap(),
                    policy,
                    seed.wrapping_mul(1000).wrapping_add(i as u64),
                )
            })
            .collect();
        InstantNet {
            relays,
            client: OnionClient::new(seed),
            dead: Vec::new(),
            unreachable: Vec::new(),
            observations: Vec::new(),
            delivered: Vec::new(),
            external: BTreeMap::new(),
            ends: BTreeMap::new(),
            queue: VecDeque::new(),
        }
    }

    pub fn descriptors(&self) -> Vec<RelayDescriptor> {
        descriptors(&self.relays)
    }

    fn relay_at(&self, addr: SocketAddr) -> Option<usize> {
        if self.dead.contains(&addr) {
            return None;
        }
        self.relays.iter().position(|r| r.address() == addr)
    }

    fn connect(&mut self, from: End, addr: SocketAddr) -> bool {
        let Some(idx) = self.relay_at(addr) else {
            return false;
        };
        let peer: SocketAddr = match from {
            End::Client(_) => "10.0.3.1:40000".parse().unwrap(),
            End::Relay(i, _) => self.relays[i].address(),
        };
        let remote = self.relays[idx].accept_link(peer);
        let (key_from, key_to) = match from {
            End::Client(l) => ((None, l), (Some(idx), remote)),
            End::Relay(i, l) => ((Some(i), l), (Some(idx), remote)),
        };
        self.ends.insert(key_from, End::Relay(idx, remote));
        self.ends.insert(key_to, from);
        true
    }

    fn key(end: End) -> (Option<usize>, LinkId) {
        match end {
            End::Client(l) => (None, l),
            End::Relay(i, l) => (Some(i), l),
        }
    }

    fn send_from(&mut self, from: End, bytes: [u8; 512]) {
        if let Some(to) = self.ends.get(&Self::key(from)).copied() {
            self.queue.push_back(Msg::Cell(to, bytes));
        }
    }

    fn close_from(&mut self, from: End) {
        if let Some(to) = self.ends.remove(&Self::key(from)) {
            self.ends.remove(&Self::key(to));
            self.queue.push_back(Msg::Closed(to));
        }
    }

    fn pump_client(&mut self) {
        for out in self.client.take_outputs() {
            match out {
                ClientOutput::Connect { link, addr } => {
                    if !self.connect(End::Client(link), addr) {
                        self.queue.push_back(Msg::Closed(End::Client(link)));
                    }
                }
                ClientOutput::SendCell { link, cell } => {
                    self.send_from(End::Client(link), encode_cell(&cell).unwrap())
                }
                ClientOutput::CloseLink { link } => self.close_from(End::Client(link)),
            }
        }
    }

    fn pump_relay(&mut self, i: usize) {
        for out in self.relays[i].take_outputs() {
            match out {
                RelayOutput::Connect { link, addr } => {
                    if !self.connect(End::Relay(i, link), addr) {
                        self.queue.push_back(Msg::Closed(End::Relay(i, link)));
                    }
                }
                RelayOutput::SendCell { link, cell } => {
                    self.send_from(End::Relay(i, link), encode_cell(&cell).unwrap())
                }
                RelayOutput::CloseLink { link } => self.close_from(End::Relay(i, link)),
                RelayOutput::ExternalConnect { ext, addr } => {
                    let ok = !self.unreachable.contains(&addr);
                    if ok {
                        self.external.insert((i, ext), Vec::new());
                    }
                    self.queue.push_back(Msg::ExtConnected(i, ext, ok));
                }
                RelayOutput::ExternalSend { ext, bytes } => {
                    if let Some(buf) = self.external.get_mut(&(i, ext)) {
                        buf.extend_from_slice(&bytes);
                        self.queue.push_back(Msg::ExtData(i, ext, bytes));
                    }
                }
                RelayOutput::ExternalClose { ext } => {
                    self.external.remove(&(i, ext));
                }
            }
        }
    }

    /// Deliver until quiescent.
    pub fn run(&mut self) {
        loop {
            self.pump_client();
            for i in 0..self.relays.len() {
                self.pump_relay(i);
            }
            let Some(msg) = self.queue.pop_front() else {
                break;
            };
            match msg {
                Msg::Cell(End::Client(l), bytes) => self.client.handle_cell(l, &bytes),
                Msg::Cell(End::Relay(i, l), bytes) => {
                    if self.dead.contains(&self.relays[i].address()) {
                        continue;
                    }
                    let obs = self.relays[i].handle_cell(l, &bytes);
                    self.observations.push((i, obs));
                    self.delivered.push(bytes);
                }
                Msg::Closed(End::Client(l)) => self.client.link_failed(l),
                Msg::Closed(End::Relay(i, l)) => self.relays[i].link_closed(l),
                Msg::ExtConnected(i, ext, ok) => {
                    if ok {
                        self.relays[i].external_connected(ext)
                    } else {
                        self.relays[i].external_failed(ext)
                    }
                }
                Msg::ExtData(i, ext, bytes) => {
                    // echo service
                    if self.external.contains_key(&(i, ext)) {
                        self.relays[i].external_data(ext, &bytes);
                    }
                }
            }
        }
    }
}
