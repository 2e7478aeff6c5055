//! Rule-based adversary: joins a coalition's own records on identifiers the
//! coalition actually saw and reports which sender addresses it can tie to
//! which transactions.
//!
//! Public knowledge is limited to the set of client addresses and the
//! transactions that ended up in mempools.

use std::collections::{BTreeMap, BTreeSet};
use std::net::{IpAddr, SocketAddr};

use serde::Serialize;

use crate::txgossip::{plaintext_digest, serialize_tx, Transaction};

use super::transcript::{ConnKind, Role, Transcript, VantageRecord};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Link {
    pub client_addr: String,
    pub txid: String,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind((0..n).collect())
    }

    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.0[root] != root {
            root = self.0[root];
        }
        let mut cur = x;
        while self.0[cur] != root {
            let next = self.0[cur];
            self.0[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

fn ip_of(addr: &str) -> Option<IpAddr> {
    addr.parse::<SocketAddr>().map(|a| a.ip()).ok()
}

/// Identifiers under which a record can be joined with others.
fn join_keys(r: &VantageRecord) -> Vec<String> {
    let mut keys = Vec::new();
    match r.conn_kind {
        ConnKind::Link => {
            let relay = matches!(r.role, Role::Guard | Role::Middle | Role::Exit | Role::Relay);
            if relay && (r.circuit_in.is_some() || r.circuit_out.is_some()) {
                keys.extend(r.circuit_in.iter().map(|c| format!("c:{c}")));
                keys.extend(r.circuit_out.iter().map(|c| format!("c:{c}")));
            } else if let Some(id) = r.circuit_id {
                keys.push(format!("c:{}/{id}", r.conn));
            }
            keys.extend(r.exit_conn.iter().map(|c| format!("s:{c}")));
        }
        ConnKind::Stream => keys.push(format!("s:{}", r.conn)),
        ConnKind::Peer => {}
    }
    keys
}

/// Public transactions by plaintext digest of their serialized form.
fn known_digests(t: &Transcript) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for m in &t.mempools {
        for e in &m.txs {
            let Ok(payload) = hex::decode(&e.payload) else { continue };
            let Ok(tx) = Transaction::new(payload) else { continue };
            out.insert(plaintext_digest(&serialize_tx(&tx)), tx.txid().to_hex());
        }
    }
    out
}

pub fn client_addresses(t: &Transcript) -> BTreeSet<IpAddr> {
    t.txs.iter().filter_map(|x| x.client_addr.parse().ok()).collect()
}

struct Flow {
    observers: BTreeSet<String>,
    records: Vec<usize>,
}

pub fn adversary_link(t: &Transcript, coalition: &[String]) -> BTreeSet<Link> {
    let members: BTreeSet<&str> = coalition.iter().map(String::as_str).collect();
    let recs: Vec<&VantageRecord> = t
        .records
        .iter()
        .filter(|r| members.contains(r.observer.as_str()))
        .collect();
    let clients = client_addresses(t);
    let digests = known_digests(t);

    let mut uf = UnionFind::new(recs.len());
    let mut first: BTreeMap<String, usize> = BTreeMap::new();
    for (i, r) in recs.iter().enumerate() {
        for k in join_keys(r) {
            match first.get(&k) {
                Some(&j) => uf.union(i, j),
                None => {
                    first.insert(k, i);
                }
            }
        }
    }

    if members.len() > 1 {
        extend_window_join(&recs, &clients, &mut uf);
    }

    let mut flows: BTreeMap<usize, Flow> = BTreeMap::new();
    for (i, r) in recs.iter().enumerate() {
        let f = flows.entry(uf.find(i)).or_insert_with(|| Flow {
            observers: BTreeSet::new(),
            records: Vec::new(),
        });
        f.observers.insert(r.observer.clone());
        f.records.push(i);
    }

    let mut links = BTreeSet::new();
    for flow in flows.values() {
        let mut senders = BTreeSet::new();
        let mut txids = BTreeSet::new();
        for &i in &flow.records {
            let r = recs[i];
            for addr in [&r.src_addr, &r.dst_addr] {
                if let Some(ip) = ip_of(addr).filter(|ip| clients.contains(ip)) {
                    senders.insert(ip.to_string());
                }
            }
            if let Some(txid) = r.visible_plaintext_digest.as_ref().and_then(|d| digests.get(d)) {
                txids.insert(txid.clone());
            }
        }
        for s in &senders {
            for x in &txids {
                links.insert(Link {
                    client_addr: s.clone(),
                    txid: x.clone(),
                });
            }
        }
    }
    links
}

/// Collusion across a hidden middle hop.
///
/// A client-facing flow that forwarded its first opaque cell to relay M at
/// `t1` and heard back from M at `t3` is joined with a terminal flow at a
/// different observer whose circuit was created by M at `t2`, when
/// `t1 < t2 < t3` and the pairing is unique in both directions.
fn extend_window_join(recs: &[&VantageRecord], clients: &BTreeSet<IpAddr>, uf: &mut UnionFind) {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..recs.len() {
        groups.entry(uf.find(i)).or_default().push(i);
    }

    struct Front {
        root: usize,
        observer: String,
        middle: IpAddr,
        t1: u64,
        t3: u64,
    }
    struct Back {
        root: usize,
        observer: String,
        prev: IpAddr,
        t2: u64,
    }
    let mut fronts = Vec::new();
    let mut backs = Vec::new();

    for (&root, members) in &groups {
        let client_facing = members.iter().any(|&i| {
            recs[i].conn_kind == ConnKind::Link
                && ip_of(&recs[i].src_addr).is_some_and(|ip| clients.contains(&ip))
        });
        let relay_recs: Vec<&VantageRecord> = members
            .iter()
            .map(|&i| recs[i])
            .filter(|r| matches!(r.role, Role::Guard | Role::Middle | Role::Exit | Role::Relay))
            .collect();
        if relay_recs.is_empty() {
            continue;
        }
        let observer = relay_recs[0].observer.clone();

        if client_facing {
            let fwd = relay_recs.iter().find(|r| {
                r.direction.as_deref() == Some("forward") && r.action.as_deref() == Some("forwarded")
            });
            if let Some(f) = fwd {
                let Some(middle) = f.next_addr.as_deref().and_then(ip_of) else { continue };
                let back = relay_recs.iter().find(|r| {
                    r.time > f.time
                        && r.direction.as_deref() == Some("backward")
                        && ip_of(&r.src_addr) == Some(middle)
                });
                if let Some(b) = back {
                    fronts.push(Front {
                        root,
                        observer,
                        middle,
                        t1: f.time,
                        t3: b.time,
                    });
                }
            }
            continue;
        }

        let terminal = relay_recs.iter().all(|r| r.circuit_out.is_none());
        let create = relay_recs
            .iter()
            .find(|r| r.action.as_deref() == Some("created"));
        if let (true, Some(c)) = (terminal, create) {
            if let Some(prev) = ip_of(&c.src_addr).filter(|ip| !clients.contains(ip)) {
                backs.push(Back {
                    root,
                    observer,
                    prev,
                    t2: c.time,
                });
            }
        }
    }

    let fits = |f: &Front, b: &Back| {
        f.observer != b.observer && f.middle == b.prev && f.t1 < b.t2 && b.t2 < f.t3
    };
    for f in &fronts {
        let matches: Vec<&Back> = backs.iter().filter(|b| fits(f, b)).collect();
        if let [b] = matches.as_slice() {
            if fronts.iter().filter(|g| fits(g, b)).count() == 1 {
                uf.union(f.root, b.root);
            }
        }
    }
}
