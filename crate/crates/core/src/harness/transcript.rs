//! Line-delimited JSON transcripts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Guard,
    Middle,
    Exit,
    /// A relay record that could not be placed on a circuit.
    Relay,
    Gossip,
    Tap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConnKind {
    /// Cell link between client and relay or relay and relay.
    Link,
    /// Plaintext submission stream into a gossip node.
    Stream,
    /// Gossip peer connection.
    Peer,
}

/// One thing one observer saw.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VantageRecord {
    pub time: u64,
    pub seq: u64,
    pub observer: String,
    pub role: Role,
    pub src_addr: String,
    pub dst_addr: String,
    pub n_bytes: usize,
    pub conn: u64,
    pub conn_kind: ConnKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub circuit_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<String>,
    /// `conn/circuit` of the circuit's client-side hop at this relay.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub circuit_in: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub circuit_out: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_addr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_conn: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visible_plaintext_digest: Option<String>,
}

impl VantageRecord {
    pub fn new(
        time: u64,
        observer: impl Into<String>,
        role: Role,
        conn: u64,
        conn_kind: ConnKind,
    ) -> Self {
        VantageRecord {
            time,
            seq: 0,
            observer: observer.into(),
            role,
            src_addr: String::new(),
            dst_addr: String::new(),
            n_bytes: 0,
            conn,
            conn_kind,
            circuit_id: None,
            command: None,
            direction: None,
            action: None,
            circuit_in: None,
            circuit_out: None,
            next_addr: None,
            exit_conn: None,
            visible_plaintext_digest: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientLogEntry {
    pub time: u64,
    pub client: String,
    pub event: serde_json::Value,
}

/// What actually happened to one transaction. Used to score the linker, never by it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxRecord {
    pub client: String,
    pub client_addr: String,
    pub txid: String,
    pub target: String,
    pub started_at: u64,
    #[serde(default)]
    pub acked_at: Option<u64>,
    #[serde(default)]
    pub propagated_at: Option<u64>,
    /// Guard, middle and exit observer ids in onion mode.
    #[serde(default)]
    pub path: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MempoolEntry {
    pub txid: String,
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MempoolDump {
    pub node: String,
    pub txs: Vec<MempoolEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteCounts {
    pub cells_in: u64,
    pub cells_out: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    pub end_time: u64,
    pub cells_sent: u64,
    pub relay_cell_hops: u64,
    pub records: u64,
    pub per_relay: BTreeMap<String, ByteCounts>,
    pub gossip_transmissions: u64,
    /// Largest number of times one txid crossed one directed peer link.
    pub max_link_tx_transmissions: u64,
    pub tx_latency_ticks: BTreeMap<String, u64>,
    pub circuits_built: u64,
    pub circuit_failures: u64,
    pub rotations: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Scenario(Scenario),
    Record(VantageRecord),
    ClientEvent(ClientLogEntry),
    Tx(TxRecord),
    Mempool(MempoolDump),
    Metrics(Metrics),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub scenario: Scenario,
    pub records: Vec<VantageRecord>,
    pub client_events: Vec<ClientLogEntry>,
    pub txs: Vec<TxRecord>,
    pub mempools: Vec<MempoolDump>,
    pub metrics: Metrics,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TranscriptError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("transcript has no {0} line")]
    Missing(&'static str),
}

impl Transcript {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |line: Line| {
            out.push_str(&serde_json::to_string(&line).expect("transcript line serializes"));
            out.push('\n');
        };
        push(Line::Scenario(self.scenario.clone()));
        self.records.iter().cloned().for_each(|r| push(Line::Record(r)));
        self.client_events.iter().cloned().for_each(|e| push(Line::ClientEvent(e)));
        self.txs.iter().cloned().for_each(|t| push(Line::Tx(t)));
        self.mempools.iter().cloned().for_each(|m| push(Line::Mempool(m)));
        push(Line::Metrics(self.metrics.clone()));
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TranscriptError> {
        let mut scenario = None;
        let mut metrics = None;
        let mut t = Transcript {
            scenario: Scenario::default(),
            records: Vec::new(),
            client_events: Vec::new(),
            txs: Vec::new(),
            mempools: Vec::new(),
            metrics: Metrics::default(),
        };
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let line: Line = serde_json::from_str(raw).map_err(|e| TranscriptError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            match line {
                Line::Scenario(s) => scenario = Some(s),
                Line::Record(r) => t.records.push(r),
                Line::ClientEvent(e) => t.client_events.push(e),
                Line::Tx(x) => t.txs.push(x),
                Line::Mempool(m) => t.mempools.push(m),
                Line::Metrics(m) => metrics = Some(m),
            }
        }
        t.scenario = scenario.ok_or(TranscriptError::Missing("scenario"))?;
        t.metrics = metrics.ok_or(TranscriptError::Missing("metrics"))?;
        Ok(t)
    }

    pub fn observers(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.records.iter().map(|r| r.observer.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }
}
