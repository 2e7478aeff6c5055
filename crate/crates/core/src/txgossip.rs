//! Transactions, their wire form, and flooding gossip nodes with mempools.
//!
//! Wire form of one transaction (used for both submissions and peer gossip):
//!
//! ```text
//! [ payload_len: u16 BE ][ payload ][ txid: 32 bytes = SHA-256(payload) ]
//! ```
//!
//! A submit stream carries exactly one transaction and is answered with one
//! JSON line (see [`SubmitReply`]). A peer stream starts with a hello frame
//! (`u16` length + the sender's peer listen address in UTF-8) followed by
//! back-to-back transactions.

use std::collections::BTreeMap;
use std::fmt;
use std::net::SocketAddr;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAX_TX_PAYLOAD: usize = 400;
pub const TXID_LEN: usize = 32;
const LEN_PREFIX: usize = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TxError {
    #[error("payload length {0} outside 1..={MAX_TX_PAYLOAD}")]
    BadPayloadLength(usize),
    #[error("truncated transaction: need {expected} bytes, have {got}")]
    Truncated { expected: usize, got: usize },
    #[error("{0} trailing bytes after transaction")]
    TrailingBytes(usize),
    #[error("txid does not match payload hash")]
    TxidMismatch,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Txid(pub [u8; TXID_LEN]);

impl Txid {
    pub fn of(payload: &[u8]) -> Self {
        Txid(Sha256::digest(payload).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Txid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Txid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Txid({})", &self.to_hex()[..12])
    }
}

impl FromStr for Txid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = hex::decode(s).map_err(|e| e.to_string())?;
        let arr: [u8; TXID_LEN] = bytes.try_into().map_err(|_| "txid must be 32 bytes".to_string())?;
        Ok(Txid(arr))
    }
}

impl Serialize for Txid {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Txid {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Transaction {
    txid: Txid,
    payload: Vec<u8>,
}

impl Transaction {
    pub fn new(payload: impl Into<Vec<u8>>) -> Result<Self, TxError> {
        let payload = payload.into();
        if payload.is_empty() || payload.len() > MAX_TX_PAYLOAD {
            return Err(TxError::BadPayloadLength(payload.len()));
        }
        Ok(Transaction {
            txid: Txid::of(&payload),
            payload,
        })
    }

    pub fn txid(&self) -> Txid {
        self.txid
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }
}

pub fn serialize_tx(tx: &Transaction) -> Vec<u8> {
    let mut out = Vec::with_capacity(LEN_PREFIX + tx.payload.len() + TXID_LEN);
    out.extend_from_slice(&(tx.payload.len() as u16).to_be_bytes());
    out.extend_from_slice(&tx.payload);
    out.extend_from_slice(&tx.txid.0);
    out
}

pub fn parse_tx(bytes: &[u8]) -> Result<Transaction, TxError> {
    if bytes.len() < LEN_PREFIX {
        return Err(TxError::Truncated {
            expected: LEN_PREFIX,
            got: bytes.len(),
        });
    }
    let len = u16::from_be_bytes([bytes[0], bytes[1]]) as usize;
    if len == 0 || len > MAX_TX_PAYLOAD {
        return Err(TxError::BadPayloadLength(len));
    }
    let expected = LEN_PREFIX + len + TXID_LEN;
    if bytes.len() < expected {
        return Err(TxError::Truncated {
            expected,
            got: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(TxError::TrailingBytes(bytes.len() - expected));
    }
    let payload = &bytes[LEN_PREFIX..LEN_PREFIX + len];
    let txid = Txid::of(payload);
    if txid.0[..] != bytes[LEN_PREFIX + len..] {
        return Err(TxError::TxidMismatch);
    }
    Ok(Transaction {
        txid,
        payload: payload.to_vec(),
    })
}

/// SHA-256 of arbitrary plaintext, hex. Used for vantage records.
pub fn plaintext_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Splits a byte stream into transaction frames without validating them.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        FrameDecoder::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn next_frame(&mut self) -> Option<Vec<u8>> {
        if self.buf.len() < LEN_PREFIX {
            return None;
        }
        let len = u16::from_be_bytes([self.buf[0], self.buf[1]]) as usize;
        let total = LEN_PREFIX + len + TXID_LEN;
        if self.buf.len() < total {
            return None;
        }
        Some(self.buf.drain(..total).collect())
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

pub fn encode_hello(addr: SocketAddr) -> Vec<u8> {
    let s = addr.to_string();
    let mut out = (s.len() as u16).to_be_bytes().to_vec();
    out.extend_from_slice(s.as_bytes());
    out
}

/// Returns the announced address and bytes consumed, or `None` if more input is needed.
pub fn decode_hello(buf: &[u8]) -> Option<Result<(SocketAddr, usize), String>> {
    if buf.len() < LEN_PREFIX {
        return None;
    }
    let len = u16::from_be_bytes([buf[0], buf[1]]) as usize;
    if buf.len() < LEN_PREFIX + len {
        return None;
    }
    let parsed = std::str::from_utf8(&buf[LEN_PREFIX..LEN_PREFIX + len])
        .map_err(|e| e.to_string())
        .and_then(|s| s.parse::<SocketAddr>().map_err(|e| e.to_string()))
        .map(|addr| (addr, LEN_PREFIX + len));
    Some(parsed)
}

/// The one-line JSON answer to a submission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum SubmitReply {
    Ack { txid: Txid, known: bool },
    Reject { reason: String },
}

impl SubmitReply {
    pub fn to_line(&self) -> Vec<u8> {
        let mut line = serde_json::to_vec(self).expect("reply serializes");
        line.push(b'\n');
        line
    }

    pub fn from_line(line: &[u8]) -> Result<Self, String> {
        let trimmed = line.strip_suffix(b"\n").unwrap_or(line);
        serde_json::from_slice(trimmed).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GossipSend {
    pub to: SocketAddr,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SubmitLogEntry {
    pub from: SocketAddr,
    pub reply: SubmitReply,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GossipMetrics {
    pub accepted: u64,
    pub duplicates: u64,
    pub rejected_submissions: u64,
    pub malformed_from_peers: u64,
    pub messages_sent: u64,
}

/// A gossip node's state: mempool plus flooding rules. Transport is the caller's job.
#[derive(Debug)]
pub struct GossipNode {
    node_id: String,
    peer_addr: SocketAddr,
    peers: Vec<SocketAddr>,
    mempool: BTreeMap<Txid, Transaction>,
    submit_log: Vec<SubmitLogEntry>,
    metrics: GossipMetrics,
}

impl GossipNode {
    pub fn new(node_id: impl Into<String>, peer_addr: SocketAddr, peers: Vec<SocketAddr>) -> Self {
        GossipNode {
            node_id: node_id.into(),
            peer_addr,
            peers,
            mempool: BTreeMap::new(),
            submit_log: Vec::new(),
            metrics: GossipMetrics::default(),
        }
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn peer_addr(&self) -> SocketAddr {
        self.peer_addr
    }

    pub fn peers(&self) -> &[SocketAddr] {
        &self.peers
    }

    pub fn mempool(&self) -> &BTreeMap<Txid, Transaction> {
        &self.mempool
    }

    pub fn submit_log(&self) -> &[SubmitLogEntry] {
        &self.submit_log
    }

    pub fn metrics(&self) -> GossipMetrics {
        self.metrics
    }

    pub fn submit(&mut self, from: SocketAddr, bytes: &[u8]) -> (SubmitReply, Vec<GossipSend>) {
        let (reply, sends) = match parse_tx(bytes) {
            Err(e) => {
                self.metrics.rejected_submissions += 1;
                (SubmitReply::Reject { reason: e.to_string() }, Vec::new())
            }
            Ok(tx) => {
                let txid = tx.txid();
                if self.mempool.contains_key(&txid) {
                    self.metrics.duplicates += 1;
                    (SubmitReply::Ack { txid, known: true }, Vec::new())
                } else {
                    let sends = self.accept(tx, None);
                    (SubmitReply::Ack { txid, known: false }, sends)
                }
            }
        };
        self.submit_log.push(SubmitLogEntry {
            from,
            reply: reply.clone(),
        });
        (reply, sends)
    }

    pub fn on_gossip(&mut self, from: SocketAddr, bytes: &[u8]) -> Vec<GossipSend> {
        match parse_tx(bytes) {
            Err(_) => {
                self.metrics.malformed_from_peers += 1;
                Vec::new()
            }
            Ok(tx) if self.mempool.contains_key(&tx.txid()) => {
                self.metrics.duplicates += 1;
                Vec::new()
            }
            Ok(tx) => self.accept(tx, Some(from)),
        }
    }

    fn accept(&mut self, tx: Transaction, from: Option<SocketAddr>) -> Vec<GossipSend> {
        let bytes = serialize_tx(&tx);
        self.mempool.insert(tx.txid(), tx);
        self.metrics.accepted += 1;
        let sends: Vec<GossipSend> = self
            .peers
            .iter()
            .filter(|p| Some(**p) != from)
            .map(|p| GossipSend {
                to: *p,
                bytes: bytes.clone(),
            })
            .collect();
        self.metrics.messages_sent += sends.len() as u64;
        sends
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn addr(s: &str) -> SocketAddr {
        s.parse().unwrap()
    }

    #[test]
    fn coffee_layout() {
        let tx = Transaction::new(b"coffee".to_vec()).unwrap();
        let bytes = serialize_tx(&tx);
        assert_eq!(&bytes[..2], &[0x00, 0x06]);
        assert_eq!(&bytes[2..8], b"coffee");
        assert_eq!(&bytes[8..], &Sha256::digest(b"coffee")[..]);
        assert_eq!(parse_tx(&bytes).unwrap(), tx);
    }

    #[test]
    fn flipped_bit_is_rejected() {
        let mut bytes = serialize_tx(&Transaction::new(b"coffee".to_vec()).unwrap());
        bytes[3] ^= 0x01;
        assert_eq!(parse_tx(&bytes), Err(TxError::TxidMismatch));
    }

    #[test]
    fn length_bounds() {
        assert_eq!(Transaction::new(Vec::new()), Err(TxError::BadPayloadLength(0)));
        assert_eq!(
            Transaction::new(vec![0u8; MAX_TX_PAYLOAD + 1]),
            Err(TxError::BadPayloadLength(401))
        );
        assert!(Transaction::new(vec![0u8; MAX_TX_PAYLOAD]).is_ok());
        let bytes = serialize_tx(&Transaction::new(b"abc".to_vec()).unwrap());
        assert!(matches!(parse_tx(&bytes[..10]), Err(TxError::Truncated { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(parse_tx(&long), Err(TxError::TrailingBytes(1)));
    }

    #[test]
    fn frame_decoder_splits_stream() {
        let a = serialize_tx(&Transaction::new(b"a".to_vec()).unwrap());
        let b = serialize_tx(&Transaction::new(b"bb".to_vec()).unwrap());
        let mut all = a.clone();
        all.extend_from_slice(&b);
        let mut dec = FrameDecoder::new();
        dec.push(&all[..5]);
        assert_eq!(dec.next_frame(), None);
        dec.push(&all[5..]);
        assert_eq!(dec.next_frame(), Some(a));
        assert_eq!(dec.next_frame(), Some(b));
        assert_eq!(dec.next_frame(), None);
    }

    #[test]
    fn hello_roundtrip() {
        let mut bytes = encode_hello(addr("10.0.2.1:8334"));
        bytes.push(0xaa);
        assert_eq!(decode_hello(&bytes[..3]), None);
        assert_eq!(decode_hello(&bytes), Some(Ok((addr("10.0.2.1:8334"), bytes.len() - 1))));
    }

    #[test]
    fn submit_fresh_known_and_malformed() {
        let peers = vec![addr("10.0.2.2:8334"), addr("10.0.2.3:8334")];
        let mut node = GossipNode::new("g0", addr("10.0.2.1:8334"), peers);
        let client = addr("10.0.3.1:40000");
        let tx = Transaction::new(b"pay bob".to_vec()).unwrap();
        let (reply, sends) = node.submit(client, &serialize_tx(&tx));
        assert_eq!(reply, SubmitReply::Ack { txid: tx.txid(), known: false });
        assert_eq!(sends.len(), 2);
        assert!(node.mempool().contains_key(&tx.txid()));

        let (reply, sends) = node.submit(client, &serialize_tx(&tx));
        assert_eq!(reply, SubmitReply::Ack { txid: tx.txid(), known: true });
        assert!(sends.is_empty());

        let (reply, sends) = node.submit(client, b"garbage");
        assert!(matches!(reply, SubmitReply::Reject { .. }));
        assert!(sends.is_empty());
        assert_eq!(node.mempool().len(), 1);
        assert_eq!(node.submit_log().len(), 3);
        assert_eq!(node.submit_log()[0].from, client);
    }

    #[test]
    fn gossip_excludes_sender_and_drops_known() {
        let a = addr("10.0.2.1:8334");
        let c = addr("10.0.2.3:8334");
        let mut b = GossipNode::new("b", addr("10.0.2.2:8334"), vec![a, c]);
        let bytes = serialize_tx(&Transaction::new(b"t".to_vec()).unwrap());
        let sends = b.on_gossip(a, &bytes);
        assert_eq!(sends, vec![GossipSend { to: c, bytes: bytes.clone() }]);
        assert!(b.on_gossip(c, &bytes).is_empty());
        assert!(b.on_gossip(c, b"junk").is_empty());
        assert_eq!(b.metrics().malformed_from_peers, 1);
    }

    #[test]
    fn reply_line_roundtrip() {
        let r = SubmitReply::Ack { txid: Txid::of(b"x"), known: false };
        let line = r.to_line();
        assert_eq!(*line.last().unwrap(), b'\n');
        assert_eq!(SubmitReply::from_line(&line).unwrap(), r);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn tx_roundtrip(payload in proptest::collection::vec(any::<u8>(), 1..=MAX_TX_PAYLOAD)) {
            let tx = Transaction::new(payload).unwrap();
            let bytes = serialize_tx(&tx);
            prop_assert_eq!(parse_tx(&bytes).unwrap(), tx);
        }
    }
}
