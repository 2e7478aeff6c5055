use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::txgossip::Txid;

use super::linker::adversary_link;
use super::scenario::Mode;
use super::sim::run_scenario;
use super::transcript::{ByteCounts, ConnKind, Role, Transcript, TranscriptError};
use super::HarnessError;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReplayError {
    #[error(transparent)]
    Parse(#[from] TranscriptError),
    #[error("invariant violated: {0}")]
    Violation(String),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("rerun diverges from transcript at line {line}")]
    Diverged { line: usize },
}

/// Every invariant violation, in check order.
pub fn validate(t: &Transcript) -> Vec<String> {
    let mut v = Vec::new();

    let mut prev: Option<(u64, u64)> = None;
    for (i, r) in t.records.iter().enumerate() {
        if r.seq != i as u64 || prev.is_some_and(|p| (r.time, r.seq) <= p) {
            v.push(format!("records out of order at seq {}", r.seq));
            break;
        }
        prev = Some((r.time, r.seq));
    }

    for r in &t.records {
        let leak = r.visible_plaintext_digest.is_some()
            && (matches!(r.role, Role::Guard | Role::Middle | Role::Relay)
                || (r.role == Role::Tap && r.conn_kind == ConnKind::Link));
        if leak {
            v.push(format!(
                "plaintext at non-exit observer {} (seq {})",
                r.observer, r.seq
            ));
        }
    }

    for m in &t.mempools {
        for e in &m.txs {
            let ok = hex::decode(&e.payload)
                .map(|p| Txid::of(&p).to_hex() == e.txid)
                .unwrap_or(false);
            if !ok {
                v.push(format!("txid mismatch in mempool of {}: {}", m.node, e.txid));
            }
        }
    }

    for x in t.txs.iter().filter(|x| x.acked_at.is_some()) {
        for m in &t.mempools {
            if !m.txs.iter().any(|e| e.txid == x.txid) {
                v.push(format!("tx {} missing from mempool of {}", x.txid, m.node));
            }
        }
    }
    v
}

/// Parse, check every invariant, rerun the scenario, and compare byte for byte.
pub fn replay(text: &str) -> Result<Transcript, ReplayError> {
    let t = Transcript::from_jsonl(text)?;
    if let Some(first) = validate(&t).into_iter().next() {
        return Err(ReplayError::Violation(first));
    }
    let rerun = run_scenario(&t.scenario)?.to_jsonl();
    if rerun != text {
        let line = rerun
            .lines()
            .zip(text.lines())
            .position(|(a, b)| a != b)
            .unwrap_or_else(|| rerun.lines().count().min(text.lines().count()))
            + 1;
        return Err(ReplayError::Diverged { line });
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Report {
    pub mode: Mode,
    pub seed: u64,
    pub txs: usize,
    pub acked: usize,
    pub propagated: usize,
    pub cells_sent: u64,
    pub relay_cell_hops: u64,
    pub per_relay: BTreeMap<String, ByteCounts>,
    pub tx_latency_ticks: BTreeMap<String, u64>,
    /// Links found by coalitions of exactly one observer, summed.
    pub single_observer_links: usize,
    /// Transactions some single observer links to their sender.
    pub txs_linked_by_single_observer: usize,
    pub violations: Vec<String>,
}

pub fn metrics_report(t: &Transcript) -> Report {
    let mut single = 0;
    let mut linked = std::collections::BTreeSet::new();
    for obs in t.observers() {
        let links = adversary_link(t, std::slice::from_ref(&obs));
        single += links.len();
        for l in links {
            let truth = t
                .txs
                .iter()
                .any(|x| x.txid == l.txid && x.client_addr == l.client_addr);
            if truth {
                linked.insert(l.txid);
            }
        }
    }
    Report {
        mode: t.scenario.mode,
        seed: t.scenario.seed,
        txs: t.txs.len(),
        acked: t.txs.iter().filter(|x| x.acked_at.is_some()).count(),
        propagated: t.txs.iter().filter(|x| x.propagated_at.is_some()).count(),
        cells_sent: t.metrics.cells_sent,
        relay_cell_hops: t.metrics.relay_cell_hops,
        per_relay: t.metrics.per_relay.clone(),
        tx_latency_ticks: t.metrics.tx_latency_ticks.clone(),
        single_observer_links: single,
        txs_linked_by_single_observer: linked.len(),
        violations: validate(t),
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode: {} seed: {}", self.mode, self.seed)?;
        writeln!(
            f,
            "transactions: {} acked: {} fully propagated: {}",
            self.txs, self.acked, self.propagated
        )?;
        writeln!(f, "cells sent: {} relay cell hops: {}", self.cells_sent, self.relay_cell_hops)?;
        for (relay, b) in &self.per_relay {
            writeln!(
                f,
                "  {relay}: {} cells in, {} cells out, {} bytes in, {} bytes out",
                b.cells_in, b.cells_out, b.bytes_in, b.bytes_out
            )?;
        }
        for (txid, ticks) in &self.tx_latency_ticks {
            writeln!(f, "  tx {}: {ticks} ticks to full propagation", &txid[..16])?;
        }
        writeln!(f, "single-observer links: {}", self.single_observer_links)?;
        writeln!(
            f,
            "transactions linked by a single observer: {}/{}",
            self.txs_linked_by_single_observer, self.txs
        )?;
        if self.violations.is_empty() {
            write!(f, "violations: none")
        } else {
            write!(f, "violations: {}", self.violations.join("; "))
        }
    }
}
