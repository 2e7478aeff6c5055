use std::collections::BTreeSet;

use tomen::harness::replay::ReplayError;
use tomen::harness::transcript::ConnKind;
use tomen::harness::{
    adversary_link, metrics_report, replay, run_scenario, validate, HarnessError, Mode, Role, Scenario,
    ScenarioError, Topology, Transcript,
};

fn onion(seed: u64) -> Scenario {
    Scenario {
        seed,
        ..Scenario::default()
    }
}

fn direct(seed: u64) -> Scenario {
    Scenario {
        mode: Mode::Direct,
        ..onion(seed)
    }
}

fn truth(t: &Transcript) -> BTreeSet<(String, String)> {
    t.txs.iter().map(|x| (x.client_addr.clone(), x.txid.clone())).collect()
}

#[test]
fn same_seed_same_bytes() {
    for s in [onion(11), direct(11)] {
        assert_eq!(run_scenario(&s).unwrap().to_jsonl(), run_scenario(&s).unwrap().to_jsonl());
    }
    assert_ne!(
        run_scenario(&onion(11)).unwrap().to_jsonl(),
        run_scenario(&onion(12)).unwrap().to_jsonl()
    );
}

#[test]
fn direct_gossip_sees_client_and_plaintext() {
    let s = Scenario {
        n_clients: 1,
        tx_per_client: 1,
        ..direct(1)
    };
    let t = run_scenario(&s).unwrap();
    let tx = &t.txs[0];
    let rec = t
        .records
        .iter()
        .find(|r| r.observer == tx.target && r.conn_kind == ConnKind::Stream)
        .unwrap();
    assert!(rec.src_addr.starts_with(&format!("{}:", tx.client_addr)));
    assert!(rec.visible_plaintext_digest.is_some());
    let links = adversary_link(&t, &[tx.target.clone()]);
    assert!(links.iter().any(|l| l.client_addr == tx.client_addr && l.txid == tx.txid));
}

#[test]
fn onion_exit_sees_plaintext_guard_sees_client() {
    let t = run_scenario(&onion(2)).unwrap();
    let tx = &t.txs[0];
    let (guard, exit) = (&tx.path[0], &tx.path[2]);
    assert!(t
        .records
        .iter()
        .any(|r| &r.observer == exit && r.role == Role::Exit && r.visible_plaintext_digest.is_some()));
    let guard_recs: Vec<_> = t
        .records
        .iter()
        .filter(|r| &r.observer == guard && r.role == Role::Guard)
        .collect();
    assert!(guard_recs.iter().any(|r| r.src_addr.starts_with(&format!("{}:", tx.client_addr))));
    assert!(guard_recs.iter().all(|r| r.visible_plaintext_digest.is_none()));
    // the exit never hears from a client address
    assert!(t
        .records
        .iter()
        .filter(|r| r.role == Role::Exit)
        .all(|r| !r.src_addr.starts_with("10.0.3.")));
}

#[test]
fn onion_single_observers_link_nothing() {
    for seed in 0..20 {
        let t = run_scenario(&onion(seed)).unwrap();
        for obs in t.observers() {
            assert!(adversary_link(&t, &[obs.clone()]).is_empty(), "seed {seed} observer {obs}");
        }
    }
}

#[test]
fn direct_single_observer_links_every_tx() {
    for seed in 0..20 {
        let t = run_scenario(&direct(seed)).unwrap();
        let report = metrics_report(&t);
        assert_eq!(report.txs_linked_by_single_observer, t.txs.len(), "seed {seed}");
    }
}

#[test]
fn guard_exit_coalition_links_without_false_positives() {
    let mut found = 0;
    for seed in 0..20 {
        let t = run_scenario(&onion(seed)).unwrap();
        let tx = &t.txs[0];
        let links = adversary_link(&t, &[tx.path[0].clone(), tx.path[2].clone()]);
        let real = truth(&t);
        assert!(links.iter().all(|l| real.contains(&(l.client_addr.clone(), l.txid.clone()))));
        if links.iter().any(|l| l.txid == tx.txid) {
            found += 1;
        }
    }
    assert!(found >= 18, "{found}/20");
}

#[test]
fn fresh_transcript_replays_cleanly() {
    let text = run_scenario(&onion(4)).unwrap().to_jsonl();
    let t = replay(&text).unwrap();
    assert!(validate(&t).is_empty());
}

#[test]
fn forged_middle_digest_is_a_violation() {
    let mut t = run_scenario(&onion(5)).unwrap();
    let rec = t.records.iter_mut().find(|r| r.role == Role::Middle).unwrap();
    rec.visible_plaintext_digest = Some("00".repeat(32));
    let err = replay(&t.to_jsonl()).unwrap_err();
    match err {
        ReplayError::Violation(msg) => assert!(msg.starts_with("plaintext at non-exit observer"), "{msg}"),
        other => panic!("{other}"),
    }
}

#[test]
fn edited_transcript_diverges_on_rerun() {
    let mut t = run_scenario(&onion(6)).unwrap();
    t.records[3].n_bytes += 1;
    assert!(matches!(replay(&t.to_jsonl()), Err(ReplayError::Diverged { .. })));
}

#[test]
fn corrupted_mempool_entry_is_a_violation() {
    let mut t = run_scenario(&direct(7)).unwrap();
    t.mempools[0].txs[0].payload = "00".into();
    assert!(validate(&t)[0].starts_with("txid mismatch"));
}

#[test]
fn single_tx_crosses_three_hops() {
    let s = Scenario {
        n_clients: 1,
        tx_per_client: 1,
        ..onion(8)
    };
    let t = run_scenario(&s).unwrap();
    let data_hops = t
        .records
        .iter()
        .filter(|r| matches!(r.role, Role::Guard | Role::Middle | Role::Exit))
        .filter(|r| r.direction.as_deref() == Some("forward") && r.command.as_deref() == Some("RELAY"))
        .filter(|r| r.time >= t.txs[0].started_at)
        .count();
    assert!(data_hops >= 3);
    assert!(t.metrics.relay_cell_hops >= 3);
    assert!(t
        .records
        .iter()
        .any(|r| r.role == Role::Exit && r.action.as_deref() == Some("recognized:DATA")));
}

#[test]
fn two_relay_onion_is_rejected_before_running() {
    let s = Scenario {
        n_relays: 2,
        ..onion(1)
    };
    assert_eq!(
        run_scenario(&s).unwrap_err(),
        HarnessError::Scenario(ScenarioError::TooFewRelays(2))
    );
}

#[test]
fn rotation_builds_fresh_circuits() {
    let s = Scenario {
        n_clients: 1,
        tx_per_client: 3,
        rotation: true,
        ..onion(9)
    };
    let t = run_scenario(&s).unwrap();
    assert_eq!(t.txs.iter().filter(|x| x.acked_at.is_some()).count(), 3);
    assert_eq!(t.metrics.circuits_built, 3);
    assert!(t.metrics.rotations >= 2);
    assert!(validate(&t).is_empty());
}

#[test]
fn flooding_reaches_every_mempool_once_per_link() {
    for seed in 0..10 {
        let s = Scenario {
            n_gossip: 12,
            topology: Topology::Random,
            n_clients: 3,
            ..direct(seed)
        };
        let t = run_scenario(&s).unwrap();
        for m in &t.mempools {
            assert_eq!(m.txs.len(), t.txs.len(), "seed {seed} {}", m.node);
        }
        assert!(t.metrics.max_link_tx_transmissions <= 1);
    }
}

#[test]
fn line_topology_reaches_the_far_end() {
    let s = Scenario {
        n_gossip: 3,
        topology: Topology::Line,
        n_clients: 1,
        tx_per_client: 1,
        ..direct(10)
    };
    let t = run_scenario(&s).unwrap();
    assert!(t.mempools.iter().all(|m| m.txs.len() == 1));
}

#[test]
fn transcript_roundtrips_through_jsonl() {
    let t = run_scenario(&onion(13)).unwrap();
    assert_eq!(Transcript::from_jsonl(&t.to_jsonl()).unwrap(), t);
}
