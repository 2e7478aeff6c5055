//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::Value;
use tomen::cellwire::{decode_relay_payload, encode_relay_payload, RelayCommand, RelayPayload, RELAY_DATA_LEN};
use tomen::client::{CircuitState, OnionClient, StreamState, ROTATION_SECS};
use tomen::crypto::{
    client_create_payload, client_finish, derive_hop_keys, gen_keypair, relay_respond, HopKeys, CREATED_PAYLOAD_LEN,
};
use tomen::directory::{Consensus, EgressPolicy, PathConstraints};
use tomen::harness::instant::InstantNet;
use tomen::harness::linker::Link;
use tomen::harness::transcript::ConnKind;
use tomen::harness::{adversary_link, metrics_report, replay, run_scenario, Mode, Role, Scenario, Topology};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// A1: 1000 builds over 10 relays, half of them exits for the target port.
fn path_shape() -> Outcome {
    const PORT: u16 = 8333;
    let policies = (0..10)
        .map(|i| {
            if i % 2 == 0 {
                EgressPolicy::allow([PORT])
            } else {
                EgressPolicy::ExitDisallowed
            }
        })
        .collect();
    let mut net = InstantNet::with_policies(policies, 1);
    let consensus = Consensus {
        issued_at: 0,
        descriptors: net.descriptors(),
    };
    let constraints = PathConstraints::new(PORT).unwrap();
    let mut exits = BTreeSet::new();
    for seed in 0..1000u64 {
        net.client = OnionClient::new(seed);
        let circ = net.client.build_circuit(&consensus, &constraints, 0).map_err(|e| e.to_string())?;
        net.run();
        let info = net.client.circuit(circ).ok_or(format!("seed {seed}: circuit vanished"))?;
        check(info.state == CircuitState::Open, || format!("seed {seed}: {:?}", info.state))?;
        check(info.hop_count == 3, || format!("seed {seed}: {} hops", info.hop_count))?;
        let distinct: BTreeSet<_> = info.path.iter().collect();
        check(distinct.len() == 3, || format!("seed {seed}: repeated hop {:?}", info.path))?;
        let exit = consensus.find(&info.relay_ids[2]).unwrap();
        check(exit.egress_policy.allows(PORT), || format!("seed {seed}: exit refuses {PORT}"))?;
        exits.insert(info.path[2]);
        net.client.destroy_circuit(circ);
        net.run();
    }
    Ok(format!("1000/1000 circuits open with 3 distinct hops and a permitting exit ({} exits used)", exits.len()))
}

fn random_keys(rng: &mut ChaCha20Rng) -> HopKeys {
    let mut secret = [0u8; 32];
    rng.fill_bytes(&mut secret);
    derive_hop_keys(&secret)
}

/// Exit-side test: all-zero recognized field and a matching digest.
fn recognized(block: &[u8; tomen::cellwire::CELL_PAYLOAD_LEN], keys: &HopKeys) -> bool {
    block[0..2] == [0, 0] && keys.forward_digest.clone().verify_block(block)
}

/// A2: triple layering then in-order peeling is the identity; one wrong key breaks it.
fn layer_algebra() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let mut broken = 0;
    for trial in 0..10_000 {
        let hops = [random_keys(&mut rng), random_keys(&mut rng), random_keys(&mut rng)];
        let len = rng.gen_range(0..=RELAY_DATA_LEN);
        let mut data = vec![0u8; len];
        rng.fill_bytes(&mut data);
        let rp = RelayPayload::new(RelayCommand::Data, rng.gen_range(1..=u16::MAX), data);

        let mut block = encode_relay_payload(&rp).unwrap();
        hops[2].forward_digest.clone().seal_block(&mut block);
        for h in hops.iter().rev() {
            h.forward_cipher().apply_layer(&mut block).unwrap();
        }
        let sealed = block;

        for (i, h) in hops.iter().enumerate() {
            h.forward_cipher().apply_layer(&mut block).unwrap();
            if i < 2 {
                check(!recognized(&block, h), || format!("trial {trial}: hop {i} recognized early"))?;
            }
        }
        check(recognized(&block, &hops[2]), || format!("trial {trial}: exit did not recognize"))?;
        let got = decode_relay_payload(&block).map_err(|e| e.to_string())?;
        check(got.data == rp.data && got.stream_id == rp.stream_id, || {
            format!("trial {trial}: payload changed")
        })?;

        let wrong = trial % 3;
        let mut block = sealed;
        for (i, h) in hops.iter().enumerate() {
            let mut cipher = if i == wrong {
                random_keys(&mut rng).forward_cipher()
            } else {
                h.forward_cipher()
            };
            cipher.apply_layer(&mut block).unwrap();
        }
        check(!recognized(&block, &hops[2]), || format!("trial {trial}: wrong key at hop {wrong} still recognized"))?;
        broken += 1;
    }
    Ok(format!("10000 triples peel to the original; {broken}/10000 single-wrong-key peels rejected"))
}

/// A3: 100 handshakes agree; tampering and impostors are refused.
fn handshake_agreement() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    for seed in 0..100 {
        let identity = gen_keypair(&mut rng);
        let eph = gen_keypair(&mut rng);
        let (created, relay_keys) =
            relay_respond(&client_create_payload(&eph), &identity, &mut rng).map_err(|e| e.to_string())?;
        let client_keys = client_finish(&eph, &created, &identity.public()).map_err(|e| e.to_string())?;
        check(client_keys == relay_keys, || format!("seed {seed}: keys differ"))?;

        let mut tampered = created;
        let at = rng.gen_range(0..CREATED_PAYLOAD_LEN);
        tampered[at] ^= 1 << rng.gen_range(0..8);
        check(client_finish(&eph, &tampered, &identity.public()).is_err(), || {
            format!("seed {seed}: tampered byte {at} accepted")
        })?;
        let impostor = gen_keypair(&mut rng);
        check(client_finish(&eph, &created, &impostor.public()).is_err(), || {
            format!("seed {seed}: wrong identity accepted")
        })?;
    }
    Ok("100/100 agree; 100/100 tampered and 100/100 wrong-identity responses rejected".into())
}

/// A4: the demo binary over 50 seeds.
fn echo_ip() -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_tomen"))
        .args(["--json", "demo", "echo-ip", "--runs", "50", "--seed", "1"])
        .output()
        .map_err(|e| e.to_string())?;
    let text = String::from_utf8_lossy(&out.stdout);
    let events: Vec<Value> = text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect();
    let runs: Vec<&Value> = events.iter().filter(|e| e["event"] == "run").collect();
    check(runs.len() == 50, || {
        format!("{} runs reported, exit {:?}: {}", runs.len(), out.status.code(), String::from_utf8_lossy(&out.stderr))
    })?;
    let mut exits = BTreeSet::new();
    for r in &runs {
        let run = &r["run"];
        let ip = |k: &str| -> String {
            let v = run[k].as_str().unwrap_or_default();
            v.parse::<SocketAddr>().map(|a| a.ip().to_string()).unwrap_or_else(|_| v.to_string())
        };
        let (client, exit) = (ip("client"), ip("exit"));
        check(ip("direct_echo") == client, || format!("seed {}: direct echoed {}", run["seed"], ip("direct_echo")))?;
        check(ip("onion_echo") == exit && exit != client, || {
            format!("seed {}: onion echoed {} (exit {exit}, client {client})", run["seed"], ip("onion_echo"))
        })?;
        exits.insert(exit);
    }
    check(out.status.success(), || format!("exit code {:?}", out.status.code()))?;
    Ok(format!("50/50 runs: direct echoes the client, onion echoes the exit ({} distinct exits)", exits.len()))
}

fn onion_scenario(seed: u64) -> Scenario {
    Scenario {
        seed,
        mode: Mode::Onion,
        n_relays: 5,
        n_gossip: 3,
        n_clients: 2,
        tx_per_client: 2,
        ..Scenario::default()
    }
}

/// A5: no single observer links anything in onion mode; plaintext stays past the exit.
fn knowledge_partition() -> Outcome {
    let mut direct_linked = 0;
    for seed in 0..100 {
        let t = run_scenario(&onion_scenario(seed)).map_err(|e| e.to_string())?;
        for obs in t.observers() {
            let links = adversary_link(&t, std::slice::from_ref(&obs));
            check(links.is_empty(), || format!("seed {seed}: {obs} alone links {links:?}"))?;
        }
        for r in t.records.iter().filter(|r| r.visible_plaintext_digest.is_some()) {
            let allowed = match r.role {
                Role::Exit | Role::Gossip => true,
                Role::Tap => r.conn_kind != ConnKind::Link,
                _ => false,
            };
            check(allowed, || format!("seed {seed}: plaintext at {} ({:?}, seq {})", r.observer, r.role, r.seq))?;
        }

        let d = run_scenario(&Scenario {
            mode: Mode::Direct,
            ..onion_scenario(seed)
        })
        .map_err(|e| e.to_string())?;
        let report = metrics_report(&d);
        check(report.txs_linked_by_single_observer == d.txs.len(), || {
            format!("seed {seed}: direct mode linked {}/{}", report.txs_linked_by_single_observer, d.txs.len())
        })?;
        direct_linked += report.txs_linked_by_single_observer;
    }
    Ok(format!(
        "100 onion scenarios: 0 single-observer links, plaintext only at exits and gossip; direct: {direct_linked}/400 txs linked"
    ))
}

/// A6: exact ten-minute boundary on a logical clock, with draining.
fn rotation() -> Outcome {
    let target: SocketAddr = "10.0.4.1:7000".parse().unwrap();
    let mut net = InstantNet::new(4, &[7000], 6);
    let consensus = Consensus {
        issued_at: 0,
        descriptors: net.descriptors(),
    };
    let constraints = PathConstraints::new(7000).unwrap();
    let old = net.client.build_circuit(&consensus, &constraints, 0).map_err(|e| e.to_string())?;
    net.run();
    let old_id = net.client.circuit(old).map(|c| c.circuit_id);

    net.client.rotation_check(ROTATION_SECS - 10);
    let sid = net.client.open_stream(old, target).map_err(|e| e.to_string())?;
    net.run();
    check(net.client.stream_state(old, sid) == Some(StreamState::Connected), || "stream at 590 s".into())?;

    net.client.rotation_check(ROTATION_SECS - 1);
    check(net.client.is_eligible(old, ROTATION_SECS - 1), || "ineligible at 599 s".into())?;
    check(net.client.eligible_circuit(ROTATION_SECS - 1) == Some(old), || "not chosen at 599 s".into())?;
    net.client.rotation_check(ROTATION_SECS);
    check(!net.client.is_eligible(old, ROTATION_SECS), || "still eligible at 600 s".into())?;
    check(net.client.eligible_circuit(ROTATION_SECS).is_none(), || "old circuit offered at 600 s".into())?;

    net.client.send(old, sid, b"in flight").map_err(|e| e.to_string())?;
    net.run();
    check(net.client.take_received(old, sid) == b"in flight", || "in-flight stream broke".into())?;
    check(net.client.circuit(old).map(|c| c.circuit_id) == old_id, || "circuit id changed".into())?;

    let new = net.client.build_circuit(&consensus, &constraints, ROTATION_SECS).map_err(|e| e.to_string())?;
    net.run();
    check(net.client.eligible_circuit(ROTATION_SECS) == Some(new), || "replacement not used".into())?;
    check(net.client.circuit(old).is_some(), || "old circuit closed with a stream open".into())?;
    net.client.close_stream(old, sid).map_err(|e| e.to_string())?;
    net.run();
    check(net.client.circuit(old).is_none(), || "drained circuit not closed".into())?;
    Ok("eligible at 599 s, ineligible at 600 s; stream opened at 590 s drained on the old circuit".into())
}

/// A7: flooding on 50 random connected graphs.
fn gossip_completeness() -> Outcome {
    let mut biggest = 0;
    for seed in 0..50u64 {
        let n = 2 + (seed as usize * 7) % 19;
        biggest = biggest.max(n);
        let s = Scenario {
            seed,
            mode: Mode::Direct,
            n_gossip: n,
            topology: Topology::Random,
            n_clients: 2,
            tx_per_client: 2,
            ..Scenario::default()
        };
        let t = run_scenario(&s).map_err(|e| e.to_string())?;
        let txids: BTreeSet<&str> = t.txs.iter().map(|x| x.txid.as_str()).collect();
        for m in &t.mempools {
            let have: BTreeSet<&str> = m.txs.iter().map(|e| e.txid.as_str()).collect();
            check(have == txids, || format!("seed {seed}: {} holds {}/{}", m.node, have.len(), txids.len()))?;
        }
        check(t.metrics.max_link_tx_transmissions <= 1, || {
            format!("seed {seed}: a txid crossed one link {} times", t.metrics.max_link_tx_transmissions)
        })?;
    }
    Ok(format!("50 topologies up to {biggest} nodes: every mempool complete, at most 1 send per link per txid"))
}

/// A8: reruns are byte-identical and replay cleanly.
fn determinism() -> Outcome {
    let scenarios = [
        onion_scenario(8),
        Scenario {
            mode: Mode::Direct,
            topology: Topology::Random,
            n_gossip: 12,
            ..onion_scenario(80)
        },
        Scenario {
            rotation: true,
            n_clients: 1,
            tx_per_client: 3,
            ..onion_scenario(800)
        },
        Scenario {
            n_relays: 9,
            topology: Topology::Complete,
            ..onion_scenario(8000)
        },
    ];
    for s in &scenarios {
        let a = run_scenario(s).map_err(|e| e.to_string())?.to_jsonl();
        let b = run_scenario(s).map_err(|e| e.to_string())?.to_jsonl();
        check(a == b, || format!("seed {} differs between runs", s.seed))?;
        replay(&a).map_err(|e| format!("seed {}: {e}", s.seed))?;
    }
    Ok(format!("{} scenarios rerun byte-identical and replay without violations", scenarios.len()))
}

/// A9: guard and exit together link the sender.
fn collusion() -> Outcome {
    let mut found = 0;
    for seed in 0..100 {
        let t = run_scenario(&onion_scenario(seed)).map_err(|e| e.to_string())?;
        let tx = &t.txs[0];
        let links = adversary_link(&t, &[tx.path[0].clone(), tx.path[2].clone()]);
        let truth: BTreeSet<Link> = t
            .txs
            .iter()
            .map(|x| Link {
                client_addr: x.client_addr.clone(),
                txid: x.txid.clone(),
            })
            .collect();
        check(links.is_subset(&truth), || format!("seed {seed}: false link"))?;
        found += links.contains(&Link {
            client_addr: tx.client_addr.clone(),
            txid: tx.txid.clone(),
        }) as usize;
    }
    check(found >= 95, || format!("guard+exit linked only {found}/100 runs"))?;
    Ok(format!("guard+exit linked the sender in {found}/100 runs (need >= 95), no false links"))
}

fn main() -> ExitCode {
    let criteria: [(&str, &str, fn() -> Outcome, Duration); 9] = [
        ("A1", "path shape", path_shape, Duration::from_secs(10)),
        ("A2", "layer algebra", layer_algebra, Duration::from_secs(10)),
        ("A3", "handshake agreement", handshake_agreement, Duration::from_secs(5)),
        ("A4", "echo-ip reproduction", echo_ip, Duration::from_secs(30)),
        ("A5", "knowledge partition", knowledge_partition, Duration::from_secs(60)),
        ("A6", "rotation", rotation, Duration::from_secs(1)),
        ("A7", "gossip completeness", gossip_completeness, Duration::from_secs(30)),
        ("A8", "determinism", determinism, Duration::from_secs(10)),
        ("A9", "collusion demonstration", collusion, Duration::from_secs(120)),
    ];
    let mut failed = 0;
    for (id, name, f, limit) in criteria {
        let start = Instant::now();
        let result = f();
        let took = start.elapsed();
        let result = match result {
            Ok(detail) if took > limit => Err(format!("{detail}, but took {took:.2?} (limit {limit:?})")),
            other => other,
        };
        match result {
            Ok(detail) => println!("{id} {name}: PASS {detail} [{took:.2?} <= {limit:?}]"),
            Err(why) => {
                failed += 1;
                println!("{id} {name}: FAIL {why} [{took:.2?}]");
            }
        }
    }
    println!("acceptance: {}/9 passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
