use std::collections::{BTreeMap, VecDeque};
use std::net::SocketAddr;
use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use tomen::cellwire::{encode_relay_payload, RelayCommand, RelayPayload, CELL_PAYLOAD_LEN};
use tomen::clock::ManualClock;
use tomen::crypto::{derive_hop_keys, gen_keypair, LayerCipherState};
use tomen::directory::{
    select_path, Consensus, Directory, EgressPolicy, PathConstraints, RelayDescriptor,
    LIVENESS_WINDOW_SECS,
};
use tomen::harness::scenario::is_connected;
use tomen::harness::{run_scenario, validate, Mode, Scenario, Topology};
use tomen::txgossip::{parse_tx, serialize_tx, GossipNode, Transaction};

fn block() -> impl Strategy<Value = [u8; CELL_PAYLOAD_LEN]> {
    proptest::collection::vec(any::<u8>(), CELL_PAYLOAD_LEN).prop_map(|v| v.try_into().unwrap())
}

fn descriptor(i: u64, policy: EgressPolicy) -> RelayDescriptor {
    let kp = gen_keypair(&mut ChaCha20Rng::seed_from_u64(i));
    let addr = format!("10.0.1.{}:9001", i + 1).parse().unwrap();
    RelayDescriptor::new(&kp.public(), addr, policy, 1000, 0)
}

fn consensus(policies: &[EgressPolicy]) -> Consensus {
    let mut descriptors: Vec<_> = policies
        .iter()
        .enumerate()
        .map(|(i, p)| descriptor(i as u64, p.clone()))
        .collect();
    descriptors.sort_by(|a, b| a.relay_id.cmp(&b.relay_id));
    Consensus { issued_at: 0, descriptors }
}

/// Random spanning tree plus extra edges.
fn connected_graph() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (2usize..12).prop_flat_map(|n| {
        let parents: Vec<_> = (1..n).map(|i| 0..i).collect();
        let extra = proptest::collection::vec((0..n, 0..n), 0..n);
        (Just(n), parents, extra).prop_map(|(n, parents, extra)| {
            let mut edges: Vec<_> = parents.into_iter().enumerate().map(|(i, p)| (p, i + 1)).collect();
            for (a, b) in extra {
                let e = (a.min(b), a.max(b));
                if a != b && !edges.contains(&e) {
                    edges.push(e);
                }
            }
            (n, edges)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn three_layers_peel_to_the_original(
        secrets in any::<[[u8; 32]; 3]>(),
        original in block(),
    ) {
        let hops = secrets.map(|s| derive_hop_keys(&s));
        let mut b = original;
        for h in hops.iter().rev() {
            h.forward_cipher().apply_layer(&mut b).unwrap();
        }
        prop_assert_ne!(b, original);
        for h in &hops {
            h.forward_cipher().apply_layer(&mut b).unwrap();
        }
        prop_assert_eq!(b, original);
    }

    #[test]
    fn any_flipped_bit_fails_the_digest(
        secret in any::<[u8; 32]>(),
        data in proptest::collection::vec(any::<u8>(), 0..=200),
        bit in 0usize..CELL_PAYLOAD_LEN * 8,
    ) {
        let keys = derive_hop_keys(&secret);
        let mut b = encode_relay_payload(&RelayPayload::new(RelayCommand::Data, 7, data)).unwrap();
        keys.forward_digest.clone().seal_block(&mut b);
        prop_assert!(keys.forward_digest.clone().verify_block(&b));
        b[bit / 8] ^= 1 << (bit % 8);
        prop_assert!(!keys.forward_digest.clone().verify_block(&b));
    }

    #[test]
    fn counters_advance_and_never_repeat_a_keystream(
        key in any::<[u8; 32]>(),
        start in 0u64..1 << 40,
        n in 1usize..16,
    ) {
        let mut st = LayerCipherState::with_counter(key, start);
        let mut seen = Vec::new();
        for _ in 0..n {
            let mut ks = [0u8; CELL_PAYLOAD_LEN];
            st.apply_layer(&mut ks).unwrap();
            prop_assert!(!seen.contains(&ks));
            seen.push(ks);
        }
        prop_assert_eq!(st.counter(), start + n as u64);
    }

    #[test]
    fn tampered_serialized_tx_is_rejected(
        payload in proptest::collection::vec(any::<u8>(), 1..=64),
        pick in any::<prop::sample::Index>(),
        bit in 0u8..8,
    ) {
        let mut bytes = serialize_tx(&Transaction::new(payload).unwrap());
        let i = pick.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(parse_tx(&bytes).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn paths_are_distinct_and_exit_permits_port(
        exits in proptest::collection::vec(any::<bool>(), 3..12),
        seed in any::<u64>(),
    ) {
        prop_assume!(exits.iter().any(|&e| e));
        let policies: Vec<_> = exits
            .iter()
            .map(|&e| if e { EgressPolicy::allow([8333]) } else { EgressPolicy::ExitDisallowed })
            .collect();
        let c = consensus(&policies);
        let p = select_path(&c, &PathConstraints::new(8333).unwrap(), &mut ChaCha20Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(p.exit.egress_policy.allows(8333));
        prop_assert_ne!(&p.guard.relay_id, &p.middle.relay_id);
        prop_assert_ne!(&p.guard.relay_id, &p.exit.relay_id);
        prop_assert_ne!(&p.middle.relay_id, &p.exit.relay_id);
    }

    #[test]
    fn consensus_holds_exactly_the_live_relays(ages in proptest::collection::vec(0u64..300, 1..10)) {
        let clock = ManualClock::new(0);
        let mut dir = Directory::new(Arc::new(clock.clone()));
        let ids: Vec<String> = (0..ages.len() as u64)
            .map(|i| {
                let d = descriptor(i, EgressPolicy::ExitDisallowed);
                let id = d.relay_id.clone();
                dir.publish(d).unwrap();
                id
            })
            .collect();
        let end = 1000;
        for (id, age) in ids.iter().zip(&ages) {
            clock.set_millis((end - age) * 1000);
            dir.heartbeat(id).unwrap();
        }
        clock.set_millis(end * 1000);
        let live = dir.fetch_consensus();
        for (id, age) in ids.iter().zip(&ages) {
            prop_assert_eq!(live.find(id).is_some(), *age <= LIVENESS_WINDOW_SECS);
        }
    }

    #[test]
    fn flooding_reaches_everyone_once_per_link(
        (n, edges) in connected_graph(),
        origin in any::<prop::sample::Index>(),
        payload in proptest::collection::vec(any::<u8>(), 1..=32),
    ) {
        prop_assert!(is_connected(n, &edges));
        let addr = |i: usize| -> SocketAddr { format!("10.0.2.{}:8334", i + 1).parse().unwrap() };
        let mut nodes: Vec<GossipNode> = (0..n)
            .map(|i| {
                let peers = edges
                    .iter()
                    .filter_map(|&(a, b)| if a == i { Some(addr(b)) } else if b == i { Some(addr(a)) } else { None })
                    .collect();
                GossipNode::new(format!("g{i}"), addr(i), peers)
            })
            .collect();
        let index: BTreeMap<SocketAddr, usize> = (0..n).map(|i| (addr(i), i)).collect();
        let bytes = serialize_tx(&Transaction::new(payload).unwrap());
        let start = origin.index(n);
        let (_, sends) = nodes[start].submit("10.0.3.1:5000".parse().unwrap(), &bytes);
        let mut queue: VecDeque<_> = sends.into_iter().map(|s| (start, s)).collect();
        let mut per_link: BTreeMap<(usize, usize), u32> = BTreeMap::new();
        while let Some((from, send)) = queue.pop_front() {
            let to = index[&send.to];
            *per_link.entry((from, to)).or_default() += 1;
            for s in nodes[to].on_gossip(addr(from), &send.bytes) {
                queue.push_back((to, s));
            }
        }
        prop_assert!(nodes.iter().all(|g| g.mempool().len() == 1));
        prop_assert!(per_link.values().all(|&c| c == 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn scenarios_are_deterministic_and_clean(
        seed in any::<u64>(),
        onion in any::<bool>(),
        n_gossip in 1usize..5,
        topology in prop_oneof![Just(Topology::Line), Just(Topology::Ring), Just(Topology::Star)],
    ) {
        let s = Scenario {
            seed,
            mode: if onion { Mode::Onion } else { Mode::Direct },
            n_relays: 4,
            n_gossip,
            topology,
            n_clients: 2,
            tx_per_client: 1,
            ..Scenario::default()
        };
        let a = run_scenario(&s).unwrap();
        let b = run_scenario(&s).unwrap();
        prop_assert_eq!(a.to_jsonl(), b.to_jsonl());
        prop_assert_eq!(validate(&a), Vec::<String>::new());
    }
}

#[test]
fn uniform_selection_stays_within_five_points() {
    let c = consensus(&vec![EgressPolicy::allow([80]); 10]);
    let cons = PathConstraints::new(80).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let trials = 10_000;
    let mut counts: [BTreeMap<String, u32>; 3] = Default::default();
    for _ in 0..trials {
        let p = select_path(&c, &cons, &mut rng).unwrap();
        for (pos, hop) in p.hops().iter().enumerate() {
            *counts[pos].entry(hop.relay_id.clone()).or_default() += 1;
        }
    }
    for pos in &counts {
        assert_eq!(pos.len(), 10);
        for &k in pos.values() {
            let share = k as f64 / trials as f64;
            assert!((share - 0.1).abs() <= 0.05, "share {share}");
        }
    }
}
