use std::fs;
use std::path::Path;

use serde_json::json;
use tomen::harness::linker::Link;
use tomen::harness::{adversary_link, metrics_report, replay as replay_transcript, run_scenario, Mode, Report, Scenario, Transcript};

use crate::failure::Failure;
use crate::output::Output;
use crate::SimRunArgs;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

/// Whether the linker found what the mode predicts.
fn expectation(report: &Report) -> Result<(), String> {
    if !report.violations.is_empty() {
        return Err(format!("invariants violated: {}", report.violations.join("; ")));
    }
    match report.mode {
        Mode::Onion if report.single_observer_links > 0 => Err(format!(
            "onion mode but single observers found {} links",
            report.single_observer_links
        )),
        Mode::Direct if report.txs_linked_by_single_observer < report.txs => Err(format!(
            "direct mode but only {}/{} transactions linked by a single observer",
            report.txs_linked_by_single_observer, report.txs
        )),
        _ => Ok(()),
    }
}

fn show(out: &Output, report: &Report) -> Result<(), Failure> {
    out.emit(report, json!({"event": "report", "report": report}));
    expectation(report).map_err(Failure::Verdict)
}

pub fn run(out: &Output, args: SimRunArgs) -> Result<(), Failure> {
    let mut s = match &args.config {
        Some(p) => Scenario::parse(&read(p)?)?,
        None => Scenario::default(),
    };
    if let Some(v) = args.seed {
        s.seed = v;
    }
    if let Some(v) = args.mode {
        s.mode = v;
    }
    if let Some(v) = args.relays {
        s.n_relays = v;
    }
    if let Some(v) = args.gossip {
        s.n_gossip = v;
    }
    if let Some(v) = args.topology {
        s.topology = v;
    }
    if let Some(v) = args.clients {
        s.n_clients = v;
    }
    if let Some(v) = args.txs {
        s.tx_per_client = v;
    }
    s.rotation |= args.rotation;
    s.validate()?;

    let t = run_scenario(&s)?;
    if let Some(p) = &args.out {
        fs::write(p, t.to_jsonl()).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
    }
    show(out, &metrics_report(&t))
}

pub fn replay(out: &Output, path: &Path) -> Result<(), Failure> {
    let t = replay_transcript(&read(path)?)?;
    out.emit("replay: transcript reproduced byte for byte", json!({"event": "replayed"}));
    show(out, &metrics_report(&t))
}

const ROLES: [&str; 3] = ["guard", "middle", "exit"];

pub fn link(out: &Output, path: &Path, coalition: &[String]) -> Result<(), Failure> {
    let t = Transcript::from_jsonl(&read(path)?).map_err(|e| Failure::Config(format!("transcript: {e}")))?;
    let by_role = coalition.iter().all(|c| ROLES.contains(&c.as_str()));
    if !by_role {
        let links = adversary_link(&t, coalition);
        for Link { client_addr, txid } in &links {
            out.emit(
                format!("{client_addr} sent {txid}"),
                json!({"event": "link", "client_addr": client_addr, "txid": txid}),
            );
        }
        out.emit(
            format!("{} links found by {}", links.len(), coalition.join("+")),
            json!({"event": "summary", "links": links.len(), "coalition": coalition}),
        );
        return Ok(());
    }

    let mut linked = 0;
    let mut considered = 0;
    for tx in t.txs.iter().filter(|x| x.path.len() == ROLES.len()) {
        considered += 1;
        let members: Vec<String> = coalition
            .iter()
            .map(|role| tx.path[ROLES.iter().position(|r| r == role).unwrap()].clone())
            .collect();
        let found = adversary_link(&t, &members).contains(&Link {
            client_addr: tx.client_addr.clone(),
            txid: tx.txid.clone(),
        });
        linked += found as usize;
        out.emit(
            format!(
                "tx {} from {} via {}: {}",
                &tx.txid[..16],
                tx.client_addr,
                members.join("+"),
                if found { "linked" } else { "not linked" }
            ),
            json!({"event": "tx", "txid": tx.txid, "client_addr": tx.client_addr, "coalition": members, "linked": found}),
        );
    }
    out.emit(
        format!("{linked}/{considered} transactions linked by {}", coalition.join("+")),
        json!({"event": "summary", "linked": linked, "transactions": considered}),
    );
    Ok(())
}
