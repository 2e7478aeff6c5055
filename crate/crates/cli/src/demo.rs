use std::collections::BTreeSet;

use serde_json::json;
use tomen::net::EchoIpNetwork;

use crate::failure::Failure;
use crate::output::Output;

pub fn echo_ip(out: &Output, runs: u64, seed: u64, relays: usize) -> Result<(), Failure> {
    let net = EchoIpNetwork::start(relays)?;
    out.emit(
        format!(
            "echo service {} client {} relays {}",
            net.echo_addr,
            net.client_ip,
            net.relay_addrs().iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
        ),
        json!({"event": "network", "echo": net.echo_addr.to_string(), "client": net.client_ip.to_string()}),
    );
    let mut passed = 0;
    let mut exits = BTreeSet::new();
    for i in 0..runs {
        let run = net.run(seed + i)?;
        exits.insert(run.exit);
        passed += run.passed() as u64;
        out.emit(
            format!(
                "seed {}: direct sees {} | onion sees {} via exit {} | {}",
                run.seed,
                run.direct_echo.ip(),
                run.onion_echo.ip(),
                run.exit,
                if run.passed() { "ok" } else { "FAIL" }
            ),
            json!({"event": "run", "run": run, "ok": run.passed()}),
        );
    }
    let ok = passed == runs;
    out.emit(
        format!(
            "verdict: {} ({passed}/{runs} runs: direct echoes the client, onion echoes the exit; {} distinct exits)",
            if ok { "PASS" } else { "FAIL" },
            exits.len()
        ),
        json!({"event": "verdict", "pass": ok, "runs": runs, "passed": passed, "distinct_exits": exits.len()}),
    );
    if ok {
        Ok(())
    } else {
        Err(Failure::Verdict(format!("{} of {runs} runs failed", runs - passed)))
    }
}
