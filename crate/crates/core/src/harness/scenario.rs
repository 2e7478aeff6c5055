use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, KvConfig};

pub const SCENARIO_KEYS: &[&str] = &[
    "scenario.seed",
    "scenario.mode",
    "network.relays",
    "network.gossip_nodes",
    "network.topology",
    "workload.clients",
    "workload.tx_per_client",
    "workload.rotation",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("onion mode needs at least 3 relays, got {0}")]
    TooFewRelays(usize),
    #[error("need at least one {0}")]
    Empty(&'static str),
    #[error("topology edge {0}-{1} is out of range")]
    EdgeOutOfRange(usize, usize),
    #[error("gossip topology is not connected")]
    Disconnected,
    #[error("bad topology `{0}`")]
    BadTopology(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Direct,
    Onion,
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "direct" => Ok(Mode::Direct),
            "onion" => Ok(Mode::Onion),
            other => Err(format!("unknown mode `{other}` (direct|onion)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Direct => "direct",
            Mode::Onion => "onion",
        })
    }
}

/// Gossip peer graph: a named generator or an explicit edge list (`0-1,1-2`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Topology {
    Line,
    Ring,
    Complete,
    Star,
    Random,
    Edges(Vec<(usize, usize)>),
}

impl From<Topology> for String {
    fn from(t: Topology) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for Topology {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Topology::Line => f.write_str("line"),
            Topology::Ring => f.write_str("ring"),
            Topology::Complete => f.write_str("complete"),
            Topology::Star => f.write_str("star"),
            Topology::Random => f.write_str("random"),
            Topology::Edges(edges) => {
                let parts: Vec<String> = edges.iter().map(|(a, b)| format!("{a}-{b}")).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl FromStr for Topology {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s.trim() {
            "line" => Topology::Line,
            "ring" => Topology::Ring,
            "complete" => Topology::Complete,
            "star" => Topology::Star,
            "random" => Topology::Random,
            list => {
                let edges = list
                    .split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(|p| {
                        let (a, b) = p.split_once('-').ok_or_else(|| format!("bad edge `{p}`"))?;
                        let a = a.trim().parse::<usize>().map_err(|e| e.to_string())?;
                        let b = b.trim().parse::<usize>().map_err(|e| e.to_string())?;
                        Ok((a, b))
                    })
                    .collect::<Result<Vec<_>, String>>()?;
                if edges.is_empty() {
                    return Err(format!("bad topology `{s}`"));
                }
                Topology::Edges(edges)
            }
        })
    }
}

impl Topology {
    /// Concrete undirected edges (a < b), sorted and deduplicated.
    pub fn edges<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<(usize, usize)> {
        let mut set = BTreeSet::new();
        let mut add = |a: usize, b: usize| {
            if a != b {
                set.insert((a.min(b), a.max(b)));
            }
        };
        match self {
            Topology::Line => (1..n).for_each(|i| add(i - 1, i)),
            Topology::Ring => {
                (1..n).for_each(|i| add(i - 1, i));
                if n > 2 {
                    add(n - 1, 0);
                }
            }
            Topology::Complete => {
                for a in 0..n {
                    for b in a + 1..n {
                        add(a, b);
                    }
                }
            }
            Topology::Star => (1..n).for_each(|i| add(0, i)),
            Topology::Random => {
                for i in 1..n {
                    let j = rng.gen_range(0..i);
                    add(i, j);
                }
                for a in 0..n {
                    for b in a + 1..n {
                        if rng.gen_bool(0.15) {
                            add(a, b);
                        }
                    }
                }
            }
            Topology::Edges(list) => list.iter().for_each(|&(a, b)| add(a, b)),
        }
        set.into_iter().collect()
    }
}

pub fn is_connected(n: usize, edges: &[(usize, usize)]) -> bool {
    if n == 0 {
        return false;
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for &(a, b) in edges {
            let other = if a == v { b } else if b == v { a } else { continue };
            if !seen[other] {
                seen[other] = true;
                stack.push(other);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub mode: Mode,
    pub n_relays: usize,
    pub n_gossip: usize,
    pub topology: Topology,
    pub n_clients: usize,
    pub tx_per_client: usize,
    pub rotation: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            seed: 1,
            mode: Mode::Onion,
            n_relays: 5,
            n_gossip: 3,
            topology: Topology::Ring,
            n_clients: 2,
            tx_per_client: 2,
            rotation: false,
        }
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let cfg = KvConfig::parse(text, SCENARIO_KEYS)?;
        let d = Scenario::default();
        let s = Scenario {
            seed: cfg.get_or("scenario.seed", d.seed)?,
            mode: cfg.get_or("scenario.mode", d.mode)?,
            n_relays: cfg.get_or("network.relays", d.n_relays)?,
            n_gossip: cfg.get_or("network.gossip_nodes", d.n_gossip)?,
            topology: cfg.get_or("network.topology", d.topology)?,
            n_clients: cfg.get_or("workload.clients", d.n_clients)?,
            tx_per_client: cfg.get_or("workload.tx_per_client", d.tx_per_client)?,
            rotation: cfg.get_or("workload.rotation", d.rotation)?,
        };
        Ok(s)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "scenario.seed = {}\nscenario.mode = {}\nnetwork.relays = {}\nnetwork.gossip_nodes = {}\nnetwork.topology = {}\nworkload.clients = {}\nworkload.tx_per_client = {}\nworkload.rotation = {}\n",
            self.seed,
            self.mode,
            self.n_relays,
            self.n_gossip,
            self.topology,
            self.n_clients,
            self.tx_per_client,
            self.rotation
        )
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.mode == Mode::Onion && self.n_relays < 3 {
            return Err(ScenarioError::TooFewRelays(self.n_relays));
        }
        if self.n_gossip == 0 {
            return Err(ScenarioError::Empty("gossip node"));
        }
        if self.n_clients == 0 {
            return Err(ScenarioError::Empty("client"));
        }
        if let Topology::Edges(list) = &self.topology {
            if let Some(&(a, b)) = list.iter().find(|(a, b)| *a >= self.n_gossip || *b >= self.n_gossip) {
                return Err(ScenarioError::EdgeOutOfRange(a, b));
            }
            if !is_connected(self.n_gossip, list) {
                return Err(ScenarioError::Disconnected);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn parse_roundtrip() {
        let s = Scenario {
            seed: 9,
            mode: Mode::Direct,
            topology: Topology::Edges(vec![(0, 1), (1, 2)]),
            ..Scenario::default()
        };
        assert_eq!(Scenario::parse(&s.to_kv()).unwrap(), s);
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let err = Scenario::parse("scenario.seed = 1\nnetwork.relay = 4\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn two_relay_onion_rejected() {
        let s = Scenario {
            n_relays: 2,
            ..Scenario::default()
        };
        assert_eq!(s.validate(), Err(ScenarioError::TooFewRelays(2)));
        let direct = Scenario { mode: Mode::Direct, ..s };
        assert!(direct.validate().is_ok());
    }

    #[test]
    fn disconnected_edges_rejected() {
        let s = Scenario {
            n_gossip: 4,
            topology: Topology::Edges(vec![(0, 1), (2, 3)]),
            ..Scenario::default()
        };
        assert_eq!(s.validate(), Err(ScenarioError::Disconnected));
    }

    #[test]
    fn random_topologies_are_connected() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for n in 1..=20 {
            let edges = Topology::Random.edges(n, &mut rng);
            assert!(is_connected(n, &edges), "n={n}");
        }
    }
}
