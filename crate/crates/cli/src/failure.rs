use std::fmt;

use tomen::config::ConfigError;
use tomen::harness::replay::ReplayError;
use tomen::harness::{HarnessError, ScenarioError};
use tomen::net::NetError;

/// Why a command failed, and the exit code scripts see for it.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Network(String),
    Protocol(String),
    Verdict(String),
}

impl Failure {
    pub const USAGE: u8 = 1;

    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Network(_) => 3,
            Failure::Protocol(_) => 4,
            Failure::Verdict(_) => 5,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Failure::Config(_) => "config",
            Failure::Network(_) => "network",
            Failure::Protocol(_) => "protocol",
            Failure::Verdict(_) => "verdict",
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) | Failure::Network(m) | Failure::Protocol(m) | Failure::Verdict(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Scenario(s) => s.into(),
            other => Failure::Protocol(other.to_string()),
        }
    }
}

impl From<ReplayError> for Failure {
    fn from(e: ReplayError) -> Self {
        match e {
            ReplayError::Parse(p) => Failure::Config(format!("transcript: {p}")),
            ReplayError::Harness(h) => h.into(),
            other => Failure::Verdict(other.to_string()),
        }
    }
}

impl From<NetError> for Failure {
    fn from(e: NetError) -> Self {
        match e {
            // the configured listen address is unusable
            NetError::Bind { .. } => Failure::Config(e.to_string()),
            e if e.is_network() => Failure::Network(e.to_string()),
            e => Failure::Protocol(e.to_string()),
        }
    }
}
