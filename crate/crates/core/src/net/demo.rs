//! The echo-IP demonstration: one query direct, one through a fresh circuit.

use std::io::Read;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;

use super::dir::DirClient;
use super::echo::{serve_echo, EchoMode};
use super::proxy::OnionProxy;
use super::relay::{RelayServer, RelayServerConfig};
use super::{connect_from, serve_directory, NetError, ServerHandle, DEFAULT_TIMEOUT};
use crate::clock::{Clock, SystemClock};
use crate::directory::{Consensus, EgressPolicy};

/// A loopback network where every party has its own 127.x address.
pub struct EchoIpNetwork {
    pub client_ip: IpAddr,
    pub echo_addr: SocketAddr,
    pub directory: SocketAddr,
    relays: Vec<RelayServer>,
    _echo: ServerHandle,
    _dir: ServerHandle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EchoIpRun {
    pub seed: u64,
    pub client: IpAddr,
    pub direct_echo: SocketAddr,
    pub onion_echo: SocketAddr,
    pub path: Vec<SocketAddr>,
    pub exit: IpAddr,
    pub direct_ok: bool,
    pub onion_ok: bool,
}

impl EchoIpRun {
    pub fn passed(&self) -> bool {
        self.direct_ok && self.onion_ok
    }
}

fn ip(a: u8, b: u8, c: u8, d: u8) -> IpAddr {
    IpAddr::V4(Ipv4Addr::new(a, b, c, d))
}

impl EchoIpNetwork {
    pub fn start(n_relays: usize) -> Result<Self, NetError> {
        let clock: Arc<dyn Clock> = Arc::new(SystemClock);
        let dir = serve_directory(SocketAddr::new(ip(127, 0, 0, 1), 0), clock)?;
        let echo = serve_echo(SocketAddr::new(ip(127, 0, 2, 1), 0), EchoMode::PeerAddr)?;
        let echo_addr = echo.addr();
        let mut relays = Vec::with_capacity(n_relays);
        for k in 0..n_relays {
            let mut cfg = RelayServerConfig::new(
                SocketAddr::new(ip(127, 0, 1, k as u8 + 1), 0),
                EgressPolicy::allow([echo_addr.port()]),
            );
            cfg.directory = Some(dir.addr());
            relays.push(RelayServer::start(cfg)?);
        }
        Ok(EchoIpNetwork {
            client_ip: ip(127, 0, 3, 1),
            echo_addr,
            directory: dir.addr(),
            relays,
            _echo: echo,
            _dir: dir,
        })
    }

    pub fn relay_addrs(&self) -> Vec<SocketAddr> {
        self.relays.iter().map(RelayServer::addr).collect()
    }

    pub fn consensus(&self) -> Result<Consensus, NetError> {
        DirClient::new(self.directory).from_ip(Some(self.client_ip)).fetch()
    }

    /// Ask the echo service who we are, once directly and once through a circuit built with `seed`.
    pub fn run(&self, seed: u64) -> Result<EchoIpRun, NetError> {
        let direct_echo = echo_direct(self.echo_addr, Some(self.client_ip), DEFAULT_TIMEOUT)?;
        let consensus = self.consensus()?;
        let proxy = OnionProxy::new(seed, Some(self.client_ip), Arc::new(SystemClock));
        let circ = proxy.build_circuit(&consensus, self.echo_addr.port())?;
        let path = proxy.circuit(circ).map(|c| c.path).unwrap_or_default();
        let sid = proxy.open_stream(circ, self.echo_addr)?;
        let line = proxy.recv_line(circ, sid)?;
        proxy.close_stream(circ, sid)?;
        let onion_echo = parse_echo(&line)?;
        let exit = path.last().map(SocketAddr::ip).ok_or_else(|| NetError::Protocol("empty path".into()))?;
        Ok(EchoIpRun {
            seed,
            client: self.client_ip,
            direct_echo,
            onion_echo,
            direct_ok: direct_echo.ip() == self.client_ip,
            onion_ok: onion_echo.ip() == exit && onion_echo.ip() != self.client_ip,
            path,
            exit,
        })
    }
}

fn parse_echo(line: &[u8]) -> Result<SocketAddr, NetError> {
    std::str::from_utf8(line)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| NetError::Protocol(format!("echo reply {:?}", String::from_utf8_lossy(line))))
}

/// Query the echo service without any proxying.
pub fn echo_direct(target: SocketAddr, local: Option<IpAddr>, timeout: Duration) -> Result<SocketAddr, NetError> {
    let mut stream = connect_from(local, target, timeout).map_err(|e| NetError::Unreachable {
        addr: target,
        message: e.to_string(),
    })?;
    stream.set_read_timeout(Some(timeout))?;
    let mut line = Vec::new();
    stream.read_to_end(&mut line)?;
    parse_echo(&line)
}
