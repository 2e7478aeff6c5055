//! Blocking TCP drivers for the sans-IO protocol cores.
//!
//! Every connection gets a reader thread and a writer thread fed by a channel.
//! Protocol state lives behind one mutex per service, so cells of a circuit are
//! processed in arrival order and output order is preserved.

pub mod demo;
pub mod dir;
pub mod echo;
pub mod gossip;
pub mod proxy;
pub mod relay;

use std::io::{self, Write};
use std::net::{IpAddr, Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use socket2::{Domain, Protocol, Socket, Type};
use thiserror::Error;

use crate::client::ClientError;

pub use demo::{EchoIpNetwork, EchoIpRun};
pub use dir::{serve_directory, DirClient};
pub use echo::{serve_echo, EchoMode};
pub use gossip::{submit_direct, GossipServer, GossipServerConfig};
pub use proxy::OnionProxy;
pub use relay::{RelayServer, RelayServerConfig};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum NetError {
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: SocketAddr, source: io::Error },
    #[error("directory {addr} unreachable: {message}")]
    DirectoryUnreachable { addr: SocketAddr, message: String },
    #[error("cannot reach {addr}: {message}")]
    Unreachable { addr: SocketAddr, message: String },
    #[error("directory refused request ({kind}): {message}")]
    DirectoryRejected { kind: String, message: String },
    #[error("timed out waiting for {0}")]
    Timeout(String),
    #[error("circuit {circ} failed at hop {hop}: {reason}")]
    CircuitFailed { circ: String, hop: usize, reason: String },
    #[error("stream failed: {0}")]
    Stream(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl NetError {
    /// True for failures of the network itself rather than of a peer's answer.
    pub fn is_network(&self) -> bool {
        matches!(
            self,
            NetError::Bind { .. }
                | NetError::DirectoryUnreachable { .. }
                | NetError::Unreachable { .. }
                | NetError::Timeout(_)
                | NetError::Io(_)
        )
    }
}

pub fn listen(addr: SocketAddr) -> Result<TcpListener, NetError> {
    TcpListener::bind(addr).map_err(|source| NetError::Bind { addr, source })
}

/// Connect to `addr`, optionally from a fixed local address so peers see a distinct source IP.
pub fn connect_from(local: Option<IpAddr>, addr: SocketAddr, timeout: Duration) -> io::Result<TcpStream> {
    let socket = Socket::new(Domain::for_address(addr), Type::STREAM, Some(Protocol::TCP))?;
    if let Some(ip) = local {
        socket.bind(&SocketAddr::new(ip, 0).into())?;
    }
    socket.connect_timeout(&addr.into(), timeout)?;
    let stream: TcpStream = socket.into();
    stream.set_nodelay(true)?;
    Ok(stream)
}

pub(crate) enum Out {
    Bytes(Vec<u8>),
    Close,
}

pub(crate) fn channel() -> (Sender<Out>, Receiver<Out>) {
    mpsc::channel()
}

/// Drain `rx` into `stream` until told to close or the peer goes away.
pub(crate) fn write_loop(mut stream: TcpStream, rx: Receiver<Out>) {
    while let Ok(msg) = rx.recv() {
        match msg {
            Out::Bytes(b) => {
                if stream.write_all(&b).is_err() {
                    break;
                }
            }
            Out::Close => break,
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
}

/// Open sockets owned by a service, shut down together on stop.
#[derive(Clone, Default)]
pub(crate) struct Registry(Arc<Mutex<Vec<TcpStream>>>);

impl Registry {
    pub fn add(&self, stream: &TcpStream) {
        if let Ok(clone) = stream.try_clone() {
            self.0.lock().unwrap().push(clone);
        }
    }

    fn shutdown_all(&self) {
        for s in self.0.lock().unwrap().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

/// A running listener. Dropping it stops accepting and closes every connection it owns.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    registry: Registry,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub(crate) fn spawn<F>(listener: TcpListener, registry: Registry, on_conn: F) -> io::Result<Self>
    where
        F: Fn(TcpStream, SocketAddr) + Send + Sync + 'static,
    {
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let reg = registry.clone();
        let on_conn = Arc::new(on_conn);
        let accept = thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let Ok(peer) = stream.peer_addr() else { continue };
                let _ = stream.set_nodelay(true);
                reg.add(&stream);
                let handler = on_conn.clone();
                thread::spawn(move || handler(stream, peer));
            }
        });
        Ok(ServerHandle {
            addr,
            stop,
            registry,
            accept: Some(accept),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn is_stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    pub(crate) fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    /// Block until the service is stopped from another thread or the process exits.
    pub fn wait(mut self) {
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
    }

    pub fn stop(self) {}
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(500));
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
        self.registry.shutdown_all();
    }
}
