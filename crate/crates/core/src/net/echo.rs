//! The bundled echo service.

use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpStream};

use super::{listen, NetError, Registry, ServerHandle, DEFAULT_TIMEOUT};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EchoMode {
    /// Reply with the address the connection came from, then close.
    PeerAddr,
    /// Send every received byte back.
    Bytes,
}

pub fn serve_echo(listen_addr: SocketAddr, mode: EchoMode) -> Result<ServerHandle, NetError> {
    let listener = listen(listen_addr)?;
    let handle = ServerHandle::spawn(listener, Registry::default(), move |stream, peer| match mode {
        EchoMode::PeerAddr => reply_peer(stream, peer),
        EchoMode::Bytes => echo_bytes(stream),
    })?;
    Ok(handle)
}

fn reply_peer(mut stream: TcpStream, peer: SocketAddr) {
    log::info!("echo: connection from {peer}");
    if stream.write_all(format!("{peer}\n").as_bytes()).is_err() {
        return;
    }
    let _ = stream.shutdown(Shutdown::Write);
    let _ = stream.set_read_timeout(Some(DEFAULT_TIMEOUT));
    let mut sink = [0u8; 1024];
    while matches!(stream.read(&mut sink), Ok(n) if n > 0) {}
}

fn echo_bytes(mut stream: TcpStream) {
    let mut buf = [0u8; 16 * 1024];
    loop {
        match stream.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                if stream.write_all(&buf[..n]).is_err() {
                    break;
                }
            }
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
}
