//! Directory protocol over TCP: 4-byte big-endian length, then a JSON object.

use std::io::{self, Read, Write};
use std::net::{IpAddr, SocketAddr, TcpStream};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{connect_from, listen, NetError, Registry, ServerHandle, DEFAULT_TIMEOUT};
use crate::clock::Clock;
use crate::directory::{Consensus, DirRequest, DirResponse, Directory, RelayDescriptor};

pub const MAX_FRAME: usize = 4 << 20;

pub fn write_frame<W: Write, T: Serialize>(w: &mut W, msg: &T) -> io::Result<()> {
    let body = serde_json::to_vec(msg).map_err(io::Error::other)?;
    let mut frame = (body.len() as u32).to_be_bytes().to_vec();
    frame.extend_from_slice(&body);
    w.write_all(&frame)
}

/// `Ok(None)` on a clean end of stream between frames.
pub fn read_frame<R: Read, T: DeserializeOwned>(r: &mut R) -> io::Result<Option<T>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    serde_json::from_slice(&body)
        .map(Some)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

pub fn serve_directory(listen_addr: SocketAddr, clock: Arc<dyn Clock>) -> Result<ServerHandle, NetError> {
    let listener = listen(listen_addr)?;
    let directory = Arc::new(Mutex::new(Directory::new(clock)));
    let handle = ServerHandle::spawn(listener, Registry::default(), move |mut stream, peer| {
        loop {
            let request = match read_frame::<_, DirRequest>(&mut stream) {
                Ok(Some(r)) => r,
                Ok(None) => break,
                Err(e) => {
                    log::debug!("directory: bad request from {peer}: {e}");
                    let reply = DirResponse::Error {
                        kind: "malformed".into(),
                        message: e.to_string(),
                    };
                    let _ = write_frame(&mut stream, &reply);
                    break;
                }
            };
            let reply = directory.lock().unwrap().handle(request);
            if write_frame(&mut stream, &reply).is_err() {
                break;
            }
        }
    })?;
    Ok(handle)
}

#[derive(Debug, Clone)]
pub struct DirClient {
    addr: SocketAddr,
    local: Option<IpAddr>,
    timeout: Duration,
}

impl DirClient {
    pub fn new(addr: SocketAddr) -> Self {
        DirClient {
            addr,
            local: None,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn from_ip(mut self, local: Option<IpAddr>) -> Self {
        self.local = local;
        self
    }

    pub fn request(&self, request: &DirRequest) -> Result<DirResponse, NetError> {
        let unreachable = |e: io::Error| NetError::DirectoryUnreachable {
            addr: self.addr,
            message: e.to_string(),
        };
        let mut stream: TcpStream = connect_from(self.local, self.addr, self.timeout).map_err(unreachable)?;
        stream.set_read_timeout(Some(self.timeout))?;
        write_frame(&mut stream, request).map_err(unreachable)?;
        match read_frame(&mut stream) {
            Ok(Some(reply)) => Ok(reply),
            Ok(None) => Err(NetError::Protocol("directory closed without answering".into())),
            Err(e) if e.kind() == io::ErrorKind::InvalidData => Err(NetError::Protocol(e.to_string())),
            Err(e) => Err(unreachable(e)),
        }
    }

    fn expect_ok(&self, request: &DirRequest) -> Result<Option<Consensus>, NetError> {
        match self.request(request)? {
            DirResponse::Ok { consensus } => Ok(consensus),
            DirResponse::Error { kind, message } => Err(NetError::DirectoryRejected { kind, message }),
        }
    }

    pub fn publish(&self, descriptor: &RelayDescriptor) -> Result<(), NetError> {
        self.expect_ok(&DirRequest::Publish {
            descriptor: descriptor.clone(),
        })
        .map(|_| ())
    }

    pub fn heartbeat(&self, relay_id: &str) -> Result<(), NetError> {
        self.expect_ok(&DirRequest::Heartbeat {
            relay_id: relay_id.to_string(),
        })
        .map(|_| ())
    }

    pub fn fetch(&self) -> Result<Consensus, NetError> {
        self.expect_ok(&DirRequest::Fetch)?
            .ok_or_else(|| NetError::Protocol("fetch answered without a consensus".into()))
    }
}
