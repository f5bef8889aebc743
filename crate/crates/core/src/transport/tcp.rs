//! TCP backend: each frame is a 4-byte big-endian length followed by a
//! `RoomMessage` encoding.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;

use super::mailbox::{Envelope, Mailboxes};
use super::{Link, RoomMessage, TransportError};
use crate::PartyIndex;

/// Largest accepted frame.
pub const MAX_FRAME: usize = 64 << 20;

pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> io::Result<()> {
    if body.len() > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame too large"));
    }
    let mut buf = Vec::with_capacity(4 + body.len());
    buf.extend_from_slice(&(body.len() as u32).to_be_bytes());
    buf.extend_from_slice(body);
    w.write_all(&buf)?;
    w.flush()
}

pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(body)
}

/// Outbound side: one lazily established connection per peer.
pub struct TcpLink {
    addrs: HashMap<PartyIndex, SocketAddr>,
    conns: Mutex<HashMap<PartyIndex, Arc<Mutex<TcpStream>>>>,
    connect_timeout: Duration,
}

impl TcpLink {
    pub fn new(addrs: HashMap<PartyIndex, SocketAddr>) -> Self {
        TcpLink {
            addrs,
            conns: Mutex::new(HashMap::new()),
            connect_timeout: Duration::from_secs(5),
        }
    }

    fn connection(&self, to: PartyIndex) -> Result<Arc<Mutex<TcpStream>>, TransportError> {
        if let Some(c) = self.conns.lock().get(&to) {
            return Ok(c.clone());
        }
        let addr = self.addrs.get(&to).ok_or(TransportError::UnknownRecipient(to))?;
        let stream = TcpStream::connect_timeout(addr, self.connect_timeout)
            .map_err(|e| TransportError::Link(format!("connect {addr}: {e}")))?;
        let _ = stream.set_nodelay(true);
        let conn = Arc::new(Mutex::new(stream));
        self.conns.lock().insert(to, conn.clone());
        Ok(conn)
    }
}

impl Link for TcpLink {
    fn deliver(&self, to: PartyIndex, msg: RoomMessage) -> Result<(), TransportError> {
        let frame = msg.encode();
        for attempt in 0..2 {
            let conn = self.connection(to)?;
            let res = write_frame(&mut *conn.lock(), &frame);
            match res {
                Ok(()) => return Ok(()),
                Err(e) => {
                    self.conns.lock().remove(&to);
                    if attempt == 1 {
                        return Err(TransportError::Link(format!("send to {to}: {e}")));
                    }
                }
            }
        }
        unreachable!()
    }
}

/// Inbound side: accepts peer connections and files decoded frames into `mailboxes`.
pub fn spawn_listener(
    listener: TcpListener,
    mailboxes: Arc<Mailboxes>,
    shutdown: Arc<AtomicBool>,
) -> io::Result<JoinHandle<()>> {
    listener.set_nonblocking(true)?;
    std::thread::Builder::new().name("room-listener".into()).spawn(move || {
        while !shutdown.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let mailboxes = mailboxes.clone();
                    let shutdown = shutdown.clone();
                    let _ = std::thread::Builder::new().name("room-conn".into()).spawn(move || {
                        let _ = stream.set_nonblocking(false);
                        let mut stream = stream;
                        read_loop(&mut stream, &mailboxes, &shutdown);
                    });
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(20));
                }
                Err(e) => {
                    log::warn!("room listener accept failed: {e}");
                    std::thread::sleep(Duration::from_millis(100));
                }
            }
        }
    })
}

fn read_loop(stream: &mut TcpStream, mailboxes: &Mailboxes, shutdown: &AtomicBool) {
    while !shutdown.load(Ordering::Relaxed) {
        let body = match read_frame(stream) {
            Ok(body) => body,
            Err(_) => return,
        };
        match RoomMessage::decode(&body) {
            Ok(msg) => mailboxes.push(Envelope { msg, deliver_at: None }),
            Err(e) => log::debug!("dropping undecodable frame: {e}"),
        }
    }
}
