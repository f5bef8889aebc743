//! Request/response plumbing shared by every service: handlers, in-process
//! and TCP channels, and an AEAD-sealed channel between static identities.
//!
//! TCP frames use the transport framing: 4-byte big-endian length ‖ body.

use std::collections::HashMap;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use kmn_core::encoding::{Reader, Writer};
use kmn_core::transport::tcp::{read_frame, write_frame};
use kmn_core::transport::{Directory, PeerPublic, Sealer, StaticIdentity};
use kmn_core::PartyIndex;
use parking_lot::{Mutex, RwLock};
use rand::rngs::OsRng;
use thiserror::Error;

/// Identity of whoever sent a request. Plain channels carry a configured
/// value; sealed channels carry the authenticated peer index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Caller(pub u16);

impl Caller {
    pub const ANONYMOUS: Caller = Caller(0);
}

pub trait Handler: Send + Sync {
    fn handle(&self, caller: Caller, request: &[u8]) -> Vec<u8>;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RpcError {
    #[error("endpoint unreachable")]
    Unreachable,
    #[error("i/o: {0}")]
    Io(String),
    #[error("channel authentication failed")]
    Auth,
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl From<io::Error> for RpcError {
    fn from(e: io::Error) -> Self {
        RpcError::Io(e.to_string())
    }
}

pub trait Channel: Send + Sync {
    fn call(&self, request: &[u8]) -> Result<Vec<u8>, RpcError>;
}

type Slot = Arc<RwLock<Option<Arc<dyn Handler>>>>;

/// A mount point for a handler. Channels keep working across remounts, which
/// is how an in-process daemon is "restarted"; while unmounted, calls fail
/// with [`RpcError::Unreachable`].
#[derive(Clone, Default)]
pub struct Mount {
    slot: Slot,
}

impl Mount {
    pub fn new(handler: Arc<dyn Handler>) -> Self {
        let m = Mount::default();
        m.mount(handler);
        m
    }

    pub fn mount(&self, handler: Arc<dyn Handler>) {
        *self.slot.write() = Some(handler);
    }

    pub fn unmount(&self) {
        *self.slot.write() = None;
    }

    pub fn is_mounted(&self) -> bool {
        self.slot.read().is_some()
    }

    pub fn channel(&self, caller: Caller) -> LocalChannel {
        LocalChannel {
            slot: self.slot.clone(),
            caller,
        }
    }
}

/// Forwards to the mounted handler with the caller it was given; answers
/// with an empty body while unmounted.
impl Handler for Mount {
    fn handle(&self, caller: Caller, request: &[u8]) -> Vec<u8> {
        let handler = self.slot.read().clone();
        handler.map(|h| h.handle(caller, request)).unwrap_or_default()
    }
}

/// Calls a mounted handler on the caller's thread.
#[derive(Clone)]
pub struct LocalChannel {
    slot: Slot,
    caller: Caller,
}

impl LocalChannel {
    pub fn new(handler: Arc<dyn Handler>, caller: Caller) -> Self {
        Mount::new(handler).channel(caller)
    }
}

impl Channel for LocalChannel {
    fn call(&self, request: &[u8]) -> Result<Vec<u8>, RpcError> {
        let handler = self.slot.read().clone().ok_or(RpcError::Unreachable)?;
        Ok(handler.handle(self.caller, request))
    }
}

/// Client side of a framed TCP service. Idle connections are pooled so
/// concurrent callers do not serialize on one stream.
pub struct TcpChannel {
    addr: SocketAddr,
    idle: Mutex<Vec<TcpStream>>,
    timeout: Duration,
}

impl TcpChannel {
    pub fn new(addr: SocketAddr, timeout: Duration) -> Self {
        TcpChannel {
            addr,
            idle: Mutex::new(Vec::new()),
            timeout,
        }
    }

    fn connect(&self) -> Result<TcpStream, RpcError> {
        let s = TcpStream::connect_timeout(&self.addr, Duration::from_secs(5)).map_err(|e| match e.kind() {
            io::ErrorKind::ConnectionRefused | io::ErrorKind::TimedOut => RpcError::Unreachable,
            _ => e.into(),
        })?;
        s.set_nodelay(true)?;
        s.set_read_timeout(Some(self.timeout))?;
        Ok(s)
    }

    fn exchange(stream: &mut TcpStream, request: &[u8]) -> io::Result<Vec<u8>> {
        write_frame(stream, request)?;
        read_frame(stream)
    }
}

impl Channel for TcpChannel {
    fn call(&self, request: &[u8]) -> Result<Vec<u8>, RpcError> {
        let pooled = self.idle.lock().pop();
        if let Some(mut stream) = pooled {
            // A pooled stream may have been closed by the server; retry once on a fresh one.
            if let Ok(resp) = Self::exchange(&mut stream, request) {
                self.idle.lock().push(stream);
                return Ok(resp);
            }
        }
        let mut stream = self.connect()?;
        let resp = Self::exchange(&mut stream, request)?;
        self.idle.lock().push(stream);
        Ok(resp)
    }
}

/// A running TCP server; stops accepting on drop.
pub struct TcpServer {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl TcpServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for TcpServer {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Serves `handler` on `listener`, one thread per connection. Plain TCP
/// requests are attributed to `caller`.
pub fn serve_tcp(listener: TcpListener, handler: Arc<dyn Handler>, caller: Caller) -> io::Result<TcpServer> {
    let addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let flag = shutdown.clone();
    let accept = std::thread::Builder::new().name(format!("serve-{addr}")).spawn(move || {
        while !flag.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let handler = handler.clone();
                    let flag = flag.clone();
                    let _ = std::thread::Builder::new().name("serve-conn".into()).spawn(move || {
                        connection_loop(stream, &*handler, caller, &flag);
                    });
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(10)),
                Err(e) => {
                    log::warn!("accept on {addr} failed: {e}");
                    std::thread::sleep(Duration::from_millis(100));
                }
            }
        }
    })?;
    Ok(TcpServer {
        addr,
        shutdown,
        accept: Some(accept),
    })
}

fn connection_loop(mut stream: TcpStream, handler: &dyn Handler, caller: Caller, shutdown: &AtomicBool) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(Duration::from_millis(250)));
    while !shutdown.load(Ordering::Relaxed) {
        let request = match read_frame(&mut stream) {
            Ok(r) => r,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
            Err(_) => return,
        };
        let response = handler.handle(caller, &request);
        if write_frame(&mut stream, &response).is_err() {
            return;
        }
    }
}

const SEALED: u8 = 0;
const REJECTED: u8 = 1;

fn request_aad(from: PartyIndex, to: PartyIndex) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(b"kmn/channel/request").u16(from).u16(to);
    w.finish()
}

fn response_aad(from: PartyIndex, to: PartyIndex, request_body: &[u8]) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(b"kmn/channel/response").u16(from).u16(to).bytes(request_body);
    w.finish()
}

const CHANNEL_LABEL: &[u8] = b"service-channel";

/// Client side of a mutually authenticated encrypted channel. Both ends
/// derive the AEAD key from static Diffie-Hellman, so only the two holders
/// of the static keys can produce or open frames. A response is bound to
/// its request.
///
/// Request: `sender u16 ‖ u32 len ‖ nonce ‖ ciphertext ‖ tag(16)`.
/// Response: `0 ‖ u32 len ‖ nonce ‖ ciphertext ‖ tag`, or `1 ‖ reason`.
pub struct SecureChannel {
    inner: Arc<dyn Channel>,
    me: PartyIndex,
    peer: PartyIndex,
    sealer: Sealer,
}

impl SecureChannel {
    pub fn new(inner: Arc<dyn Channel>, identity: &StaticIdentity, peer: &PeerPublic) -> Self {
        SecureChannel {
            inner,
            me: identity.index(),
            peer: peer.index,
            sealer: Sealer::new(&identity.pair_key(peer, CHANNEL_LABEL)),
        }
    }
}

impl Channel for SecureChannel {
    fn call(&self, request: &[u8]) -> Result<Vec<u8>, RpcError> {
        let (body, tag) = self.sealer.seal(&request_aad(self.me, self.peer), request, &mut OsRng);
        let mut w = Writer::with_capacity(body.len() + 24);
        w.u16(self.me).bytes(&body).raw(&tag);
        let resp = self.inner.call(&w.finish())?;
        let mut r = Reader::new(&resp);
        match r.u8().map_err(|e| RpcError::Malformed(e.to_string()))? {
            SEALED => {
                let rbody = r.bytes().map_err(|e| RpcError::Malformed(e.to_string()))?;
                let rtag = r.rest();
                self.sealer
                    .open(&response_aad(self.peer, self.me, &body), rbody, rtag)
                    .ok_or(RpcError::Auth)
            }
            _ => Err(RpcError::Auth),
        }
    }
}

/// Server side of [`SecureChannel`]: opens requests from directory members
/// and passes the authenticated sender on as the [`Caller`].
pub struct SecureHandler {
    inner: Arc<dyn Handler>,
    identity: StaticIdentity,
    directory: Directory,
    sealers: Mutex<HashMap<PartyIndex, Sealer>>,
}

impl SecureHandler {
    pub fn new(inner: Arc<dyn Handler>, identity: StaticIdentity, directory: Directory) -> Self {
        SecureHandler {
            inner,
            identity,
            directory,
            sealers: Mutex::new(HashMap::new()),
        }
    }

    fn sealer(&self, peer: PartyIndex) -> Option<Sealer> {
        if let Some(s) = self.sealers.lock().get(&peer) {
            return Some(s.clone());
        }
        let public = self.directory.get(peer)?;
        let s = Sealer::new(&self.identity.pair_key(public, CHANNEL_LABEL));
        self.sealers.lock().insert(peer, s.clone());
        Some(s)
    }

    fn reject(reason: &str) -> Vec<u8> {
        let mut out = vec![REJECTED];
        out.extend_from_slice(reason.as_bytes());
        out
    }
}

impl Handler for SecureHandler {
    fn handle(&self, _caller: Caller, request: &[u8]) -> Vec<u8> {
        let me = self.identity.index();
        let mut r = Reader::new(request);
        let (Ok(sender), Ok(body)) = (r.u16(), r.bytes()) else {
            return Self::reject("malformed frame");
        };
        let tag = r.rest();
        let Some(sealer) = self.sealer(sender) else {
            return Self::reject("unknown peer");
        };
        let Some(plain) = sealer.open(&request_aad(sender, me), body, tag) else {
            return Self::reject("authentication failed");
        };
        let response = self.inner.handle(Caller(sender), &plain);
        let (rbody, rtag) = sealer.seal(&response_aad(me, sender, body), &response, &mut OsRng);
        let mut w = Writer::with_capacity(rbody.len() + 24);
        w.u8(SEALED).bytes(&rbody).raw(&rtag);
        w.finish()
    }
}
