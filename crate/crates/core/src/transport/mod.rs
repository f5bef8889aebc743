//! Room-based authenticated message layer with synchronous round semantics.
//!
//! Every protocol iteration runs in its own room. A round completes only when
//! the full expected sender set has been heard; otherwise the round fails with
//! the list of silent senders. Two backends share the same contract: an
//! in-process hub and length-prefixed frames over TCP.

pub mod auth;
mod clock;
pub mod inproc;
mod mailbox;
mod room;
pub mod tcp;

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoding::{DecodeError, Reader, Writer};
use crate::PartyIndex;

pub use auth::{Authenticator, Directory, IdentitySecrets, PeerKeys, PeerPublic, Sealer, StaticIdentity};
pub use clock::thread_cpu_time;
pub use inproc::InProcessNetwork;
pub use mailbox::Mailboxes;
pub use room::{Expect, Inbox, Room, RoomFaults, SessionStats};
pub use tcp::TcpLink;

/// Recipient marker for broadcast messages.
pub const BROADCAST: PartyIndex = 0xFFFF;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct RoomId(pub [u8; 16]);

impl RoomId {
    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut b = [0u8; 16];
        rng.fill_bytes(&mut b);
        RoomId(b)
    }

    /// Deterministic child room, e.g. for a retry of the same session.
    pub fn derive(&self, label: &[u8]) -> Self {
        let mut h = Sha256::new();
        h.update(b"kmn/room/derive");
        h.update(self.0);
        h.update(label);
        let out = h.finalize();
        let mut b = [0u8; 16];
        b.copy_from_slice(&out[..16]);
        RoomId(b)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for RoomId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Room({})", &self.to_hex()[..8])
    }
}

impl fmt::Display for RoomId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl From<uuid::Uuid> for RoomId {
    fn from(u: uuid::Uuid) -> Self {
        RoomId(*u.as_bytes())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageKind {
    Join = 0,
    Broadcast = 1,
    Unicast = 2,
    Abort = 3,
}

impl MessageKind {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => MessageKind::Join,
            1 => MessageKind::Broadcast,
            2 => MessageKind::Unicast,
            3 => MessageKind::Abort,
            _ => return None,
        })
    }
}

/// One framed protocol message.
///
/// Encoding: `room_id (16) ‖ round u8 ‖ sender u16 ‖ kind u8 ‖ recipient u16 ‖
/// u32 len ‖ payload ‖ u16 len ‖ auth_tag`. The tag covers everything before it.
#[derive(Clone, PartialEq, Eq)]
pub struct RoomMessage {
    pub room_id: RoomId,
    pub round: u8,
    pub sender: PartyIndex,
    pub kind: MessageKind,
    pub recipient: PartyIndex,
    pub payload: Vec<u8>,
    pub auth_tag: Vec<u8>,
}

impl fmt::Debug for RoomMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "RoomMessage({:?} r{} {}->{} {:?} {}B)",
            self.room_id,
            self.round,
            self.sender,
            self.recipient,
            self.kind,
            self.payload.len()
        )
    }
}

impl RoomMessage {
    pub fn header(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(22);
        w.raw(&self.room_id.0)
            .u8(self.round)
            .u16(self.sender)
            .u8(self.kind as u8)
            .u16(self.recipient);
        w.finish()
    }

    /// Bytes covered by a broadcast signature.
    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(26 + self.payload.len());
        w.raw(&self.header()).bytes(&self.payload);
        w.finish()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(32 + self.payload.len() + self.auth_tag.len());
        w.raw(&self.header()).bytes(&self.payload);
        w.u16(self.auth_tag.len() as u16).raw(&self.auth_tag);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let room_id = RoomId(r.array::<16>()?);
        let round = r.u8()?;
        let sender = r.u16()?;
        let kind = MessageKind::from_u8(r.u8()?).ok_or(DecodeError::Invalid("message kind"))?;
        let recipient = r.u16()?;
        let payload = r.bytes()?.to_vec();
        let tag_len = r.u16()? as usize;
        let auth_tag = r.raw(tag_len)?.to_vec();
        r.finish()?;
        Ok(RoomMessage {
            room_id,
            round,
            sender,
            kind,
            recipient,
            payload,
            auth_tag,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Keygen,
    Presign,
    Sign,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Keygen => "keygen",
            Phase::Presign => "presign",
            Phase::Sign => "sign",
        })
    }
}

/// A communication round, or the local output step after the last round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Round(u8),
    Output,
}

/// Time split for one stage of one party's session.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerfSample {
    pub room_id: RoomId,
    pub phase: Phase,
    pub stage: Stage,
    pub compute_ns: u64,
    pub io_wait_ns: u64,
}

impl Serialize for RoomId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for RoomId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let b = hex::decode(s).map_err(serde::de::Error::custom)?;
        let arr: [u8; 16] = b.try_into().map_err(|_| serde::de::Error::custom("room id length"))?;
        Ok(RoomId(arr))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("room {room} setup timed out; absent parties {absent:?}")]
    JoinTimeout { room: RoomId, absent: Vec<PartyIndex> },
    #[error("round {round} of room {room} timed out; missing senders {missing:?}")]
    RoundTimeout {
        room: RoomId,
        round: u8,
        missing: Vec<PartyIndex>,
    },
    #[error("unknown recipient {0}")]
    UnknownRecipient(PartyIndex),
    #[error("party {reporter} aborted room {room} at round {round}")]
    PeerAborted {
        room: RoomId,
        round: u8,
        reporter: PartyIndex,
        body: Vec<u8>,
    },
    #[error("link failure: {0}")]
    Link(String),
}

/// Delivers an encoded message to one node. Implemented by the backends.
pub trait Link: Send + Sync {
    fn deliver(&self, to: PartyIndex, msg: RoomMessage) -> Result<(), TransportError>;
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TransportConfig {
    #[serde(with = "duration_ms", default = "default_round_timeout")]
    pub round_timeout: Duration,
    #[serde(with = "duration_ms", default = "default_round_timeout")]
    pub join_timeout: Duration,
    /// Artificial one-way delay added to every delivered message.
    #[serde(default, with = "opt_duration_ms")]
    pub inject_delay: Option<Duration>,
}

fn default_round_timeout() -> Duration {
    Duration::from_secs(10)
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            round_timeout: default_round_timeout(),
            join_timeout: default_round_timeout(),
            inject_delay: None,
        }
    }
}

pub mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

pub mod opt_duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Option<Duration>, s: S) -> Result<S::Ok, S::Error> {
        match d {
            Some(d) => s.serialize_some(&(d.as_millis() as u64)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Duration>, D::Error> {
        Ok(Option::<u64>::deserialize(d)?.map(Duration::from_millis))
    }
}

/// A node's attachment to the network: identity, inbound mailboxes and an outbound link.
#[derive(Clone)]
pub struct Endpoint {
    shared: Arc<EndpointShared>,
}

pub(crate) struct EndpointShared {
    pub(crate) auth: Authenticator,
    pub(crate) link: Arc<dyn Link>,
    pub(crate) mailboxes: Arc<Mailboxes>,
    pub(crate) config: TransportConfig,
}

impl Endpoint {
    pub fn new(
        identity: StaticIdentity,
        directory: Directory,
        link: Arc<dyn Link>,
        mailboxes: Arc<Mailboxes>,
        config: TransportConfig,
    ) -> Self {
        Endpoint {
            shared: Arc::new(EndpointShared {
                auth: Authenticator::new(identity, directory),
                link,
                mailboxes,
                config,
            }),
        }
    }

    pub fn me(&self) -> PartyIndex {
        self.shared.auth.identity().index()
    }

    pub fn config(&self) -> &TransportConfig {
        &self.shared.config
    }

    pub fn directory(&self) -> &Directory {
        self.shared.auth.directory()
    }

    pub fn mailboxes(&self) -> &Arc<Mailboxes> {
        &self.shared.mailboxes
    }

    /// Signs `data` with the node's static identity key.
    pub fn sign(&self, data: &[u8]) -> Vec<u8> {
        self.shared.auth.identity().sign(data)
    }

    /// Checks a signature by `party`'s static identity key.
    pub fn verify_from(&self, party: PartyIndex, data: &[u8], sig: &[u8]) -> bool {
        self.directory().get(party).is_some_and(|p| p.verify(data, sig))
    }

    /// Joins `room_id` and blocks until every participant has joined. The
    /// join barrier is not part of the timed session.
    pub fn open_room(
        &self,
        room_id: RoomId,
        participants: &[PartyIndex],
        phase: Phase,
    ) -> Result<Room, TransportError> {
        Room::open(self.shared.clone(), room_id, participants, phase)
    }
}
