//! Threshold ECDSA over P-256.
//!
//! Layers, bottom up: curve arithmetic ([`ec`]), Paillier ([`paillier`]),
//! Shamir and Feldman sharing ([`sharing`]), the room transport
//! ([`transport`]) and the keygen, presign and sign state machines
//! ([`protocol`]). [`cluster`] wires parties together in one process.

pub mod cluster;
pub mod ec;
pub mod encoding;
pub mod paillier;
pub mod protocol;
pub mod sharing;
pub mod transport;

/// A node's position in a key's sharing, `1..=n`. Index 0 is the secret.
pub type PartyIndex = u16;

pub use ec::{Digest, EcdsaSignature, GroupPoint, Scalar};
pub use protocol::{FaultKind, FaultPlan, KeyShareRecord, PresignatureRecord, Profile, ProtocolError};
