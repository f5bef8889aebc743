//! Threshold ECDSA state machines.
//!
//! Each session is a sequential, round-driven function over a [`Room`]:
//!
//! | phase   | rounds | local output |
//! |---------|--------|--------------|
//! | keygen  | 3      | share, group key |
//! | presign | 3      | `(R, k_i, χ_i)` |
//! | sign    | 1      | signature |
//!
//! Zero-knowledge proofs are replaced by hash commitments, Feldman checks and
//! echo-broadcast consistency, each with blame attribution. This detects the
//! injected faults below but does not give the full malicious security of a
//! proof-carrying protocol.

pub mod commit;
pub mod dkg;
pub mod echo;
pub mod keyops;
pub mod mta;
pub mod presign;
pub mod records;
pub mod session;
pub mod sign;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ec::{EcError, Scalar};
use crate::encoding::{DecodeError, Reader, Writer};
use crate::paillier::{PaillierError, PaillierKeypair, PaillierPublicKey};
use crate::sharing::SharingError;
use crate::transport::{Endpoint, Expect, Inbox, Room, RoomFaults, TransportError};
use crate::PartyIndex;

pub use records::{KeyShareRecord, PresignPublic, PresignatureRecord};

/// Maximum fresh-randomness retries after a degenerate presignature.
pub const MAX_PRESIGN_RETRIES: usize = 3;

/// `Test` additionally publishes per-party check points during presigning so
/// a bad partial signature can be traced to its sender.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Production,
    Test,
}

/// Misbehaviour injected into one party, for blame-attribution harnesses.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FaultPlan {
    pub room: RoomFaults,
    /// Deal a share inconsistent with the Feldman commitment to this party.
    pub corrupt_share_to: Option<PartyIndex>,
    /// Add one to the partial signature.
    pub perturb_partial: bool,
}

impl FaultPlan {
    pub fn silent_from(round: u8) -> Self {
        FaultPlan {
            room: RoomFaults {
                silent_from: Some(round),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn equivocate(round: u8) -> Self {
        FaultPlan {
            room: RoomFaults {
                equivocate_round: Some(round),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn bad_share_to(victim: PartyIndex) -> Self {
        FaultPlan {
            corrupt_share_to: Some(victim),
            ..Default::default()
        }
    }

    pub fn bad_partial() -> Self {
        FaultPlan {
            perturb_partial: true,
            ..Default::default()
        }
    }

    pub fn is_honest(&self) -> bool {
        self == &FaultPlan::default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum FaultKind {
    /// Different broadcast payloads observed by different receivers.
    Equivocation = 1,
    /// Opening does not match the earlier hash commitment.
    CommitmentMismatch = 2,
    /// Dealt share fails the Feldman check.
    InvalidShare = 3,
    /// Expected message never arrived.
    Timeout = 4,
    /// Partial signature inconsistent with the published check values.
    InvalidPartial = 5,
    /// Undecodable or out-of-range payload.
    Malformed = 6,
    /// An accusation whose evidence does not hold up.
    FalseAccusation = 7,
}

impl FaultKind {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => FaultKind::Equivocation,
            2 => FaultKind::CommitmentMismatch,
            3 => FaultKind::InvalidShare,
            4 => FaultKind::Timeout,
            5 => FaultKind::InvalidPartial,
            6 => FaultKind::Malformed,
            7 => FaultKind::FalseAccusation,
            _ => return None,
        })
    }
}

/// Blame outcome of a consistency check.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Blame {
    pub kind: FaultKind,
    pub culprits: Vec<PartyIndex>,
}

impl Blame {
    pub fn new(kind: FaultKind, culprit: PartyIndex) -> Self {
        Blame {
            kind,
            culprits: vec![culprit],
        }
    }
}

/// A failed session. `culprits` is empty when the fault could not be localized.
#[derive(Clone, PartialEq, Eq)]
pub struct AbortReport {
    pub round: u8,
    pub kind: FaultKind,
    pub culprits: Vec<PartyIndex>,
    /// Party that first reported the abort (the local party if detected here).
    pub reporter: PartyIndex,
    /// Per-party partial signatures, kept for failed online rounds.
    pub transcript: Vec<(PartyIndex, Scalar)>,
    /// Evidence attached by the reporter, if any.
    pub evidence: Vec<u8>,
}

impl fmt::Debug for AbortReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "AbortReport(round {}, {:?}, culprits {:?}, reported by {})",
            self.round, self.kind, self.culprits, self.reporter
        )
    }
}

impl fmt::Display for AbortReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("protocol abort: {0}")]
    Abort(AbortReport),
    #[error("degenerate presignature (delta or r is zero)")]
    Degenerate,
    #[error("presignature already consumed")]
    PresignatureConsumed,
    #[error("transport: {0}")]
    Transport(TransportError),
    #[error("sharing: {0}")]
    Sharing(#[from] SharingError),
    #[error("paillier: {0}")]
    Paillier(#[from] PaillierError),
    #[error("curve: {0}")]
    Curve(#[from] EcError),
    #[error("usage error: {0}")]
    Usage(String),
}

impl ProtocolError {
    pub fn report(&self) -> Option<&AbortReport> {
        match self {
            ProtocolError::Abort(r) => Some(r),
            _ => None,
        }
    }

    pub fn culprits(&self) -> Vec<PartyIndex> {
        match self {
            ProtocolError::Abort(r) => r.culprits.clone(),
            ProtocolError::Transport(TransportError::JoinTimeout { absent, .. }) => absent.clone(),
            _ => Vec::new(),
        }
    }
}

impl From<TransportError> for ProtocolError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::RoundTimeout { round, missing, .. } => ProtocolError::Abort(AbortReport {
                round,
                kind: FaultKind::Timeout,
                culprits: missing,
                reporter: 0,
                transcript: Vec::new(),
                evidence: Vec::new(),
            }),
            TransportError::PeerAborted {
                round, reporter, body, ..
            } => match AbortBody::decode(&body) {
                Ok(b) => ProtocolError::Abort(AbortReport {
                    round,
                    kind: b.kind,
                    culprits: b.culprits,
                    reporter,
                    transcript: Vec::new(),
                    evidence: b.evidence,
                }),
                Err(_) => ProtocolError::Abort(AbortReport {
                    round,
                    kind: FaultKind::Malformed,
                    culprits: vec![reporter],
                    reporter,
                    transcript: Vec::new(),
                    evidence: Vec::new(),
                }),
            },
            other => ProtocolError::Transport(other),
        }
    }
}

impl From<DecodeError> for ProtocolError {
    fn from(e: DecodeError) -> Self {
        ProtocolError::Usage(format!("decode: {e}"))
    }
}

/// Payload of an abort announcement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AbortBody {
    pub kind: FaultKind,
    pub culprits: Vec<PartyIndex>,
    pub evidence: Vec<u8>,
}

impl AbortBody {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(self.kind as u8).u16(self.culprits.len() as u16);
        for c in &self.culprits {
            w.u16(*c);
        }
        w.bytes(&self.evidence);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let kind = FaultKind::from_u8(r.u8()?).ok_or(DecodeError::Invalid("fault kind"))?;
        let count = r.u16()? as usize;
        let culprits = (0..count).map(|_| r.u16()).collect::<Result<_, _>>()?;
        let evidence = r.bytes()?.to_vec();
        r.finish()?;
        Ok(AbortBody {
            kind,
            culprits,
            evidence,
        })
    }
}

/// Everything a party needs to take part in sessions.
#[derive(Clone)]
pub struct PartyContext {
    pub endpoint: Endpoint,
    pub paillier: Arc<PaillierKeypair>,
    pub paillier_keys: Arc<BTreeMap<PartyIndex, PaillierPublicKey>>,
    pub profile: Profile,
    pub faults: FaultPlan,
}

impl PartyContext {
    pub fn index(&self) -> PartyIndex {
        self.endpoint.me()
    }

    pub fn paillier_key_of(&self, party: PartyIndex) -> Result<&PaillierPublicKey, ProtocolError> {
        self.paillier_keys
            .get(&party)
            .ok_or_else(|| ProtocolError::Usage(format!("no Paillier key for party {party}")))
    }
}

/// Raises a locally detected blame: announces it to the room and returns the error.
pub(crate) fn raise(room: &mut Room, round: u8, blame: Blame, evidence: Vec<u8>) -> ProtocolError {
    let body = AbortBody {
        kind: blame.kind,
        culprits: blame.culprits.clone(),
        evidence,
    };
    room.abort(round, &body.encode());
    ProtocolError::Abort(AbortReport {
        round,
        kind: blame.kind,
        culprits: blame.culprits,
        reporter: room.me(),
        transcript: Vec::new(),
        evidence: body.evidence,
    })
}

/// Receives a round; a local timeout is announced to the room so peers
/// attribute it identically.
pub(crate) fn receive(room: &mut Room, round: u8, expect: Expect) -> Result<Inbox, ProtocolError> {
    match room.receive_round(round, expect) {
        Ok(inbox) => Ok(inbox),
        Err(TransportError::RoundTimeout { missing, .. }) => {
            Err(raise(room, round, Blame { kind: FaultKind::Timeout, culprits: missing }, Vec::new()))
        }
        Err(e) => Err(e.into()),
    }
}

/// Decodes a peer payload, blaming the sender if it is malformed.
pub(crate) fn decode_from<T>(
    room: &mut Room,
    round: u8,
    sender: PartyIndex,
    f: impl FnOnce() -> Result<T, ProtocolError>,
) -> Result<T, ProtocolError> {
    f().map_err(|e| {
        log::debug!("malformed payload from {sender} in round {round}: {e}");
        raise(room, round, Blame::new(FaultKind::Malformed, sender), Vec::new())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abort_body_roundtrip() {
        let b = AbortBody {
            kind: FaultKind::InvalidShare,
            culprits: vec![2, 5],
            evidence: vec![1, 2, 3],
        };
        assert_eq!(AbortBody::decode(&b.encode()).unwrap(), b);
        assert!(AbortBody::decode(&[99, 0, 0, 0, 0, 0, 0]).is_err());
    }

    #[test]
    fn timeouts_map_to_blame() {
        let e: ProtocolError = TransportError::RoundTimeout {
            room: Default::default(),
            round: 2,
            missing: vec![3],
        }
        .into();
        let r = e.report().unwrap();
        assert_eq!((r.kind, r.culprits.clone(), r.round), (FaultKind::Timeout, vec![3], 2));
    }
}
