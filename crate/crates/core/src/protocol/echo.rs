//! Echo-broadcast consistency.
//!
//! After each broadcast round every party re-broadcasts the hashes of the
//! payloads it received. Any sender whose payload hashes differ across
//! receivers equivocated.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{Blame, FaultKind};
use crate::encoding::{DecodeError, Reader, Writer};
use crate::transport::RoomId;
use crate::PartyIndex;

/// Hashes of every broadcast payload a party saw in one round, its own included.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundTranscript {
    pub room_id: RoomId,
    pub round: u8,
    pub hashes: BTreeMap<PartyIndex, [u8; 32]>,
}

pub fn payload_hash(room: RoomId, round: u8, sender: PartyIndex, payload: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"kmn/echo/v1");
    h.update(room.0);
    h.update([round]);
    h.update(sender.to_be_bytes());
    h.update(payload);
    h.finalize().into()
}

impl RoundTranscript {
    pub fn from_broadcasts(room_id: RoomId, round: u8, broadcasts: &BTreeMap<PartyIndex, Vec<u8>>) -> Self {
        RoundTranscript {
            room_id,
            round,
            hashes: broadcasts
                .iter()
                .map(|(&s, p)| (s, payload_hash(room_id, round, s, p)))
                .collect(),
        }
    }

    pub fn encode(&self, w: &mut Writer) {
        w.raw(&self.room_id.0).u8(self.round).u16(self.hashes.len() as u16);
        for (s, h) in &self.hashes {
            w.u16(*s).raw(h);
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let room_id = RoomId(r.array()?);
        let round = r.u8()?;
        let count = r.u16()?;
        let mut hashes = BTreeMap::new();
        for _ in 0..count {
            let s = r.u16()?;
            if hashes.insert(s, r.array()?).is_some() {
                return Err(DecodeError::Invalid("duplicate echo entry"));
            }
        }
        Ok(RoundTranscript { room_id, round, hashes })
    }
}

/// Compares the local transcript of party `me` with every peer's echo of the same round.
///
/// A peer whose echo is for a different room or round, or that omits a
/// sender, is blamed as malformed. Otherwise every sender whose payload
/// hashes disagree across the other parties is blamed for equivocation.
pub fn echo_check(
    me: PartyIndex,
    own: &RoundTranscript,
    peers: &BTreeMap<PartyIndex, RoundTranscript>,
) -> Result<(), Blame> {
    let malformed: Vec<PartyIndex> = peers
        .iter()
        .filter(|(_, t)| {
            t.room_id != own.room_id
                || t.round != own.round
                || t.hashes.len() != own.hashes.len()
                || own.hashes.keys().any(|s| !t.hashes.contains_key(s))
        })
        .map(|(&p, _)| p)
        .collect();
    if !malformed.is_empty() {
        return Err(Blame {
            kind: FaultKind::Malformed,
            culprits: malformed,
        });
    }
    let culprits: Vec<PartyIndex> = own
        .hashes
        .keys()
        .copied()
        .filter(|&sender| {
            // A sender's view of its own payload is not a witness.
            let mut views = std::iter::once((me, own))
                .chain(peers.iter().map(|(&p, t)| (p, t)))
                .filter(|&(p, _)| p != sender)
                .map(|(_, t)| t.hashes[&sender]);
            match views.next() {
                Some(first) => views.any(|h| h != first),
                None => false,
            }
        })
        .collect();
    if culprits.is_empty() {
        Ok(())
    } else {
        Err(Blame {
            kind: FaultKind::Equivocation,
            culprits,
        })
    }
}
