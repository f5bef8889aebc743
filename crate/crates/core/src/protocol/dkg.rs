//! Distributed key generation: every party deals a Feldman-committed
//! sharing of a random secret and the joint key is the sum.
//!
//! | round | broadcast | unicast |
//! |-------|-----------|---------|
//! | 1 | `H(C_i, nonce)` | |
//! | 2 | echo of 1, `C_i`, nonce | `f_i(j)` signed by the dealer |
//! | 3 | echo of 2, complaints | |

use std::collections::BTreeMap;

use rand::{CryptoRng, RngCore};
use uuid::Uuid;

use super::commit::{self, Commitment, NONCE_LEN};
use super::echo::{echo_check, RoundTranscript};
use super::{decode_from, raise, receive, Blame, FaultKind, KeyShareRecord, PartyContext, ProtocolError};
use crate::ec::{GroupPoint, Scalar};
use crate::encoding::{Reader, Writer};
use crate::sharing::{check_params, FeldmanCommitment, Polynomial};
use crate::transport::{Expect, Room, RoomId};
use crate::PartyIndex;

/// Dealer-signed statement that `share` was dealt to `recipient`, so a
/// recipient can prove a bad share to third parties.
fn share_statement(room: RoomId, dealer: PartyIndex, recipient: PartyIndex, share: &Scalar) -> Vec<u8> {
    let mut w = Writer::with_capacity(88);
    w.raw(b"kmn/dkg-share/v1")
        .raw(&room.0)
        .u16(dealer)
        .u16(recipient)
        .scalar(share);
    w.finish()
}

/// A recipient's claim that `dealer` dealt it a share failing the Feldman check.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Complaint {
    dealer: PartyIndex,
    share: Scalar,
    signature: Vec<u8>,
}

fn encode_complaints(w: &mut Writer, complaints: &[Complaint]) {
    w.u16(complaints.len() as u16);
    for c in complaints {
        w.u16(c.dealer).scalar(&c.share).bytes(&c.signature);
    }
}

fn decode_complaints(r: &mut Reader<'_>) -> Result<Vec<Complaint>, ProtocolError> {
    let count = r.u16()?;
    (0..count)
        .map(|_| {
            Ok(Complaint {
                dealer: r.u16()?,
                share: r.scalar()?,
                signature: r.bytes()?.to_vec(),
            })
        })
        .collect()
}

struct Dealing {
    commitment: FeldmanCommitment,
    nonce: [u8; NONCE_LEN],
}

/// Runs keygen in `room` among all its participants. Every party outputs the
/// same public key and a share consistent with the joint commitment.
pub fn run_dkg<R: RngCore + CryptoRng>(
    room: &mut Room,
    ctx: &PartyContext,
    key_uuid: Uuid,
    threshold: u16,
    rng: &mut R,
) -> Result<KeyShareRecord, ProtocolError> {
    let me = room.me();
    let id = room.id();
    let parties = room.participants().to_vec();
    let peers: Vec<PartyIndex> = room.peers().collect();
    check_params(threshold, parties.len() as u16)?;
    if parties.contains(&0) {
        return Err(ProtocolError::Usage("party index 0 is reserved".into()));
    }
    room.set_faults(ctx.faults.room.clone());

    // Round 1: commit to the Feldman vector.
    let poly = Polynomial::random(Scalar::random(rng), threshold, rng);
    let own_commitment = poly.commit();
    let mut cw = Writer::new();
    own_commitment.encode(&mut cw);
    let own_commitment_bytes = cw.finish();
    let (hash, nonce) = commit::commit_fresh(id, 1, me, &own_commitment_bytes, rng);
    room.broadcast(1, &hash)?;
    let inbox1 = receive(room, 1, Expect::BROADCAST)?;
    let mut hashes: BTreeMap<PartyIndex, Commitment> = BTreeMap::new();
    for (&sender, payload) in &inbox1.broadcasts {
        let h = decode_from(room, 1, sender, || {
            <[u8; 32]>::try_from(payload.as_slice()).map_err(|_| ProtocolError::Usage("hash length".into()))
        })?;
        hashes.insert(sender, h);
    }
    let transcript1 = RoundTranscript::from_broadcasts(id, 1, &inbox1.broadcasts);

    // Round 2: echo, open the commitment, deal signed shares.
    let mut w = Writer::new();
    transcript1.encode(&mut w);
    w.raw(&own_commitment_bytes).raw(&nonce);
    room.broadcast(2, &w.finish())?;
    for &peer in &peers {
        let mut share = poly.evaluate(peer);
        if ctx.faults.corrupt_share_to == Some(peer) {
            share += Scalar::ONE;
        }
        let signature = ctx.endpoint.sign(&share_statement(id, me, peer, &share));
        let mut w = Writer::with_capacity(32 + 80);
        w.scalar(&share).bytes(&signature);
        room.send(2, peer, &w.finish())?;
    }
    let inbox2 = receive(room, 2, Expect::BOTH)?;

    let mut echoes1 = BTreeMap::new();
    let mut dealings: BTreeMap<PartyIndex, Dealing> = BTreeMap::new();
    for (&sender, payload) in &inbox2.broadcasts {
        if sender == me {
            continue;
        }
        let (echo, dealing) = decode_from(room, 2, sender, || {
            let mut r = Reader::new(payload);
            let echo = RoundTranscript::decode(&mut r)?;
            let commitment = FeldmanCommitment::decode(&mut r)?;
            let nonce = r.array::<NONCE_LEN>()?;
            r.finish()?;
            if commitment.threshold() != threshold as usize {
                return Err(ProtocolError::Usage("commitment length".into()));
            }
            Ok((echo, Dealing { commitment, nonce }))
        })?;
        echoes1.insert(sender, echo);
        dealings.insert(sender, dealing);
    }
    if let Err(blame) = echo_check(me, &transcript1, &echoes1) {
        return Err(raise(room, 2, blame, Vec::new()));
    }

    let mut received: BTreeMap<PartyIndex, Scalar> = BTreeMap::new();
    let mut complaints = Vec::new();
    for (&dealer, payload) in &inbox2.unicasts {
        let (share, signature) = decode_from(room, 2, dealer, || {
            let mut r = Reader::new(payload);
            let share = r.scalar()?;
            let signature = r.bytes()?.to_vec();
            r.finish()?;
            Ok((share, signature))
        })?;
        if !ctx.endpoint.verify_from(dealer, &share_statement(id, dealer, me, &share), &signature) {
            return Err(raise(room, 2, Blame::new(FaultKind::Malformed, dealer), Vec::new()));
        }
        if !dealings[&dealer].commitment.verify(me, &share) {
            complaints.push(Complaint {
                dealer,
                share,
                signature,
            });
        }
        received.insert(dealer, share);
    }
    let transcript2 = RoundTranscript::from_broadcasts(id, 2, &inbox2.broadcasts);

    // Round 3: echo round 2 and publish complaints.
    let mut w = Writer::new();
    transcript2.encode(&mut w);
    encode_complaints(&mut w, &complaints);
    room.broadcast(3, &w.finish())?;
    let inbox3 = receive(room, 3, Expect::BROADCAST)?;

    let mut echoes2 = BTreeMap::new();
    let mut all_complaints: BTreeMap<PartyIndex, Vec<Complaint>> = BTreeMap::new();
    all_complaints.insert(me, complaints);
    for (&sender, payload) in &inbox3.broadcasts {
        if sender == me {
            continue;
        }
        let (echo, list) = decode_from(room, 3, sender, || {
            let mut r = Reader::new(payload);
            let echo = RoundTranscript::decode(&mut r)?;
            let list = decode_complaints(&mut r)?;
            r.finish()?;
            Ok((echo, list))
        })?;
        echoes2.insert(sender, echo);
        all_complaints.insert(sender, list);
    }

    // Output. Consistency of what everyone saw comes first, so that all honest
    // parties attribute a fault identically.
    if let Err(blame) = echo_check(me, &transcript2, &echoes2) {
        return Err(raise(room, 3, blame, Vec::new()));
    }
    let opened_wrong: Vec<PartyIndex> = dealings
        .iter()
        .filter(|(&p, d)| {
            let mut w = Writer::new();
            d.commitment.encode(&mut w);
            !commit::verify(id, 1, p, &w.finish(), &d.nonce, &hashes[&p])
        })
        .map(|(&p, _)| p)
        .collect();
    if !opened_wrong.is_empty() {
        return Err(raise(
            room,
            3,
            Blame {
                kind: FaultKind::CommitmentMismatch,
                culprits: opened_wrong,
            },
            Vec::new(),
        ));
    }
    dealings.insert(
        me,
        Dealing {
            commitment: own_commitment,
            nonce,
        },
    );
    if let Some((blame, evidence)) = adjudicate(ctx, id, &dealings, &all_complaints) {
        return Err(raise(room, 3, blame, evidence));
    }

    let share = received.values().copied().sum::<Scalar>() + poly.evaluate(me);
    let commitment = FeldmanCommitment::combine(dealings.values().map(|d| &d.commitment));
    let public_key = dealings.values().map(|d| d.commitment.public_key()).sum::<GroupPoint>();
    let record = KeyShareRecord {
        key_uuid,
        party_index: me,
        threshold,
        parties,
        share,
        public_key,
        commitment,
    };
    if !record.is_consistent() {
        return Err(ProtocolError::Usage("joint share inconsistent with commitment".into()));
    }
    Ok(record)
}

/// Rules on every complaint. A complaint holds when the dealer's signature
/// covers the share and the share fails the dealer's commitment; otherwise
/// the complainer is blamed.
fn adjudicate(
    ctx: &PartyContext,
    room: RoomId,
    dealings: &BTreeMap<PartyIndex, Dealing>,
    complaints: &BTreeMap<PartyIndex, Vec<Complaint>>,
) -> Option<(Blame, Vec<u8>)> {
    let mut dealers = Vec::new();
    let mut accusers = Vec::new();
    let mut w = Writer::new();
    for (&reporter, list) in complaints {
        for c in list {
            let holds = dealings.get(&c.dealer).is_some_and(|d| {
                ctx.endpoint
                    .verify_from(c.dealer, &share_statement(room, c.dealer, reporter, &c.share), &c.signature)
                    && !d.commitment.verify(reporter, &c.share)
            });
            if holds {
                dealers.push(c.dealer);
                w.u16(reporter);
                encode_complaints(&mut w, std::slice::from_ref(c));
            } else {
                accusers.push(reporter);
            }
        }
    }
    if dealers.is_empty() && accusers.is_empty() {
        return None;
    }
    let kind = if dealers.is_empty() {
        FaultKind::FalseAccusation
    } else {
        FaultKind::InvalidShare
    };
    let mut culprits: Vec<PartyIndex> = dealers.into_iter().chain(accusers).collect();
    culprits.sort_unstable();
    culprits.dedup();
    Some((Blame { kind, culprits }, w.finish()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complaints_roundtrip() {
        let list = vec![Complaint {
            dealer: 4,
            share: Scalar::from_u64(9),
            signature: vec![1; 64],
        }];
        let mut w = Writer::new();
        encode_complaints(&mut w, &list);
        let bytes = w.finish();
        let mut r = Reader::new(&bytes);
        assert_eq!(decode_complaints(&mut r).unwrap(), list);
    }

    #[test]
    fn share_statement_binds_every_field() {
        let s = Scalar::from_u64(3);
        let base = share_statement(RoomId([1; 16]), 1, 2, &s);
        assert_ne!(base, share_statement(RoomId([2; 16]), 1, 2, &s));
        assert_ne!(base, share_statement(RoomId([1; 16]), 2, 1, &s));
        assert_ne!(base, share_statement(RoomId([1; 16]), 1, 2, &Scalar::from_u64(4)));
    }
}
