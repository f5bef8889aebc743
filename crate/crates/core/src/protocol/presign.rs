//! Message-independent presigning among a signer set `S`.
//!
//! Each signer holds an additive share `w_i = λ_{S,i}·x_i` of the key, picks
//! `k_i, γ_i` and runs MtA twice with every peer to obtain additive shares of
//! `δ = k·γ` and `χ = k·x`. Opening `δ` and `Γ = γ·G` gives `R = δ⁻¹·Γ = k⁻¹·G`.
//!
//! | round | broadcast | unicast |
//! |-------|-----------|---------|
//! | 1 | `Enc_i(k_i)`, `H(Γ_i, nonce)` | |
//! | 2 | echo of 1 | MtA responses for `γ_i` and `w_i` |
//! | 3 | `Γ_i`, nonce, `δ_i` (and check points) | |

use std::collections::BTreeMap;

use rand::{CryptoRng, RngCore};

use super::commit::{self, Commitment, NONCE_LEN};
use super::echo::{echo_check, RoundTranscript};
use super::mta;
use super::records::PresignPublic;
use super::{
    decode_from, raise, receive, Blame, FaultKind, KeyShareRecord, PartyContext, PresignatureRecord, Profile,
    ProtocolError,
};
use crate::ec::{GroupPoint, Scalar};
use crate::encoding::{Reader, Writer};
use crate::paillier::PaillierCiphertext;
use crate::sharing::lagrange_coefficient;
use crate::transport::{Expect, Room, RoomId};
use crate::PartyIndex;

/// Room for the `attempt`-th retry after a degenerate presignature.
pub fn retry_room(base: RoomId, attempt: usize) -> RoomId {
    base.derive(format!("presign-retry-{attempt}").as_bytes())
}

/// Checks that `signers` can presign for `key`.
pub fn check_signers(key: &KeyShareRecord, signers: &[PartyIndex]) -> Result<(), ProtocolError> {
    if signers.len() < key.threshold as usize {
        return Err(ProtocolError::Usage(format!(
            "{} signers for threshold {}",
            signers.len(),
            key.threshold
        )));
    }
    if let Some(p) = signers.iter().find(|p| !key.parties.contains(p)) {
        return Err(ProtocolError::Usage(format!("party {p} holds no share of the key")));
    }
    Ok(())
}

/// Runs presigning in `room`, whose participants are the signer set. Rounds
/// are numbered from `first_round + 1`.
pub fn run_presign<R: RngCore + CryptoRng>(
    room: &mut Room,
    ctx: &PartyContext,
    key: &KeyShareRecord,
    first_round: u8,
    rng: &mut R,
) -> Result<PresignatureRecord, ProtocolError> {
    let (r1, r2, r3) = (first_round + 1, first_round + 2, first_round + 3);
    let me = room.me();
    let id = room.id();
    let signers = room.participants().to_vec();
    let peers: Vec<PartyIndex> = room.peers().collect();
    check_signers(key, &signers)?;
    if key.party_index != me {
        return Err(ProtocolError::Usage("key share belongs to another party".into()));
    }
    room.set_faults(ctx.faults.room.clone());

    let w_i = lagrange_coefficient(&signers, me)? * key.share;
    let k_i = Scalar::random_nonzero(rng);
    let gamma_i = Scalar::random_nonzero(rng);
    let big_gamma_i = GroupPoint::mul_base(&gamma_i);

    // Round 1
    let enc_k = ctx.paillier.encrypt(&mta::scalar_to_big(&k_i), rng)?;
    let (gamma_hash, gamma_nonce) = commit::commit_fresh(id, r1, me, &big_gamma_i.to_bytes(), rng);
    let mut w = Writer::new();
    enc_k.encode(&mut w);
    w.raw(&gamma_hash);
    room.broadcast(r1, &w.finish())?;
    let inbox1 = receive(room, r1, Expect::BROADCAST)?;
    let mut enc_ks: BTreeMap<PartyIndex, PaillierCiphertext> = BTreeMap::new();
    let mut gamma_hashes: BTreeMap<PartyIndex, Commitment> = BTreeMap::new();
    for (&sender, payload) in &inbox1.broadcasts {
        if sender == me {
            continue;
        }
        let key_j = ctx.paillier_key_of(sender)?;
        let (ct, h) = decode_from(room, r1, sender, || {
            let mut r = Reader::new(payload);
            let ct = PaillierCiphertext::decode(&mut r, key_j)?;
            let h = r.array::<32>()?;
            r.finish()?;
            Ok((ct, h))
        })?;
        enc_ks.insert(sender, ct);
        gamma_hashes.insert(sender, h);
    }
    let transcript1 = RoundTranscript::from_broadcasts(id, r1, &inbox1.broadcasts);

    // Round 2
    let mut w = Writer::new();
    transcript1.encode(&mut w);
    room.broadcast(r2, &w.finish())?;
    let mut delta_i = k_i * gamma_i;
    let mut chi_i = k_i * w_i;
    for &peer in &peers {
        let key_j = ctx.paillier_key_of(peer)?;
        let d = mta::respond(key_j, &enc_ks[&peer], &gamma_i, rng)?;
        let f = mta::respond(key_j, &enc_ks[&peer], &w_i, rng)?;
        delta_i += d.beta;
        chi_i += f.beta;
        let mut w = Writer::new();
        d.ciphertext.encode(&mut w);
        f.ciphertext.encode(&mut w);
        room.send(r2, peer, &w.finish())?;
    }
    let inbox2 = receive(room, r2, Expect::BOTH)?;
    let mut echoes = BTreeMap::new();
    for (&sender, payload) in &inbox2.broadcasts {
        if sender == me {
            continue;
        }
        let echo = decode_from(room, r2, sender, || {
            let mut r = Reader::new(payload);
            let echo = RoundTranscript::decode(&mut r)?;
            r.finish()?;
            Ok(echo)
        })?;
        echoes.insert(sender, echo);
    }
    if let Err(blame) = echo_check(me, &transcript1, &echoes) {
        return Err(raise(room, r2, blame, Vec::new()));
    }
    let own_key = ctx.paillier.public().clone();
    for (&sender, payload) in &inbox2.unicasts {
        let (d, f) = decode_from(room, r2, sender, || {
            let mut r = Reader::new(payload);
            let d = PaillierCiphertext::decode(&mut r, &own_key)?;
            let f = PaillierCiphertext::decode(&mut r, &own_key)?;
            r.finish()?;
            Ok((d, f))
        })?;
        delta_i += mta::finish(&ctx.paillier, &d)?;
        chi_i += mta::finish(&ctx.paillier, &f)?;
    }

    // Round 3
    let test_profile = ctx.profile == Profile::Test;
    let mut w = Writer::new();
    w.point(&big_gamma_i).raw(&gamma_nonce).scalar(&delta_i);
    if test_profile {
        w.u8(1)
            .point(&GroupPoint::mul_base(&k_i))
            .point(&GroupPoint::mul_base(&chi_i));
    } else {
        w.u8(0);
    }
    room.broadcast(r3, &w.finish())?;
    let inbox3 = receive(room, r3, Expect::BROADCAST)?;
    let mut gammas = BTreeMap::new();
    let mut deltas = BTreeMap::new();
    let mut checks = BTreeMap::new();
    let mut opened_wrong = Vec::new();
    for (&sender, payload) in &inbox3.broadcasts {
        let (g, nonce, d, check) = decode_from(room, r3, sender, || {
            let mut r = Reader::new(payload);
            let g = r.point()?;
            let nonce = r.array::<NONCE_LEN>()?;
            let d = r.scalar()?;
            let check = match r.u8()? {
                0 => None,
                1 => Some((r.point()?, r.point()?)),
                _ => return Err(ProtocolError::Usage("check flag".into())),
            };
            r.finish()?;
            Ok((g, nonce, d, check))
        })?;
        if sender != me && !commit::verify(id, r1, sender, &g.to_bytes(), &nonce, &gamma_hashes[&sender]) {
            opened_wrong.push(sender);
        }
        gammas.insert(sender, g);
        deltas.insert(sender, d);
        if let Some(c) = check {
            checks.insert(sender, c);
        }
    }
    if !opened_wrong.is_empty() {
        return Err(raise(
            room,
            r3,
            Blame {
                kind: FaultKind::CommitmentMismatch,
                culprits: opened_wrong,
            },
            Vec::new(),
        ));
    }

    // Output
    let delta: Scalar = deltas.values().sum();
    let big_gamma: GroupPoint = gammas.values().copied().sum();
    let delta_inv = delta.invert().map_err(|_| ProtocolError::Degenerate)?;
    let big_r = big_gamma * delta_inv;
    let r = big_r.x_scalar().filter(|r| !r.is_zero()).ok_or(ProtocolError::Degenerate)?;
    let checks = (test_profile && checks.len() == signers.len()).then_some(checks);
    Ok(PresignatureRecord {
        party_index: me,
        public: PresignPublic {
            presig_id: id,
            key_uuid: key.key_uuid,
            signers,
            big_r,
            r,
            checks,
        },
        k_share: k_i,
        chi_share: chi_i,
        consumed: false,
    })
}
