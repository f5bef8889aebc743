//! Session drivers: open the room, run the state machine, collect timing.

use rand::rngs::OsRng;
use uuid::Uuid;

use super::dkg::run_dkg;
use super::presign::{retry_room, run_presign};
use super::sign::run_sign;
use super::{KeyShareRecord, PartyContext, PresignatureRecord, ProtocolError, MAX_PRESIGN_RETRIES};
use crate::ec::{Digest, EcdsaSignature, GroupPoint};
use crate::transport::{Phase, Room, RoomId, SessionStats};
use crate::PartyIndex;

/// One party's result of one session.
#[derive(Debug)]
pub struct Outcome<T> {
    pub result: Result<T, ProtocolError>,
    /// Timing of the last attempt; empty if the room never opened.
    pub stats: SessionStats,
    /// Rooms used, including degenerate-presignature retries.
    pub rooms: Vec<RoomId>,
}

fn drive<T>(
    ctx: &PartyContext,
    room_id: RoomId,
    participants: &[PartyIndex],
    phase: Phase,
    body: impl FnOnce(&mut Room) -> Result<T, ProtocolError>,
) -> (Result<T, ProtocolError>, SessionStats) {
    let mut room = match ctx.endpoint.open_room(room_id, participants, phase) {
        Ok(room) => room,
        Err(e) => return (Err(e.into()), SessionStats::default()),
    };
    let result = body(&mut room);
    (result, room.finish())
}

pub fn keygen(
    ctx: &PartyContext,
    room_id: RoomId,
    parties: &[PartyIndex],
    threshold: u16,
    key_uuid: Uuid,
) -> Outcome<KeyShareRecord> {
    let (result, stats) = drive(ctx, room_id, parties, Phase::Keygen, |room| {
        run_dkg(room, ctx, key_uuid, threshold, &mut OsRng)
    });
    Outcome {
        result,
        stats,
        rooms: vec![room_id],
    }
}

/// Presigns, retrying in derived rooms while the result is degenerate.
pub fn presign(
    ctx: &PartyContext,
    room_id: RoomId,
    key: &KeyShareRecord,
    signers: &[PartyIndex],
) -> Outcome<PresignatureRecord> {
    retrying(room_id, |id| {
        drive(ctx, id, signers, Phase::Presign, |room| run_presign(room, ctx, key, 0, &mut OsRng))
    })
}

fn retrying<T>(room_id: RoomId, mut attempt: impl FnMut(RoomId) -> (Result<T, ProtocolError>, SessionStats)) -> Outcome<T> {
    let mut rooms = Vec::new();
    let mut n = 0;
    loop {
        let id = if n == 0 { room_id } else { retry_room(room_id, n) };
        rooms.push(id);
        let (result, stats) = attempt(id);
        if matches!(result, Err(ProtocolError::Degenerate)) && n < MAX_PRESIGN_RETRIES {
            n += 1;
            continue;
        }
        return Outcome { result, stats, rooms };
    }
}

pub fn sign(
    ctx: &PartyContext,
    room_id: RoomId,
    presig: &mut PresignatureRecord,
    public_key: &GroupPoint,
    digest: &Digest,
) -> Outcome<EcdsaSignature> {
    let signers = presig.public.signers.clone();
    let (result, stats) = drive(ctx, room_id, &signers, Phase::Sign, |room| {
        run_sign(room, ctx, presig, public_key, digest, 0)
    });
    Outcome {
        result,
        stats,
        rooms: vec![room_id],
    }
}

/// Presign and sign in one session: three presigning rounds then the online round.
pub fn sign_interactive(
    ctx: &PartyContext,
    room_id: RoomId,
    key: &KeyShareRecord,
    signers: &[PartyIndex],
    digest: &Digest,
) -> Outcome<EcdsaSignature> {
    retrying(room_id, |id| {
        drive(ctx, id, signers, Phase::Presign, |room| {
            let mut presig = run_presign(room, ctx, key, 0, &mut OsRng)?;
            run_sign(room, ctx, &mut presig, &key.public_key, digest, 3)
        })
    })
}
