//! Hash commitments bound to a room, round and sender.
//!
//! `SHA-256(tag ‖ room ‖ round ‖ sender ‖ len ‖ data ‖ nonce)`

use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};

use crate::transport::RoomId;
use crate::PartyIndex;

pub const NONCE_LEN: usize = 32;

pub type Commitment = [u8; 32];

pub fn commit(room: RoomId, round: u8, sender: PartyIndex, data: &[u8], nonce: &[u8; NONCE_LEN]) -> Commitment {
    let mut h = Sha256::new();
    h.update(b"kmn/commit/v1");
    h.update(room.0);
    h.update([round]);
    h.update(sender.to_be_bytes());
    h.update((data.len() as u32).to_be_bytes());
    h.update(data);
    h.update(nonce);
    h.finalize().into()
}

/// Commits to `data` under a fresh nonce.
pub fn commit_fresh<R: RngCore + CryptoRng>(
    room: RoomId,
    round: u8,
    sender: PartyIndex,
    data: &[u8],
    rng: &mut R,
) -> (Commitment, [u8; NONCE_LEN]) {
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    (commit(room, round, sender, data, &nonce), nonce)
}

pub fn verify(
    room: RoomId,
    round: u8,
    sender: PartyIndex,
    data: &[u8],
    nonce: &[u8; NONCE_LEN],
    commitment: &Commitment,
) -> bool {
    &commit(room, round, sender, data, nonce) == commitment
}
