//! Whole-key operations performed by the coordinator: reconstructing a key
//! for export, splitting an incoming key for import, and additive update.

use rand::{CryptoRng, RngCore};
use uuid::Uuid;
use zeroize::Zeroize;

use super::{KeyShareRecord, ProtocolError};
use crate::ec::{GroupPoint, Scalar};
use crate::sharing::{check_params, shamir_reconstruct, FeldmanCommitment, Polynomial, ShamirShare, SharingError};
use crate::PartyIndex;

/// Reconstructs the secret from at least `t` shares, each checked against `commitment`.
pub fn export_key(shares: &mut [ShamirShare], commitment: &FeldmanCommitment) -> Result<Scalar, ProtocolError> {
    let t = commitment.threshold();
    if shares.len() < t {
        return Err(SharingError::InsufficientShares {
            needed: t,
            got: shares.len(),
        }
        .into());
    }
    if let Some(bad) = shares.iter().find(|s| !commitment.verify_share(s)) {
        let culprit = bad.party_index;
        shares.iter_mut().for_each(Zeroize::zeroize);
        return Err(SharingError::InvalidShare(culprit).into());
    }
    let secret = shamir_reconstruct(&shares[..t]);
    shares.iter_mut().for_each(Zeroize::zeroize);
    let secret = secret?;
    if GroupPoint::mul_base(&secret) != commitment.public_key() {
        return Err(ProtocolError::Usage("reconstructed key does not match the public key".into()));
    }
    Ok(secret)
}

/// A freshly split key, ready for distribution to its holders.
pub struct SplitKey {
    pub key_uuid: Uuid,
    pub threshold: u16,
    pub parties: Vec<PartyIndex>,
    pub shares: Vec<ShamirShare>,
    pub commitment: FeldmanCommitment,
}

impl SplitKey {
    pub fn public_key(&self) -> GroupPoint {
        self.commitment.public_key()
    }

    pub fn share_for(&self, party: PartyIndex) -> Option<&ShamirShare> {
        self.shares.iter().find(|s| s.party_index == party)
    }
}

impl Drop for SplitKey {
    fn drop(&mut self) {
        self.shares.zeroize();
    }
}

fn split<R: RngCore + CryptoRng>(
    secret: Scalar,
    threshold: u16,
    parties: &[PartyIndex],
    key_uuid: Uuid,
    rng: &mut R,
) -> Result<SplitKey, ProtocolError> {
    check_params(threshold, parties.len() as u16)?;
    let mut parties = parties.to_vec();
    parties.sort_unstable();
    if parties.windows(2).any(|w| w[0] == w[1]) || parties.first() == Some(&0) {
        return Err(ProtocolError::Usage("party indices must be distinct and nonzero".into()));
    }
    let poly = Polynomial::random(secret, threshold, rng);
    let shares = parties
        .iter()
        .map(|&p| ShamirShare {
            key_uuid,
            party_index: p,
            threshold,
            value: poly.evaluate(p),
        })
        .collect();
    Ok(SplitKey {
        key_uuid,
        threshold,
        parties,
        shares,
        commitment: poly.commit(),
    })
}

/// Splits an externally supplied private key into fresh shares under a new uuid.
pub fn import_key<R: RngCore + CryptoRng>(
    mut full: Scalar,
    threshold: u16,
    parties: &[PartyIndex],
    rng: &mut R,
) -> Result<SplitKey, ProtocolError> {
    if full.is_zero() {
        return Err(ProtocolError::Usage("zero private key".into()));
    }
    let out = split(full, threshold, parties, Uuid::new_v4(), rng);
    full.zeroize();
    out
}

/// Splits `incoming` at the same indices as an existing key, for an additive update.
/// A zero increment is allowed and leaves the public key unchanged.
pub fn split_increment<R: RngCore + CryptoRng>(
    mut incoming: Scalar,
    existing_threshold: u16,
    existing_parties: &[PartyIndex],
    rng: &mut R,
) -> Result<SplitKey, ProtocolError> {
    let out = split(incoming, existing_threshold, existing_parties, Uuid::new_v4(), rng);
    incoming.zeroize();
    out
}

/// Node side of import: turns a received share into a stored record.
pub fn record_from_share(
    share: &ShamirShare,
    parties: &[PartyIndex],
    commitment: &FeldmanCommitment,
) -> Result<KeyShareRecord, ProtocolError> {
    let record = KeyShareRecord {
        key_uuid: share.key_uuid,
        party_index: share.party_index,
        threshold: share.threshold,
        parties: parties.to_vec(),
        share: share.value,
        public_key: commitment.public_key(),
        commitment: commitment.clone(),
    };
    if !record.is_consistent() {
        return Err(SharingError::InvalidShare(share.party_index).into());
    }
    Ok(record)
}

/// Node side of an additive update: `share_new = share_old + share_incoming`
/// under the increment's uuid.
pub fn apply_increment(
    old: &KeyShareRecord,
    increment: &ShamirShare,
    increment_commitment: &FeldmanCommitment,
) -> Result<KeyShareRecord, ProtocolError> {
    if increment.party_index != old.party_index || increment.threshold != old.threshold {
        return Err(ProtocolError::Usage("increment does not match the existing sharing".into()));
    }
    if !increment_commitment.verify_share(increment) {
        return Err(SharingError::InvalidShare(increment.party_index).into());
    }
    let commitment = FeldmanCommitment::combine([&old.commitment, increment_commitment]);
    let record = KeyShareRecord {
        key_uuid: increment.key_uuid,
        party_index: old.party_index,
        threshold: old.threshold,
        parties: old.parties.clone(),
        share: old.share + increment.value,
        public_key: old.public_key + increment_commitment.public_key(),
        commitment,
    };
    debug_assert!(record.is_consistent());
    Ok(record)
}
