//! Durable per-party outputs of keygen and presigning.

use std::collections::BTreeMap;

use uuid::Uuid;
use zeroize::Zeroize;

use crate::ec::{GroupPoint, Scalar};
use crate::encoding::{DecodeError, Reader, Writer};
use crate::sharing::{FeldmanCommitment, ShamirShare};
use crate::transport::RoomId;
use crate::PartyIndex;

/// One party's share of a threshold key.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyShareRecord {
    pub key_uuid: Uuid,
    pub party_index: PartyIndex,
    pub threshold: u16,
    /// Every holder of a share, ascending.
    pub parties: Vec<PartyIndex>,
    pub share: Scalar,
    pub public_key: GroupPoint,
    /// Commitment to the joint sharing polynomial; `evaluate(j)` is party `j`'s public share.
    pub commitment: FeldmanCommitment,
}

impl std::fmt::Debug for KeyShareRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyShareRecord")
            .field("key_uuid", &self.key_uuid)
            .field("party_index", &self.party_index)
            .field("threshold", &self.threshold)
            .field("parties", &self.parties)
            .field("public_key", &self.public_key)
            .finish_non_exhaustive()
    }
}

impl Drop for KeyShareRecord {
    fn drop(&mut self) {
        self.share.zeroize();
    }
}

impl KeyShareRecord {
    pub fn n(&self) -> u16 {
        self.parties.len() as u16
    }

    pub fn public_share(&self, party: PartyIndex) -> GroupPoint {
        self.commitment.evaluate(party)
    }

    pub fn shamir_share(&self) -> ShamirShare {
        ShamirShare {
            key_uuid: self.key_uuid,
            party_index: self.party_index,
            threshold: self.threshold,
            value: self.share,
        }
    }

    /// Share is consistent with the joint commitment, whose constant term is the public key.
    pub fn is_consistent(&self) -> bool {
        self.commitment.threshold() == self.threshold as usize
            && self.commitment.public_key() == self.public_key
            && self.commitment.verify(self.party_index, &self.share)
            && self.parties.contains(&self.party_index)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.uuid(&self.key_uuid).u16(self.party_index).u16(self.threshold);
        w.u16(self.parties.len() as u16);
        for p in &self.parties {
            w.u16(*p);
        }
        w.scalar(&self.share).point(&self.public_key);
        self.commitment.encode(&mut w);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let key_uuid = r.uuid()?;
        let party_index = r.u16()?;
        let threshold = r.u16()?;
        let count = r.u16()?;
        let parties = (0..count).map(|_| r.u16()).collect::<Result<Vec<_>, _>>()?;
        let share = r.scalar()?;
        let public_key = r.point()?;
        let commitment = FeldmanCommitment::decode(&mut r)?;
        r.finish()?;
        Ok(KeyShareRecord {
            key_uuid,
            party_index,
            threshold,
            parties,
            share,
            public_key,
            commitment,
        })
    }
}

/// Public part of a presignature, identical at every signer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PresignPublic {
    pub presig_id: RoomId,
    pub key_uuid: Uuid,
    pub signers: Vec<PartyIndex>,
    /// `R = k⁻¹·G`
    pub big_r: GroupPoint,
    /// `x(R) mod q`
    pub r: Scalar,
    /// `(k_j·G, χ_j·G)` per signer; published only under the test profile.
    pub checks: Option<BTreeMap<PartyIndex, (GroupPoint, GroupPoint)>>,
}

impl PresignPublic {
    pub fn encode(&self, w: &mut Writer) {
        w.raw(&self.presig_id.0).uuid(&self.key_uuid);
        w.u16(self.signers.len() as u16);
        for s in &self.signers {
            w.u16(*s);
        }
        w.point(&self.big_r).scalar(&self.r);
        match &self.checks {
            None => {
                w.u8(0);
            }
            Some(checks) => {
                w.u8(1).u16(checks.len() as u16);
                for (p, (k, chi)) in checks {
                    w.u16(*p).point(k).point(chi);
                }
            }
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let presig_id = RoomId(r.array()?);
        let key_uuid = r.uuid()?;
        let count = r.u16()?;
        let signers = (0..count).map(|_| r.u16()).collect::<Result<Vec<_>, _>>()?;
        let big_r = r.point()?;
        let rv = r.scalar()?;
        let checks = match r.u8()? {
            0 => None,
            1 => {
                let count = r.u16()?;
                let mut m = BTreeMap::new();
                for _ in 0..count {
                    let p = r.u16()?;
                    m.insert(p, (r.point()?, r.point()?));
                }
                Some(m)
            }
            _ => return Err(DecodeError::Invalid("check flag")),
        };
        Ok(PresignPublic {
            presig_id,
            key_uuid,
            signers,
            big_r,
            r: rv,
            checks,
        })
    }
}

/// One signer's single-use presignature.
#[derive(Clone, PartialEq, Eq)]
pub struct PresignatureRecord {
    pub party_index: PartyIndex,
    pub public: PresignPublic,
    pub k_share: Scalar,
    pub chi_share: Scalar,
    pub consumed: bool,
}

impl std::fmt::Debug for PresignatureRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PresignatureRecord")
            .field("party_index", &self.party_index)
            .field("public", &self.public)
            .field("consumed", &self.consumed)
            .finish_non_exhaustive()
    }
}

impl Drop for PresignatureRecord {
    fn drop(&mut self) {
        self.k_share.zeroize();
        self.chi_share.zeroize();
    }
}

impl PresignatureRecord {
    pub fn presig_id(&self) -> RoomId {
        self.public.presig_id
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u16(self.party_index);
        self.public.encode(&mut w);
        w.scalar(&self.k_share).scalar(&self.chi_share).u8(self.consumed as u8);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let party_index = r.u16()?;
        let public = PresignPublic::decode(&mut r)?;
        let k_share = r.scalar()?;
        let chi_share = r.scalar()?;
        let consumed = match r.u8()? {
            0 => false,
            1 => true,
            _ => return Err(DecodeError::Invalid("consumed flag")),
        };
        r.finish()?;
        Ok(PresignatureRecord {
            party_index,
            public,
            k_share,
            chi_share,
            consumed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sharing::Polynomial;
    use rand::rngs::OsRng;

    #[test]
    fn key_record_roundtrip_and_consistency() {
        let poly = Polynomial::random(Scalar::random(&mut OsRng), 2, &mut OsRng);
        let rec = KeyShareRecord {
            key_uuid: Uuid::new_v4(),
            party_index: 2,
            threshold: 2,
            parties: vec![1, 2, 3],
            share: poly.evaluate(2),
            public_key: GroupPoint::mul_base(&poly.constant()),
            commitment: poly.commit(),
        };
        assert!(rec.is_consistent());
        let back = KeyShareRecord::decode(&rec.encode()).unwrap();
        assert_eq!(back, rec);
        let mut bad = rec.clone();
        bad.share += Scalar::ONE;
        assert!(!bad.is_consistent());
    }

    #[test]
    fn presignature_roundtrip() {
        for checks in [None, Some(BTreeMap::from([(1, (GroupPoint::generator(), GroupPoint::identity()))]))] {
            let rec = PresignatureRecord {
                party_index: 1,
                public: PresignPublic {
                    presig_id: RoomId([5; 16]),
                    key_uuid: Uuid::new_v4(),
                    signers: vec![1, 3],
                    big_r: GroupPoint::generator(),
                    r: Scalar::from_u64(7),
                    checks,
                },
                k_share: Scalar::from_u64(11),
                chi_share: Scalar::from_u64(13),
                consumed: true,
            };
            assert_eq!(PresignatureRecord::decode(&rec.encode()).unwrap(), rec);
        }
    }
}
