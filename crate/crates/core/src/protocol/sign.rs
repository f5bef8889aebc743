//! Online signing: one broadcast round from a stored presignature.
//!
//! Signer `i` publishes `s_i = m·k_i + r·χ_i`. The sum `s = k·(m + r·x)`
//! together with `r` is a standard ECDSA signature under the joint key.

use std::collections::BTreeMap;

use super::records::PresignPublic;
use super::{decode_from, receive, AbortReport, FaultKind, PartyContext, PresignatureRecord, ProtocolError};
use crate::ec::{ecdsa_verify, Digest, EcdsaSignature, GroupPoint, Scalar};
use crate::encoding::Reader;
use crate::transport::{Expect, Phase, Room};
use crate::PartyIndex;

/// This party's partial signature. Marks the presignature consumed; a second
/// call fails.
pub fn partial(presig: &mut PresignatureRecord, digest: &Digest) -> Result<Scalar, ProtocolError> {
    if presig.consumed {
        return Err(ProtocolError::PresignatureConsumed);
    }
    presig.consumed = true;
    Ok(digest.to_scalar() * presig.k_share + presig.public.r * presig.chi_share)
}

/// Signers whose partial is inconsistent with their published check points.
pub fn identify_bad_partials(
    public: &PresignPublic,
    digest: &Digest,
    partials: &BTreeMap<PartyIndex, Scalar>,
) -> Option<Vec<PartyIndex>> {
    let checks = public.checks.as_ref()?;
    let m = digest.to_scalar();
    Some(
        partials
            .iter()
            .filter(|(p, s)| match checks.get(p) {
                Some((k_point, chi_point)) => GroupPoint::mul_base(s) != *k_point * m + *chi_point * public.r,
                None => true,
            })
            .map(|(&p, _)| p)
            .collect(),
    )
}

/// Sums partials into a low-s signature and verifies it under `public_key`.
///
/// On failure the report names the bad signers when check points are
/// available and always carries the partials transcript.
pub fn finalize(
    public: &PresignPublic,
    public_key: &GroupPoint,
    digest: &Digest,
    partials: &BTreeMap<PartyIndex, Scalar>,
) -> Result<EcdsaSignature, ProtocolError> {
    let missing: Vec<PartyIndex> = public
        .signers
        .iter()
        .copied()
        .filter(|p| !partials.contains_key(p))
        .collect();
    if !missing.is_empty() {
        return Err(ProtocolError::Abort(AbortReport {
            round: 1,
            kind: FaultKind::Timeout,
            culprits: missing,
            reporter: 0,
            transcript: partials.iter().map(|(&p, &s)| (p, s)).collect(),
            evidence: Vec::new(),
        }));
    }
    let s: Scalar = public.signers.iter().map(|p| partials[p]).sum();
    let signature = EcdsaSignature::new(public.r, s).ok();
    match signature {
        Some(sig) if ecdsa_verify(public_key, digest, &sig) => Ok(sig),
        _ => Err(ProtocolError::Abort(AbortReport {
            round: 1,
            kind: FaultKind::InvalidPartial,
            culprits: identify_bad_partials(public, digest, partials).unwrap_or_default(),
            reporter: 0,
            transcript: partials.iter().map(|(&p, &s)| (p, s)).collect(),
            evidence: Vec::new(),
        })),
    }
}

/// Runs the online round in `room` (participants = the presignature's
/// signers) as round `first_round + 1`.
pub fn run_sign(
    room: &mut Room,
    ctx: &PartyContext,
    presig: &mut PresignatureRecord,
    public_key: &GroupPoint,
    digest: &Digest,
    first_round: u8,
) -> Result<EcdsaSignature, ProtocolError> {
    let round = first_round + 1;
    if room.participants() != presig.public.signers.as_slice() {
        return Err(ProtocolError::Usage("room participants differ from the presignature's signers".into()));
    }
    room.set_phase(Phase::Sign);
    room.set_faults(ctx.faults.room.clone());
    let mut s_i = partial(presig, digest)?;
    if ctx.faults.perturb_partial {
        s_i += Scalar::ONE;
    }
    room.broadcast(round, &s_i.to_bytes())?;
    let inbox = receive(room, round, Expect::BROADCAST)?;
    let mut partials = BTreeMap::new();
    for (&sender, payload) in &inbox.broadcasts {
        let s = decode_from(room, round, sender, || {
            let mut r = Reader::new(payload);
            let s = r.scalar()?;
            r.finish()?;
            Ok(s)
        })?;
        partials.insert(sender, s);
    }
    finalize(&presig.public, public_key, digest, &partials).map_err(|e| match e {
        ProtocolError::Abort(mut report) => {
            report.round = round;
            report.reporter = room.me();
            ProtocolError::Abort(report)
        }
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::RoomId;
    use proptest::prelude::*;
    use uuid::Uuid;

    fn record(k: u64, chi: u64, r: u64) -> PresignatureRecord {
        PresignatureRecord {
            party_index: 1,
            public: PresignPublic {
                presig_id: RoomId([1; 16]),
                key_uuid: Uuid::nil(),
                signers: vec![1, 2],
                big_r: GroupPoint::generator(),
                r: Scalar::from_u64(r),
                checks: None,
            },
            k_share: Scalar::from_u64(k),
            chi_share: Scalar::from_u64(chi),
            consumed: false,
        }
    }

    proptest! {
        #[test]
        fn second_use_always_fails(k in 1u64.., chi in any::<u64>(), r in 1u64.., d1 in any::<[u8; 32]>(), d2 in any::<[u8; 32]>()) {
            let mut p = record(k, chi, r);
            let s = partial(&mut p, &Digest(d1)).unwrap();
            prop_assert_eq!(s, Digest(d1).to_scalar() * Scalar::from_u64(k) + Scalar::from_u64(r) * Scalar::from_u64(chi));
            prop_assert!(p.consumed);
            prop_assert_eq!(partial(&mut p, &Digest(d2)), Err(ProtocolError::PresignatureConsumed));
            let mut restored = PresignatureRecord::decode(&p.encode()).unwrap();
            prop_assert_eq!(partial(&mut restored, &Digest(d1)), Err(ProtocolError::PresignatureConsumed));
        }
    }

    #[test]
    fn missing_partial_is_a_timeout() {
        let p = record(1, 1, 1);
        let partials = BTreeMap::from([(1, Scalar::ONE)]);
        let err = finalize(&p.public, &GroupPoint::generator(), &Digest([0; 32]), &partials).unwrap_err();
        let report = err.report().unwrap();
        assert_eq!((report.kind, report.culprits.clone()), (FaultKind::Timeout, vec![2]));
    }
}
