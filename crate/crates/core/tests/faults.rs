use std::collections::BTreeSet;
use std::time::Duration;

use kmn_core::cluster::{ClusterOptions, LocalCluster, Session};
use kmn_core::ec::Digest;
use kmn_core::{FaultKind, FaultPlan, PartyIndex, Profile, ProtocolError};
use rand::rngs::OsRng;

fn cluster(n: u16, profile: Profile) -> LocalCluster {
    let mut opts = ClusterOptions::fast(n);
    opts.profile = profile;
    opts.transport.round_timeout = Duration::from_secs(3);
    LocalCluster::new(opts).unwrap()
}

fn assert_blamed<T: std::fmt::Debug>(session: &Session<T>, culprit: PartyIndex, kind: FaultKind) {
    let honest: Vec<PartyIndex> = session.outputs.keys().copied().filter(|&p| p != culprit).collect();
    for p in &honest {
        let err = session.outputs[p].as_ref().expect_err("honest party must abort");
        let report = err.report().unwrap_or_else(|| panic!("party {p}: {err}"));
        assert_eq!(report.culprits, vec![culprit], "party {p}: {report}");
        assert_eq!(report.kind, kind, "party {p}: {report}");
    }
    assert_eq!(session.culprits_named_by(&honest), BTreeSet::from([culprit]));
}

#[test]
fn equivocation_in_keygen_is_attributed() {
    for round in [1u8, 2] {
        let mut c = cluster(3, Profile::Test);
        c.set_faults(2, FaultPlan::equivocate(round));
        assert_blamed(&c.keygen(2), 2, FaultKind::Equivocation);
    }
}

#[test]
fn equivocation_in_presign_is_attributed() {
    let mut c = cluster(3, Profile::Test);
    let keys = c.keygen(2).into_ok().unwrap();
    c.set_faults(3, FaultPlan::equivocate(1));
    assert_blamed(&c.presign(&keys, &[1, 2, 3]), 3, FaultKind::Equivocation);
}

#[test]
fn invalid_share_is_attributed_to_the_dealer() {
    let mut c = cluster(4, Profile::Test);
    c.set_faults(1, FaultPlan::bad_share_to(3));
    let session = c.keygen(3);
    assert_blamed(&session, 1, FaultKind::InvalidShare);
    let evidence = &session.outputs[&3].as_ref().unwrap_err().report().unwrap().evidence;
    assert!(!evidence.is_empty());
}

#[test]
fn perturbed_partial_is_attributed_in_the_test_profile() {
    let mut c = cluster(3, Profile::Test);
    let keys = c.keygen(2).into_ok().unwrap();
    let presigs = c.presign(&keys, &[1, 2, 3]).into_ok().unwrap();
    c.set_faults(2, FaultPlan::bad_partial());
    let (session, _) = c.sign(presigs, &keys[&1].public_key, &Digest::random(&mut OsRng));
    assert_blamed(&session, 2, FaultKind::InvalidPartial);
}

#[test]
fn perturbed_partial_in_production_reports_the_transcript() {
    let mut c = cluster(3, Profile::Production);
    let keys = c.keygen(2).into_ok().unwrap();
    let presigs = c.presign(&keys, &[1, 3]).into_ok().unwrap();
    assert!(presigs.values().all(|p| p.public.checks.is_none()));
    c.set_faults(3, FaultPlan::bad_partial());
    let (session, _) = c.sign(presigs, &keys[&1].public_key, &Digest::random(&mut OsRng));
    let report = session.outputs[&1].as_ref().unwrap_err().report().unwrap().clone();
    assert_eq!(report.kind, FaultKind::InvalidPartial);
    assert!(report.culprits.is_empty());
    assert_eq!(report.transcript.len(), 2);
}

#[test]
fn silent_party_is_named_by_timeout() {
    let mut c = cluster(3, Profile::Test);
    c.set_faults(3, FaultPlan::silent_from(2));
    let session = c.keygen(2);
    assert_blamed(&session, 3, FaultKind::Timeout);
    assert!(matches!(
        session.outputs[&3],
        Err(ProtocolError::Abort(_))
    ));
}

#[test]
fn silent_signer_is_named_in_the_online_round() {
    let mut c = cluster(3, Profile::Production);
    let keys = c.keygen(2).into_ok().unwrap();
    let presigs = c.presign(&keys, &[1, 2]).into_ok().unwrap();
    c.set_faults(1, FaultPlan::silent_from(1));
    let (session, _) = c.sign(presigs, &keys[&1].public_key, &Digest::random(&mut OsRng));
    assert_blamed(&session, 1, FaultKind::Timeout);
}
