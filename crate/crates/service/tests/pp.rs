use std::time::Duration;

use kmn_core::ec::{GroupPoint, Scalar};
use kmn_service::pp::{PeerRequest, PeerResponse, SendState};
use kmn_service::{
    Caller, Command, CommandKind, FspNetwork, FspOptions, KmnOptions, PoolConfig, PpError, SignPath, SignerKind,
    TransferReceipt,
};
use rand::rngs::OsRng;

fn network() -> FspNetwork {
    FspNetwork::start(FspOptions::fast()).unwrap()
}

fn persistent(dir: &tempfile::TempDir) -> FspNetwork {
    FspNetwork::start(FspOptions {
        data_dir: Some(dir.path().to_path_buf()),
        ..FspOptions::fast()
    })
    .unwrap()
}

#[test]
fn local_transfer_splits_off_change() {
    let net = network();
    let pp = net.pp(1);
    let a = pp.create_wallet("alice").unwrap();
    let b = pp.create_wallet("bob").unwrap();
    pp.fund(a, 100).unwrap();
    let out = pp.transfer(a, 1, b, 30).unwrap();
    assert!(!out.remote);
    assert_eq!(pp.balance(a).unwrap(), 70);
    assert_eq!(pp.balance(b).unwrap(), 30);
    assert_eq!(pp.wallet(b).unwrap().notes.len(), 1);
    net.audit().unwrap();
}

#[test]
fn local_transfer_merges_and_moves_exact_notes() {
    let net = network();
    let pp = net.pp(1);
    let a = pp.create_wallet("alice").unwrap();
    let b = pp.create_wallet("bob").unwrap();
    pp.fund(a, 40).unwrap();
    pp.fund(a, 50).unwrap();
    pp.transfer(a, 1, b, 90).unwrap();
    assert_eq!(pp.balance(a).unwrap(), 0);
    assert_eq!(pp.balance(b).unwrap(), 90);
    pp.transfer(b, 1, a, 90).unwrap();
    assert_eq!(pp.balance(a).unwrap(), 90);
    let totals = net.audit().unwrap();
    assert_eq!(totals.active_value, 90);
    assert_eq!(totals.active_notes, 1);
}

#[test]
fn insufficient_funds_never_reach_the_verifier() {
    let net = network();
    let pp = net.pp(1);
    let a = pp.create_wallet("alice").unwrap();
    let b = pp.create_wallet("bob").unwrap();
    pp.fund(a, 10).unwrap();
    net.verifier().start_trace();
    let err = pp.transfer(a, 1, b, 11).unwrap_err();
    assert!(matches!(err, PpError::InsufficientFunds { available: 10, requested: 11 }), "{err}");
    let err = pp.transfer(a, 2, b, 11).unwrap_err();
    assert!(matches!(err, PpError::InsufficientFunds { .. }), "{err}");
    assert!(net.verifier().take_trace().is_empty());
    assert_eq!(pp.balance(a).unwrap(), 10);
}

#[test]
fn client_api_round_trip() {
    let net = network();
    let c1 = net.client(1);
    let c2 = net.client(2);
    let a = c1.create_wallet("alice").unwrap();
    let b = c2.create_wallet("bob").unwrap();
    c1.fund(a, 25).unwrap();
    let out = c1.transfer_traced(a, 2, b, 5).unwrap();
    assert!(out.remote);
    let numbers: Vec<u8> = out.steps.iter().map(|s| s.number).filter(|&n| n > 0).collect();
    assert_eq!(numbers, [1, 2, 3, 4, 5, 6, 7, 9, 8]);
    assert!(out.receipt.unwrap().verify(&net.verifier().public_key()));
    assert_eq!(c1.balance(a).unwrap(), 20);
    assert_eq!(c2.balance(b).unwrap(), 5);
    let err = c1.transfer(a, 2, b, 500).unwrap_err();
    assert!(err.to_string().starts_with("status 2"), "{err}");
    assert!(c1.balance(uuid::Uuid::new_v4()).is_err());
}

#[test]
fn remote_transfer_completes_with_a_valid_receipt() {
    let net = network();
    let (pp1, pp2) = (net.pp(1), net.pp(2));
    let a = pp1.create_wallet("alice").unwrap();
    let c = pp2.create_wallet("carol").unwrap();
    pp1.fund(a, 100).unwrap();

    let out = pp1.transfer(a, 2, c, 60).unwrap();
    assert!(out.remote);
    let receipt = out.receipt.unwrap();
    assert!(receipt.verify(&net.verifier().public_key()));
    assert_eq!(receipt.value, 60);
    let numbers: Vec<u8> = out.steps.iter().map(|s| s.number).filter(|&n| n > 0).collect();
    for n in 1..=9 {
        assert!(numbers.contains(&n), "step {n} missing from {numbers:?}");
    }

    assert_eq!(pp1.balance(a).unwrap(), 40);
    assert_eq!(pp2.balance(c).unwrap(), 60);
    let recv = pp2.receive_session(out.session_id).unwrap();
    assert_eq!(recv.value, 60);
    // The credited note is not the registered destination.
    let note = &pp2.wallet(c).unwrap().notes[0];
    assert_ne!(note.public_key, receipt.destination);
    assert!(pp1.stalled_sessions().is_empty());
    assert_eq!(net.verifier().double_spend_rejections(), 0);
    net.audit().unwrap();
}

#[test]
fn sender_kmn_never_holds_a_share_of_r1() {
    let net = network();
    let (pp1, pp2) = (net.pp(1), net.pp(2));
    let a = pp1.create_wallet("alice").unwrap();
    let c = pp2.create_wallet("carol").unwrap();
    pp1.fund(a, 9).unwrap();
    let out = pp1.transfer(a, 2, c, 9).unwrap();
    let recv = pp2.receive_session(out.session_id).unwrap();
    let sender = net.kmn(1).unwrap();
    let recipient = net.kmn(2).unwrap();
    for p in sender.parties() {
        assert!(sender.store(p).key(recv.uuid1).is_none());
    }
    for p in recipient.parties() {
        assert!(recipient.store(p).key(recv.uuid1).is_some());
    }
}

#[test]
fn crash_after_receipt_then_restart_completes_the_transfer() {
    let dir = tempfile::tempdir().unwrap();
    let net = persistent(&dir);
    let a = net.pp(1).create_wallet("alice").unwrap();
    let c = net.pp(2).create_wallet("carol").unwrap();
    net.pp(1).fund(a, 50).unwrap();

    net.pp(1).crash_after_receipt();
    let err = net.pp(1).transfer(a, 2, c, 20).unwrap_err();
    assert!(matches!(err, PpError::Crashed), "{err}");
    assert_eq!(net.pp(2).balance(c).unwrap(), 0);

    let resumed = net.restart_pp(1).unwrap();
    assert_eq!(resumed.len(), 1);
    let out = resumed.into_iter().next().unwrap().1.unwrap();
    assert!(out.receipt.unwrap().verify(&net.verifier().public_key()));
    assert_eq!(net.pp(1).balance(a).unwrap(), 30);
    assert_eq!(net.pp(2).balance(c).unwrap(), 20);
    assert_eq!(net.verifier().double_spend_rejections(), 0);
    net.audit().unwrap();
}

#[test]
fn wrong_r2_is_a_protocol_violation_without_ack() {
    let dir = tempfile::tempdir().unwrap();
    let net = persistent(&dir);
    let a = net.pp(1).create_wallet("alice").unwrap();
    let c = net.pp(2).create_wallet("carol").unwrap();
    net.pp(1).fund(a, 50).unwrap();
    net.pp(1).crash_after_receipt();
    net.pp(1).transfer(a, 2, c, 20).unwrap_err();

    let id = net.pp(1).stalled_sessions()[0];
    let SendState::Registered { receipt, .. } = net.pp(1).send_session(id).unwrap().state else {
        panic!("session not registered");
    };
    let forged = PeerRequest::Disclose {
        session_id: id,
        r2: Scalar::random_nonzero(&mut OsRng),
        receipt: receipt.clone(),
    };
    let resp = net.pp(2).handle_peer(Caller(1), &forged);
    assert!(matches!(resp, PeerResponse::Error { violation: true, .. }), "{resp:?}");

    // A receipt for a different value is refused as well.
    let mut other = TransferReceipt::decode(&hex::decode(&receipt).unwrap()).unwrap();
    other.value += 1;
    let forged = PeerRequest::Disclose {
        session_id: id,
        r2: Scalar::random_nonzero(&mut OsRng),
        receipt: hex::encode(other.encode()),
    };
    let resp = net.pp(2).handle_peer(Caller(1), &forged);
    assert!(matches!(resp, PeerResponse::Error { violation: true, .. }), "{resp:?}");
    assert_eq!(net.pp(2).balance(c).unwrap(), 0);

    // Only the announcing FSP may disclose.
    let resp = net.pp(2).handle_peer(Caller(7), &forged);
    assert!(matches!(resp, PeerResponse::Error { violation: true, .. }), "{resp:?}");

    net.restart_pp(1).unwrap()[0].1.as_ref().unwrap();
    assert_eq!(net.pp(2).balance(c).unwrap(), 20);
}

#[test]
fn recipient_offline_leaves_the_session_stalled_until_resumed() {
    let dir = tempfile::tempdir().unwrap();
    let net = persistent(&dir);
    let a = net.pp(1).create_wallet("alice").unwrap();
    let c = net.pp(2).create_wallet("carol").unwrap();
    net.pp(1).fund(a, 50).unwrap();
    net.pp(1).crash_after_receipt();
    net.pp(1).transfer(a, 2, c, 20).unwrap_err();

    net.stop_pp(2);
    let resumed = net.restart_pp(1).unwrap();
    let id = resumed[0].0;
    assert!(matches!(resumed[0].1, Err(PpError::AwaitingAck(s)) if s == id));
    assert_eq!(net.pp(1).stalled_sessions(), vec![id]);
    assert_eq!(net.pp(1).in_flight_value(), 20);
    net.audit().unwrap();

    net.restart_pp(2).unwrap();
    net.pp(1).resume(id).unwrap();
    assert!(net.pp(1).stalled_sessions().is_empty());
    assert_eq!(net.pp(2).balance(c).unwrap(), 20);
    net.audit().unwrap();
}

#[test]
fn final_switch_path_follows_presign_on_add() {
    let net = network();
    let a = net.pp(1).create_wallet("alice").unwrap();
    let c = net.pp(2).create_wallet("carol").unwrap();
    net.pp(1).fund(a, 5).unwrap();
    let out = net.pp(1).transfer(a, 2, c, 5).unwrap();
    assert_eq!(out.step9_path, Some(SignPath::Interactive));

    let mut opts = FspOptions::fast();
    opts.kmn.pool = PoolConfig {
        keys: 0,
        presigs_per_key: 0,
        pooled_key_presigs: 0,
        presign_on_add: true,
        replenish: false,
        max_backoff: Duration::from_millis(100),
    };
    let net = FspNetwork::start(opts).unwrap();
    let a = net.pp(1).create_wallet("alice").unwrap();
    let c = net.pp(2).create_wallet("carol").unwrap();
    net.pp(1).fund(a, 5).unwrap();
    let out = net.pp(1).transfer(a, 2, c, 5).unwrap();
    assert_eq!(out.step9_path, Some(SignPath::Online));
}

/// Shape of a verifier request with keys and signatures stripped.
fn shape(request: &[u8]) -> (u8, Option<CommandKind>, usize, Vec<u64>) {
    match request[0] {
        1 => {
            let cmd = Command::decode(&request[1..]).unwrap();
            let values = cmd.outputs.iter().map(|o| o.value).collect();
            (1, Some(cmd.kind), cmd.inputs.len(), values)
        }
        verb => {
            let mut value = [0u8; 8];
            value.copy_from_slice(&request[1 + 33..1 + 33 + 8]);
            (verb, None, 1, vec![u64::from_be_bytes(value)])
        }
    }
}

fn scenario(signer: SignerKind) -> Vec<(u8, Option<CommandKind>, usize, Vec<u64>)> {
    let net = FspNetwork::start(FspOptions {
        signer,
        kmn: KmnOptions::fast(2, 3),
        ..FspOptions::default()
    })
    .unwrap();
    let (pp1, pp2) = (net.pp(1), net.pp(2));
    let a = pp1.create_wallet("alice").unwrap();
    let b = pp1.create_wallet("bob").unwrap();
    let c = pp2.create_wallet("carol").unwrap();
    net.verifier().start_trace();
    pp1.fund(a, 30).unwrap();
    pp1.fund(a, 20).unwrap();
    pp1.transfer(a, 1, b, 35).unwrap();
    pp1.transfer(a, 2, c, 15).unwrap();
    pp2.transfer(c, 1, b, 4).unwrap();
    net.audit().unwrap();
    net.verifier().take_trace().iter().map(|r| shape(r)).collect()
}

#[test]
fn threshold_and_single_signer_produce_the_same_verifier_traffic() {
    let threshold = scenario(SignerKind::Threshold);
    let single = scenario(SignerKind::Single);
    assert!(!threshold.is_empty());
    assert_eq!(threshold, single);
}

#[test]
fn verifier_sees_unlinkable_keys_for_remote_transfers() {
    let net = network();
    let a = net.pp(1).create_wallet("alice").unwrap();
    let c = net.pp(2).create_wallet("carol").unwrap();
    net.pp(1).fund(a, 8).unwrap();
    net.verifier().start_trace();
    let out = net.pp(1).transfer(a, 2, c, 8).unwrap();
    let dest = out.receipt.unwrap().destination;
    let recv = net.pp(2).receive_session(out.session_id).unwrap();
    let trace = net.verifier().take_trace();
    let seen = |p: &GroupPoint| trace.iter().any(|r| r.windows(33).any(|w| w == p.to_bytes()));
    assert!(seen(&dest));
    assert!(!seen(&recv.r1));
}
