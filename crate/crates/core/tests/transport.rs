use std::collections::BTreeMap;
use std::net::TcpListener;
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use kmn_core::transport::tcp::spawn_listener;
use kmn_core::transport::{
    Directory, Endpoint, Expect, InProcessNetwork, Link, Mailboxes, MessageKind, Phase, RoomFaults, RoomId,
    RoomMessage, StaticIdentity, TcpLink, TransportConfig, TransportError, BROADCAST,
};
use kmn_core::PartyIndex;
use rand::rngs::OsRng;

fn config(round_ms: u64) -> TransportConfig {
    TransportConfig {
        round_timeout: Duration::from_millis(round_ms),
        join_timeout: Duration::from_millis(round_ms),
        inject_delay: None,
    }
}

fn inproc(n: u16, cfg: TransportConfig) -> (InProcessNetwork, Vec<Endpoint>) {
    let net = InProcessNetwork::new();
    let ids: Vec<StaticIdentity> = (1..=n).map(|i| StaticIdentity::generate(i, &mut OsRng)).collect();
    let dir = Directory::new(ids.iter().map(|i| i.public()));
    let eps = ids
        .into_iter()
        .map(|id| net.endpoint(id, dir.clone(), cfg.clone()))
        .collect();
    (net, eps)
}

/// Two rounds: broadcast `[me, round]`, then unicast `[me, to]` to every peer.
fn two_round_session(ep: &Endpoint, room: RoomId, parties: &[PartyIndex]) -> Result<(u8, BTreeMap<PartyIndex, Vec<u8>>), TransportError> {
    let mut r = ep.open_room(room, parties, Phase::Keygen)?;
    let me = ep.me();
    r.broadcast(1, &[me as u8, 1])?;
    let inbox = r.receive_round(1, Expect::BROADCAST)?;
    for (&s, p) in &inbox.broadcasts {
        assert_eq!(p, &vec![s as u8, 1]);
    }
    for peer in r.peers().collect::<Vec<_>>() {
        r.send(2, peer, &[me as u8, peer as u8])?;
    }
    let inbox2 = r.receive_round(2, Expect::UNICAST)?;
    let stats = r.finish();
    Ok((stats.rounds, inbox2.unicasts))
}

#[test]
fn three_parties_complete_two_rounds() {
    let (_net, eps) = inproc(3, config(5_000));
    let room = RoomId::random(&mut OsRng);
    let results: Vec<_> = std::thread::scope(|s| {
        let hs: Vec<_> = eps.iter().map(|ep| s.spawn(move || two_round_session(ep, room, &[1, 2, 3]))).collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for (i, res) in results.into_iter().enumerate() {
        let me = (i + 1) as u8;
        let (rounds, unicasts) = res.unwrap();
        assert_eq!(rounds, 2);
        assert_eq!(unicasts.len(), 2);
        for (s, p) in unicasts {
            assert_eq!(p, vec![s as u8, me]);
        }
    }
}

#[test]
fn absent_party_fails_room_setup() {
    let (_net, eps) = inproc(3, config(300));
    let room = RoomId::random(&mut OsRng);
    let errs: Vec<_> = std::thread::scope(|s| {
        let hs: Vec<_> = eps[..2]
            .iter()
            .map(|ep| s.spawn(move || ep.open_room(room, &[1, 2, 3], Phase::Presign).err()))
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for e in errs {
        assert_eq!(e, Some(TransportError::JoinTimeout { room, absent: vec![3] }));
    }
}

#[test]
fn fifty_concurrent_rooms_stay_isolated() {
    let (_net, eps) = inproc(3, config(20_000));
    let rooms: Vec<RoomId> = (0..50).map(|_| RoomId::random(&mut OsRng)).collect();
    let ok = std::thread::scope(|s| {
        let mut hs = Vec::new();
        for room in &rooms {
            for ep in &eps {
                let room = *room;
                hs.push(s.spawn(move || {
                    let mut r = ep.open_room(room, &[1, 2, 3], Phase::Sign)?;
                    let tag = room.0[0];
                    r.broadcast(1, &[tag, ep.me() as u8])?;
                    let inbox = r.receive_round(1, Expect::BROADCAST)?;
                    let clean = inbox.broadcasts.iter().all(|(&p, b)| b == &vec![tag, p as u8]);
                    r.finish();
                    Ok::<bool, TransportError>(clean && inbox.broadcasts.len() == 3)
                }));
            }
        }
        hs.into_iter().map(|h| h.join().unwrap()).collect::<Vec<_>>()
    });
    assert_eq!(ok.len(), 150);
    assert!(ok.into_iter().all(|r| r == Ok(true)));
}

#[test]
fn eavesdropper_never_sees_unicast_plaintext() {
    let (net, eps) = inproc(2, config(5_000));
    let seen: Arc<Mutex<Vec<RoomMessage>>> = Arc::default();
    let sink = seen.clone();
    net.set_tap(Some(Arc::new(move |m: &RoomMessage| sink.lock().unwrap().push(m.clone()))));
    let secret = b"share-value-0123456789abcdef!!";
    let room = RoomId::random(&mut OsRng);
    std::thread::scope(|s| {
        let a = s.spawn(|| {
            let mut r = eps[0].open_room(room, &[1, 2], Phase::Keygen).unwrap();
            r.send(1, 2, secret).unwrap();
            r.receive_round(1, Expect::UNICAST).unwrap();
        });
        let b = s.spawn(|| {
            let mut r = eps[1].open_room(room, &[1, 2], Phase::Keygen).unwrap();
            r.send(1, 1, b"ack").unwrap();
            let inbox = r.receive_round(1, Expect::UNICAST).unwrap();
            assert_eq!(inbox.unicasts[&1], secret.to_vec());
        });
        a.join().unwrap();
        b.join().unwrap();
    });
    let frames = seen.lock().unwrap();
    let unicasts: Vec<_> = frames.iter().filter(|m| m.kind == MessageKind::Unicast).collect();
    assert_eq!(unicasts.len(), 2);
    for m in frames.iter() {
        let wire = m.encode();
        assert!(!wire.windows(secret.len()).any(|w| w == secret));
    }
}

#[test]
fn forged_and_tampered_messages_are_rejected() {
    let (net, eps) = inproc(3, config(400));
    let room = RoomId::random(&mut OsRng);
    let forged = Mutex::new(None);
    let err = std::thread::scope(|s| {
        let receiver = s.spawn(|| {
            let mut r = eps[1].open_room(room, &[1, 2, 3], Phase::Keygen).unwrap();
            r.broadcast(1, b"two").unwrap();
            r.receive_round(1, Expect::BROADCAST).err()
        });
        let honest = s.spawn(|| {
            let mut r = eps[2].open_room(room, &[1, 2, 3], Phase::Keygen).unwrap();
            r.broadcast(1, b"three").unwrap();
            let _ = r.receive_round(1, Expect::BROADCAST);
        });
        // Party 1 joins but never broadcasts; an attacker injects a broadcast in its name.
        let attacker = s.spawn(|| {
            let r = eps[0].open_room(room, &[1, 2, 3], Phase::Keygen).unwrap();
            let mut msg = RoomMessage {
                room_id: room,
                round: 1,
                sender: 1,
                kind: MessageKind::Broadcast,
                recipient: BROADCAST,
                payload: b"forged".to_vec(),
                auth_tag: vec![0u8; 64],
            };
            net.deliver(2, msg.clone()).unwrap();
            // Well-formed tag under a key outside the directory.
            msg.auth_tag = StaticIdentity::generate(1, &mut OsRng).sign(&msg.signed_bytes());
            net.deliver(2, msg.clone()).unwrap();
            *forged.lock().unwrap() = Some(msg);
            std::thread::sleep(Duration::from_millis(600));
            drop(r);
        });
        attacker.join().unwrap();
        honest.join().unwrap();
        receiver.join().unwrap()
    });
    assert!(forged.lock().unwrap().is_some());
    assert_eq!(
        err,
        Some(TransportError::RoundTimeout {
            room,
            round: 1,
            missing: vec![1]
        })
    );
}

#[test]
fn silent_sender_is_named_by_timeout() {
    let (_net, eps) = inproc(3, config(300));
    let room = RoomId::random(&mut OsRng);
    let errs: Vec<_> = std::thread::scope(|s| {
        let hs: Vec<_> = eps
            .iter()
            .map(|ep| {
                s.spawn(move || {
                    let mut r = ep.open_room(room, &[1, 2, 3], Phase::Presign).unwrap();
                    if ep.me() == 3 {
                        r.set_faults(RoomFaults {
                            silent_from: Some(2),
                            ..Default::default()
                        });
                    }
                    r.broadcast(1, b"x").unwrap();
                    r.receive_round(1, Expect::BROADCAST).unwrap();
                    r.broadcast(2, b"y").unwrap();
                    r.receive_round(2, Expect::BROADCAST).err()
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for e in &errs[..2] {
        assert!(matches!(e, Some(TransportError::RoundTimeout { round: 2, missing, .. }) if missing == &vec![3]));
    }
}

#[test]
fn injected_delay_shows_up_as_io_wait() {
    let (net, eps) = inproc(2, config(5_000));
    net.set_delay(Some(Duration::from_millis(50)));
    let room = RoomId::random(&mut OsRng);
    let stats: Vec<_> = std::thread::scope(|s| {
        let hs: Vec<_> = eps
            .iter()
            .map(|ep| {
                s.spawn(move || {
                    let mut r = ep.open_room(room, &[1, 2], Phase::Sign).unwrap();
                    r.broadcast(1, b"ping").unwrap();
                    r.receive_round(1, Expect::BROADCAST).unwrap();
                    r.finish()
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for st in stats {
        let io = Duration::from_nanos(st.io_wait_ns());
        assert!(io >= Duration::from_millis(40) && io <= Duration::from_millis(60), "io wait {io:?}");
        let sum = st.compute_ns() + st.io_wait_ns();
        let diff = sum.abs_diff(st.wall_ns) as f64;
        assert!(diff <= 0.05 * st.wall_ns as f64, "compute+io {sum} vs wall {}", st.wall_ns);
    }
}

#[test]
fn compute_plus_io_equals_wall_under_load() {
    let (_net, eps) = inproc(3, config(5_000));
    let room = RoomId::random(&mut OsRng);
    let stats: Vec<_> = std::thread::scope(|s| {
        let hs: Vec<_> = eps
            .iter()
            .map(|ep| {
                s.spawn(move || {
                    let mut r = ep.open_room(room, &[1, 2, 3], Phase::Keygen).unwrap();
                    for round in 1..=3u8 {
                        // Some local work between rounds.
                        let mut acc = kmn_core::Scalar::from_u64(ep.me() as u64 + round as u64);
                        for _ in 0..2_000 {
                            acc = acc.square() + kmn_core::Scalar::ONE;
                        }
                        r.broadcast(round, &acc.to_bytes()).unwrap();
                        r.receive_round(round, Expect::BROADCAST).unwrap();
                    }
                    r.finish()
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for st in stats {
        assert_eq!(st.rounds, 3);
        assert_eq!(st.samples.len(), 4);
        let sum = st.compute_ns() + st.io_wait_ns();
        assert!(sum.abs_diff(st.wall_ns) as f64 <= 0.05 * st.wall_ns as f64);
        assert!(st.compute_ns() > 0);
    }
}

#[test]
fn tcp_backend_carries_a_session() {
    let ids: Vec<StaticIdentity> = (1..=3).map(|i| StaticIdentity::generate(i, &mut OsRng)).collect();
    let dir = Directory::new(ids.iter().map(|i| i.public()));
    let listeners: Vec<TcpListener> = (0..3).map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
    let addrs: BTreeMap<PartyIndex, std::net::SocketAddr> = listeners
        .iter()
        .enumerate()
        .map(|(i, l)| ((i + 1) as PartyIndex, l.local_addr().unwrap()))
        .collect();
    let shutdown = Arc::new(AtomicBool::new(false));
    let mut eps = Vec::new();
    for (id, listener) in ids.into_iter().zip(listeners) {
        let mailboxes = Arc::new(Mailboxes::new());
        spawn_listener(listener, mailboxes.clone(), shutdown.clone()).unwrap();
        let link = Arc::new(TcpLink::new(addrs.clone().into_iter().collect()));
        eps.push(Endpoint::new(id, dir.clone(), link, mailboxes, config(5_000)));
    }
    let room = RoomId::random(&mut OsRng);
    let started = Instant::now();
    let results: Vec<_> = std::thread::scope(|s| {
        let hs: Vec<_> = eps.iter().map(|ep| s.spawn(move || two_round_session(ep, room, &[1, 2, 3]))).collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    shutdown.store(true, std::sync::atomic::Ordering::Relaxed);
    assert!(started.elapsed() < Duration::from_secs(5));
    for r in results {
        assert_eq!(r.unwrap().0, 2);
    }
}
