use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError};
use rand::rngs::OsRng;

use super::clock::thread_cpu_time;
use super::mailbox::Envelope;
use super::{
    EndpointShared, MessageKind, PerfSample, Phase, RoomId, RoomMessage, Stage, TransportError, BROADCAST,
};
use crate::PartyIndex;

/// Which message kinds a round must collect from every other participant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Expect {
    pub broadcast: bool,
    pub unicast: bool,
}

impl Expect {
    pub const BROADCAST: Expect = Expect {
        broadcast: true,
        unicast: false,
    };
    pub const UNICAST: Expect = Expect {
        broadcast: false,
        unicast: true,
    };
    pub const BOTH: Expect = Expect {
        broadcast: true,
        unicast: true,
    };
}

/// Messages collected for one round. Broadcasts include the local party's own payload.
#[derive(Debug, Default, Clone)]
pub struct Inbox {
    pub broadcasts: BTreeMap<PartyIndex, Vec<u8>>,
    pub unicasts: BTreeMap<PartyIndex, Vec<u8>>,
}

/// Transport-level misbehaviour for fault-injection harnesses.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoomFaults {
    /// Stop sending anything from this round on.
    pub silent_from: Option<u8>,
    /// Send a different (validly signed) broadcast payload to the lowest-indexed peer in this round.
    pub equivocate_round: Option<u8>,
}

#[derive(Clone, Debug, Default)]
pub struct SessionStats {
    pub samples: Vec<PerfSample>,
    /// Number of communication rounds used, excluding the join barrier.
    pub rounds: u8,
    pub wall_ns: u64,
}

impl SessionStats {
    pub fn compute_ns(&self) -> u64 {
        self.samples.iter().map(|s| s.compute_ns).sum()
    }

    pub fn io_wait_ns(&self) -> u64 {
        self.samples.iter().map(|s| s.io_wait_ns).sum()
    }
}

struct Timer {
    start_wall: Instant,
    last_wall: Instant,
    last_cpu: Duration,
}

impl Timer {
    fn start() -> Self {
        let (w, c) = (Instant::now(), thread_cpu_time());
        Timer {
            start_wall: w,
            last_wall: w,
            last_cpu: c,
        }
    }

    /// `(compute, io)` since the previous lap. Compute is thread CPU time; io is the rest of the wall time.
    fn lap(&mut self) -> (u64, u64) {
        let (w, c) = (Instant::now(), thread_cpu_time());
        let wall = (w - self.last_wall).as_nanos() as u64;
        let cpu = (c.saturating_sub(self.last_cpu)).as_nanos() as u64;
        let cpu = cpu.min(wall);
        self.last_wall = w;
        self.last_cpu = c;
        (cpu, wall - cpu)
    }
}

/// One party's view of one protocol iteration.
pub struct Room {
    shared: Arc<EndpointShared>,
    id: RoomId,
    phase: Phase,
    participants: Vec<PartyIndex>,
    rx: Receiver<Envelope>,
    stash: Vec<RoomMessage>,
    accepted: HashSet<(u8, PartyIndex, MessageKind)>,
    own_broadcasts: BTreeMap<u8, Vec<u8>>,
    rounds_used: BTreeSet<u8>,
    faults: RoomFaults,
    timer: Timer,
    samples: Vec<PerfSample>,
    closed: bool,
}

impl Room {
    pub(super) fn open(
        shared: Arc<EndpointShared>,
        id: RoomId,
        participants: &[PartyIndex],
        phase: Phase,
    ) -> Result<Room, TransportError> {
        let me = shared.auth.identity().index();
        let mut parts: Vec<PartyIndex> = participants.to_vec();
        parts.sort_unstable();
        parts.dedup();
        if !parts.contains(&me) {
            return Err(TransportError::UnknownRecipient(me));
        }
        if let Some(&p) = parts.iter().find(|&&p| !shared.auth.directory().contains(p)) {
            return Err(TransportError::UnknownRecipient(p));
        }
        let rx = shared.mailboxes.receiver(id);
        let mut room = Room {
            shared,
            id,
            phase,
            participants: parts,
            rx,
            stash: Vec::new(),
            accepted: HashSet::new(),
            own_broadcasts: BTreeMap::new(),
            rounds_used: BTreeSet::new(),
            faults: RoomFaults::default(),
            timer: Timer::start(),
            samples: Vec::new(),
            closed: false,
        };
        room.join()?;
        room.timer = Timer::start();
        Ok(room)
    }

    fn join(&mut self) -> Result<(), TransportError> {
        for &peer in self.peers().collect::<Vec<_>>().iter() {
            let msg = self.signed(0, MessageKind::Join, BROADCAST, Vec::new());
            self.shared.link.deliver(peer, msg)?;
        }
        let deadline = Instant::now() + self.shared.config.join_timeout;
        let mut joined: BTreeSet<PartyIndex> = BTreeSet::new();
        let expected: BTreeSet<PartyIndex> = self.peers().collect();
        while joined != expected {
            let env = match self.next_envelope(deadline) {
                Some(env) => env,
                None => {
                    return Err(TransportError::JoinTimeout {
                        room: self.id,
                        absent: expected.difference(&joined).copied().collect(),
                    })
                }
            };
            let msg = env.msg;
            if msg.kind == MessageKind::Join {
                if self.verify_signed(&msg) {
                    joined.insert(msg.sender);
                }
            } else {
                self.stash.push(msg);
            }
        }
        Ok(())
    }

    pub fn id(&self) -> RoomId {
        self.id
    }

    pub fn me(&self) -> PartyIndex {
        self.shared.auth.identity().index()
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn participants(&self) -> &[PartyIndex] {
        &self.participants
    }

    pub fn peers(&self) -> impl Iterator<Item = PartyIndex> + '_ {
        let me = self.me();
        self.participants.iter().copied().filter(move |&p| p != me)
    }

    /// Relabels subsequent timing samples, for sessions spanning several phases.
    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
    }

    pub fn set_faults(&mut self, faults: RoomFaults) {
        self.faults = faults;
    }

    pub fn round_timeout(&self) -> Duration {
        self.shared.config.round_timeout
    }

    fn is_silent(&self, round: u8) -> bool {
        matches!(self.faults.silent_from, Some(r) if round >= r)
    }

    fn signed(&self, round: u8, kind: MessageKind, recipient: PartyIndex, payload: Vec<u8>) -> RoomMessage {
        let mut msg = RoomMessage {
            room_id: self.id,
            round,
            sender: self.me(),
            kind,
            recipient,
            payload,
            auth_tag: Vec::new(),
        };
        msg.auth_tag = self.shared.auth.identity().sign(&msg.signed_bytes());
        msg
    }

    fn deliver(&self, to: PartyIndex, msg: RoomMessage) -> Result<(), TransportError> {
        self.shared.link.deliver(to, msg)
    }

    /// Sends the same authenticated payload to every other participant.
    pub fn broadcast(&mut self, round: u8, payload: &[u8]) -> Result<(), TransportError> {
        self.rounds_used.insert(round);
        self.own_broadcasts.insert(round, payload.to_vec());
        if self.is_silent(round) {
            return Ok(());
        }
        let peers: Vec<PartyIndex> = self.peers().collect();
        let canonical = self.signed(round, MessageKind::Broadcast, BROADCAST, payload.to_vec());
        for (i, &peer) in peers.iter().enumerate() {
            let msg = if i == 0 && self.faults.equivocate_round == Some(round) {
                let mut altered = payload.to_vec();
                match altered.last_mut() {
                    Some(b) => *b ^= 0x01,
                    None => altered.push(0x01),
                }
                self.signed(round, MessageKind::Broadcast, BROADCAST, altered)
            } else {
                canonical.clone()
            };
            self.deliver(peer, msg)?;
        }
        Ok(())
    }

    /// Sends a payload sealed to `to`.
    pub fn send(&mut self, round: u8, to: PartyIndex, payload: &[u8]) -> Result<(), TransportError> {
        if to == self.me() || !self.participants.contains(&to) {
            return Err(TransportError::UnknownRecipient(to));
        }
        self.rounds_used.insert(round);
        if self.is_silent(round) {
            return Ok(());
        }
        let sealer = self
            .shared
            .auth
            .sealer(to)
            .ok_or(TransportError::UnknownRecipient(to))?;
        let mut msg = RoomMessage {
            room_id: self.id,
            round,
            sender: self.me(),
            kind: MessageKind::Unicast,
            recipient: to,
            payload: Vec::new(),
            auth_tag: Vec::new(),
        };
        let (body, tag) = sealer.seal(&msg.header(), payload, &mut OsRng);
        msg.payload = body;
        msg.auth_tag = tag;
        self.deliver(to, msg)
    }

    /// Announces an abort to every peer. Best effort: delivery failures are ignored.
    pub fn abort(&mut self, round: u8, body: &[u8]) {
        if self.is_silent(round) {
            return;
        }
        let msg = self.signed(round, MessageKind::Abort, BROADCAST, body.to_vec());
        for peer in self.peers().collect::<Vec<_>>() {
            let _ = self.deliver(peer, msg.clone());
        }
    }

    fn verify_signed(&self, msg: &RoomMessage) -> bool {
        match self.shared.auth.directory().get(msg.sender) {
            Some(peer) => peer.verify(&msg.signed_bytes(), &msg.auth_tag),
            None => false,
        }
    }

    fn next_envelope(&mut self, deadline: Instant) -> Option<Envelope> {
        let now = Instant::now();
        if now >= deadline {
            return self.rx.try_recv().ok().filter(|e| e.deliver_at.is_none_or(|t| t <= now));
        }
        match self.rx.recv_timeout(deadline - now) {
            Ok(env) => {
                if let Some(at) = env.deliver_at {
                    let now = Instant::now();
                    if at > now {
                        if at > deadline {
                            std::thread::sleep(deadline.saturating_duration_since(now));
                            return None;
                        }
                        std::thread::sleep(at - now);
                    }
                }
                Some(env)
            }
            Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => None,
        }
    }

    /// Blocks until every expected message of `round` has arrived, or the round
    /// timer expires. Invalid, duplicate and stale messages are discarded.
    pub fn receive_round(&mut self, round: u8, expect: Expect) -> Result<Inbox, TransportError> {
        self.rounds_used.insert(round);
        let me = self.me();
        let peers: BTreeSet<PartyIndex> = self.peers().collect();
        let mut inbox = Inbox::default();
        if expect.broadcast {
            if let Some(own) = self.own_broadcasts.get(&round) {
                inbox.broadcasts.insert(me, own.clone());
            }
        }
        let complete = |inbox: &Inbox| {
            (!expect.broadcast || peers.iter().all(|p| inbox.broadcasts.contains_key(p)))
                && (!expect.unicast || peers.iter().all(|p| inbox.unicasts.contains_key(p)))
        };

        let stashed = std::mem::take(&mut self.stash);
        let mut pending: std::collections::VecDeque<RoomMessage> = stashed.into();
        let deadline = Instant::now() + self.shared.config.round_timeout;
        loop {
            while let Some(msg) = pending.pop_front() {
                self.accept(msg, round, &mut inbox)?;
            }
            if complete(&inbox) {
                break;
            }
            match self.next_envelope(deadline) {
                Some(env) => pending.push_back(env.msg),
                None => {
                    let mut missing: BTreeSet<PartyIndex> = BTreeSet::new();
                    for p in &peers {
                        if (expect.broadcast && !inbox.broadcasts.contains_key(p))
                            || (expect.unicast && !inbox.unicasts.contains_key(p))
                        {
                            missing.insert(*p);
                        }
                    }
                    return Err(TransportError::RoundTimeout {
                        room: self.id,
                        round,
                        missing: missing.into_iter().collect(),
                    });
                }
            }
        }
        let (compute_ns, io_wait_ns) = self.timer.lap();
        self.samples.push(PerfSample {
            room_id: self.id,
            phase: self.phase,
            stage: Stage::Round(round),
            compute_ns,
            io_wait_ns,
        });
        Ok(inbox)
    }

    fn accept(&mut self, msg: RoomMessage, round: u8, inbox: &mut Inbox) -> Result<(), TransportError> {
        if msg.room_id != self.id || !self.participants.contains(&msg.sender) || msg.sender == self.me() {
            return Ok(());
        }
        if msg.kind == MessageKind::Abort {
            if self.verify_signed(&msg) {
                return Err(TransportError::PeerAborted {
                    room: self.id,
                    round: msg.round,
                    reporter: msg.sender,
                    body: msg.payload,
                });
            }
            return Ok(());
        }
        if msg.kind == MessageKind::Join || msg.round < round {
            return Ok(());
        }
        if msg.round > round {
            self.stash.push(msg);
            return Ok(());
        }
        let key = (msg.round, msg.sender, msg.kind);
        if self.accepted.contains(&key) {
            return Ok(());
        }
        match msg.kind {
            MessageKind::Broadcast => {
                if msg.recipient != BROADCAST || !self.verify_signed(&msg) {
                    log::debug!("rejected broadcast from {} in {:?}", msg.sender, self.id);
                    return Ok(());
                }
                self.accepted.insert(key);
                inbox.broadcasts.insert(msg.sender, msg.payload);
            }
            MessageKind::Unicast => {
                if msg.recipient != self.me() {
                    return Ok(());
                }
                let opened = self
                    .shared
                    .auth
                    .sealer(msg.sender)
                    .and_then(|s| s.open(&msg.header(), &msg.payload, &msg.auth_tag));
                match opened {
                    Some(plain) => {
                        self.accepted.insert(key);
                        inbox.unicasts.insert(msg.sender, plain);
                    }
                    None => log::debug!("rejected unicast from {} in {:?}", msg.sender, self.id),
                }
            }
            MessageKind::Join | MessageKind::Abort => {}
        }
        Ok(())
    }

    /// Ends the session, recording the local output step.
    pub fn finish(mut self) -> SessionStats {
        let (compute_ns, io_wait_ns) = self.timer.lap();
        self.samples.push(PerfSample {
            room_id: self.id,
            phase: self.phase,
            stage: Stage::Output,
            compute_ns,
            io_wait_ns,
        });
        let wall_ns = (self.timer.last_wall - self.timer.start_wall).as_nanos() as u64;
        self.close();
        SessionStats {
            samples: std::mem::take(&mut self.samples),
            rounds: self.rounds_used.iter().filter(|&&r| r > 0).count() as u8,
            wall_ns,
        }
    }

    fn close(&mut self) {
        if !self.closed {
            self.closed = true;
            self.shared.mailboxes.close(self.id);
        }
    }
}

impl Drop for Room {
    fn drop(&mut self) {
        self.close();
    }
}
