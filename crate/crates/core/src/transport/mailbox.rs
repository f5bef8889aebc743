use std::collections::{HashMap, HashSet};
use std::time::Instant;

use crossbeam_channel::{unbounded, Receiver, Sender};
use parking_lot::Mutex;

use super::{RoomId, RoomMessage};

/// A message plus the earliest instant it may be observed (delay injection).
#[derive(Debug, Clone)]
pub struct Envelope {
    pub msg: RoomMessage,
    pub deliver_at: Option<Instant>,
}

/// Inbound per-room queues of one node. Messages may arrive before the local
/// party joins the room; they are buffered until it does.
#[derive(Default)]
pub struct Mailboxes {
    state: Mutex<State>,
}

#[derive(Default)]
struct State {
    rooms: HashMap<RoomId, (Sender<Envelope>, Receiver<Envelope>)>,
    closed: HashSet<RoomId>,
}

impl Mailboxes {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, env: Envelope) {
        let mut st = self.state.lock();
        if st.closed.contains(&env.msg.room_id) {
            return;
        }
        let (tx, _) = st.rooms.entry(env.msg.room_id).or_insert_with(unbounded);
        let _ = tx.send(env);
    }

    pub(crate) fn receiver(&self, room: RoomId) -> Receiver<Envelope> {
        let mut st = self.state.lock();
        st.closed.remove(&room);
        st.rooms.entry(room).or_insert_with(unbounded).1.clone()
    }

    /// Drops the room queue; later messages for it are discarded.
    pub(crate) fn close(&self, room: RoomId) {
        let mut st = self.state.lock();
        st.rooms.remove(&room);
        st.closed.insert(room);
    }

    pub fn open_rooms(&self) -> usize {
        self.state.lock().rooms.len()
    }
}
