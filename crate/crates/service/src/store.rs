//! Per-node durable key store and presignature pool over an [`AppendLog`].

use std::collections::HashMap;
use std::io;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use kmn_core::encoding::{DecodeError, Reader, Writer};
use kmn_core::transport::RoomId;
use kmn_core::{KeyShareRecord, PresignatureRecord};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::log::AppendLog;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum KeyState {
    Available = 0,
    Allocated = 1,
    Retired = 2,
}

impl KeyState {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => KeyState::Available,
            1 => KeyState::Allocated,
            2 => KeyState::Retired,
            _ => return None,
        })
    }

    /// Only `available → allocated → retired`.
    pub fn can_become(self, next: KeyState) -> bool {
        matches!(
            (self, next),
            (KeyState::Available, KeyState::Allocated) | (KeyState::Allocated, KeyState::Retired)
        )
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("key {0} already stored")]
    Duplicate(Uuid),
    #[error("unknown key {0}")]
    UnknownKey(Uuid),
    #[error("key {uuid} cannot move from {from:?} to {to:?}")]
    Transition { uuid: Uuid, from: KeyState, to: KeyState },
    #[error("no ready presignature {0}")]
    UnknownPresignature(RoomId),
    #[error("persistence: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt log record: {0}")]
    Corrupt(#[from] DecodeError),
}

/// A stored key share; retired entries keep only their metadata.
#[derive(Debug, Clone)]
pub struct KeyStoreEntry {
    pub key_uuid: Uuid,
    pub record: Option<KeyShareRecord>,
    pub state: KeyState,
    pub created_at: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PresigState {
    Ready,
    Consumed,
}

#[derive(Debug, Clone)]
pub struct PresigPoolEntry {
    pub key_uuid: Uuid,
    pub record: PresignatureRecord,
    pub state: PresigState,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreCounts {
    pub available: usize,
    pub allocated: usize,
    pub retired: usize,
    pub ready_presigs: usize,
}

const PUT_KEY: u8 = 1;
const SET_STATE: u8 = 2;
const PUT_PRESIG: u8 = 3;
const CONSUME_PRESIG: u8 = 4;
const RETIRED_STUB: u8 = 5;

#[derive(Default)]
struct State {
    keys: HashMap<Uuid, KeyStoreEntry>,
    presigs: HashMap<RoomId, PresigPoolEntry>,
    appended: usize,
    /// Log length right after the last compaction.
    base: usize,
}

impl State {
    fn apply(&mut self, body: &[u8]) -> Result<(), DecodeError> {
        let mut r = Reader::new(body);
        match r.u8()? {
            PUT_KEY => {
                let state = KeyState::from_u8(r.u8()?).ok_or(DecodeError::Invalid("key state"))?;
                let created_at = r.u64()?;
                let record = KeyShareRecord::decode(r.bytes()?)?;
                r.finish()?;
                self.keys.insert(
                    record.key_uuid,
                    KeyStoreEntry {
                        key_uuid: record.key_uuid,
                        record: Some(record),
                        state,
                        created_at,
                    },
                );
            }
            SET_STATE => {
                let uuid = r.uuid()?;
                let state = KeyState::from_u8(r.u8()?).ok_or(DecodeError::Invalid("key state"))?;
                r.finish()?;
                self.set_state(uuid, state);
            }
            PUT_PRESIG => {
                let record = PresignatureRecord::decode(r.bytes()?)?;
                r.finish()?;
                self.presigs.insert(
                    record.presig_id(),
                    PresigPoolEntry {
                        key_uuid: record.public.key_uuid,
                        record,
                        state: PresigState::Ready,
                    },
                );
            }
            CONSUME_PRESIG => {
                let id = RoomId(r.array()?);
                r.finish()?;
                if let Some(e) = self.presigs.get_mut(&id) {
                    e.state = PresigState::Consumed;
                }
            }
            RETIRED_STUB => {
                let key_uuid = r.uuid()?;
                let created_at = r.u64()?;
                r.finish()?;
                self.keys.insert(
                    key_uuid,
                    KeyStoreEntry {
                        key_uuid,
                        record: None,
                        state: KeyState::Retired,
                        created_at,
                    },
                );
            }
            _ => return Err(DecodeError::Invalid("log tag")),
        }
        Ok(())
    }

    fn set_state(&mut self, uuid: Uuid, state: KeyState) {
        if let Some(e) = self.keys.get_mut(&uuid) {
            e.state = state;
            if state == KeyState::Retired {
                e.record = None;
                self.presigs.retain(|_, p| p.key_uuid != uuid);
            }
        }
    }
}

fn put_key(entry: &KeyStoreEntry, record: &KeyShareRecord) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(PUT_KEY).u8(entry.state as u8).u64(entry.created_at).bytes(&record.encode());
    w.finish()
}

fn set_state(uuid: &Uuid, state: KeyState) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(SET_STATE).uuid(uuid).u8(state as u8);
    w.finish()
}

fn put_presig(record: &PresignatureRecord) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(PUT_PRESIG).bytes(&record.encode());
    w.finish()
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// One node's shares and presignatures. Every mutation is logged before
/// it becomes visible; the log is compacted after `compact_every` appends.
pub struct NodeStore {
    log: AppendLog,
    state: Mutex<State>,
    compact_every: usize,
}

impl NodeStore {
    pub fn in_memory() -> Self {
        NodeStore {
            log: AppendLog::in_memory(),
            state: Mutex::new(State::default()),
            compact_every: 4096,
        }
    }

    /// Opens the store at `path`, replaying its log.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let (log, records) = AppendLog::open(path)?;
        let mut state = State::default();
        for r in &records {
            state.apply(r)?;
        }
        state.appended = records.len();
        state.base = records.len();
        Ok(NodeStore {
            log,
            state: Mutex::new(state),
            compact_every: 4096,
        })
    }

    pub fn with_compaction_interval(mut self, appends: usize) -> Self {
        self.compact_every = appends.max(1);
        self
    }

    fn append(&self, state: &mut State, body: &[u8]) -> Result<(), StoreError> {
        self.log.append(body)?;
        state.apply(body)?;
        state.appended += 1;
        if state.appended >= state.base + self.compact_every {
            self.compact_locked(state)?;
        }
        Ok(())
    }

    pub fn insert_key(&self, record: KeyShareRecord, state: KeyState) -> Result<(), StoreError> {
        let mut s = self.state.lock();
        if s.keys.contains_key(&record.key_uuid) {
            return Err(StoreError::Duplicate(record.key_uuid));
        }
        let entry = KeyStoreEntry {
            key_uuid: record.key_uuid,
            record: None,
            state,
            created_at: now_ms(),
        };
        let body = put_key(&entry, &record);
        self.append(&mut s, &body)
    }

    pub fn transition(&self, uuid: Uuid, to: KeyState) -> Result<(), StoreError> {
        let mut s = self.state.lock();
        let from = s.keys.get(&uuid).ok_or(StoreError::UnknownKey(uuid))?.state;
        if !from.can_become(to) {
            return Err(StoreError::Transition { uuid, from, to });
        }
        self.append(&mut s, &set_state(&uuid, to))
    }

    /// Retires an allocated key and hands back its share record; the store
    /// forgets the share and any presignatures for it.
    pub fn retire(&self, uuid: Uuid) -> Result<KeyShareRecord, StoreError> {
        let mut s = self.state.lock();
        let entry = s.keys.get(&uuid).ok_or(StoreError::UnknownKey(uuid))?;
        if !entry.state.can_become(KeyState::Retired) {
            return Err(StoreError::Transition {
                uuid,
                from: entry.state,
                to: KeyState::Retired,
            });
        }
        let record = entry.record.clone().ok_or(StoreError::UnknownKey(uuid))?;
        self.append(&mut s, &set_state(&uuid, KeyState::Retired))?;
        Ok(record)
    }

    pub fn key(&self, uuid: Uuid) -> Option<KeyStoreEntry> {
        self.state.lock().keys.get(&uuid).cloned()
    }

    /// A usable share: present and not retired.
    pub fn live_key(&self, uuid: Uuid) -> Result<KeyShareRecord, StoreError> {
        let s = self.state.lock();
        let e = s.keys.get(&uuid).ok_or(StoreError::UnknownKey(uuid))?;
        e.record.clone().ok_or(StoreError::Transition {
            uuid,
            from: e.state,
            to: e.state,
        })
    }

    pub fn insert_presig(&self, record: PresignatureRecord) -> Result<(), StoreError> {
        let mut s = self.state.lock();
        let uuid = record.public.key_uuid;
        match s.keys.get(&uuid) {
            Some(e) if e.state != KeyState::Retired => {}
            Some(e) => {
                return Err(StoreError::Transition {
                    uuid,
                    from: e.state,
                    to: e.state,
                })
            }
            None => return Err(StoreError::UnknownKey(uuid)),
        }
        self.append(&mut s, &put_presig(&record))
    }

    /// Atomically marks a ready presignature consumed and returns it for the
    /// online round. The consumption is durable before the call returns.
    pub fn take_presig(&self, id: RoomId) -> Result<PresignatureRecord, StoreError> {
        let mut s = self.state.lock();
        let record = match s.presigs.get(&id) {
            Some(e) if e.state == PresigState::Ready => e.record.clone(),
            _ => return Err(StoreError::UnknownPresignature(id)),
        };
        let mut w = Writer::new();
        w.u8(CONSUME_PRESIG).raw(&id.0);
        self.append(&mut s, &w.finish())?;
        Ok(record)
    }

    pub fn presig(&self, id: RoomId) -> Option<PresigPoolEntry> {
        self.state.lock().presigs.get(&id).cloned()
    }

    pub fn ready_presigs(&self, uuid: Uuid) -> usize {
        self.state
            .lock()
            .presigs
            .values()
            .filter(|p| p.key_uuid == uuid && p.state == PresigState::Ready)
            .count()
    }

    pub fn counts(&self) -> StoreCounts {
        let s = self.state.lock();
        let mut c = StoreCounts::default();
        for e in s.keys.values() {
            match e.state {
                KeyState::Available => c.available += 1,
                KeyState::Allocated => c.allocated += 1,
                KeyState::Retired => c.retired += 1,
            }
        }
        c.ready_presigs = s.presigs.values().filter(|p| p.state == PresigState::Ready).count();
        c
    }

    pub fn keys(&self) -> Vec<KeyStoreEntry> {
        self.state.lock().keys.values().cloned().collect()
    }

    /// Rewrites the log as the live state: consumed presignatures vanish and
    /// retired keys shrink to metadata.
    pub fn compact(&self) -> Result<(), StoreError> {
        let mut s = self.state.lock();
        self.compact_locked(&mut s)
    }

    fn compact_locked(&self, s: &mut State) -> Result<(), StoreError> {
        let mut records = Vec::with_capacity(s.keys.len() + s.presigs.len());
        for e in s.keys.values() {
            match &e.record {
                Some(r) => records.push(put_key(e, r)),
                None => {
                    let mut w = Writer::new();
                    w.u8(RETIRED_STUB).uuid(&e.key_uuid).u64(e.created_at);
                    records.push(w.finish());
                }
            }
        }
        s.presigs.retain(|_, p| p.state == PresigState::Ready);
        records.extend(s.presigs.values().map(|p| put_presig(&p.record)));
        self.log.compact(&records)?;
        s.appended = records.len();
        s.base = records.len();
        Ok(())
    }

    /// Raw persisted bytes, for audits of what reaches disk.
    pub fn persisted_bytes(&self) -> io::Result<Vec<u8>> {
        self.log.raw_bytes()
    }

    pub fn persisted_records(&self) -> io::Result<Vec<Vec<u8>>> {
        self.log.records()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use kmn_core::protocol::keyops::{import_key, record_from_share};
    use kmn_core::Scalar;
    use rand::rngs::OsRng;

    fn record(party: u16) -> KeyShareRecord {
        let split = import_key(Scalar::random_nonzero(&mut OsRng), 2, &[1, 2, 3], &mut OsRng).unwrap();
        record_from_share(split.share_for(party).unwrap(), &split.parties, &split.commitment).unwrap()
    }

    #[test]
    fn transitions_only_move_forward() {
        use KeyState::*;
        for (from, to, ok) in [
            (Available, Allocated, true),
            (Allocated, Retired, true),
            (Available, Retired, false),
            (Allocated, Available, false),
            (Retired, Allocated, false),
            (Retired, Available, false),
            (Allocated, Allocated, false),
        ] {
            assert_eq!(from.can_become(to), ok, "{from:?} -> {to:?}");
        }
    }

    #[test]
    fn uuid_is_unique_and_retire_forgets_the_share() {
        let store = NodeStore::in_memory();
        let r = record(1);
        let uuid = r.key_uuid;
        store.insert_key(r.clone(), KeyState::Available).unwrap();
        assert!(matches!(store.insert_key(r.clone(), KeyState::Available), Err(StoreError::Duplicate(_))));
        assert!(matches!(store.retire(uuid), Err(StoreError::Transition { .. })));
        store.transition(uuid, KeyState::Allocated).unwrap();
        assert_eq!(store.retire(uuid).unwrap(), r);
        assert!(store.live_key(uuid).is_err());
        assert!(store.retire(uuid).is_err());
        assert_eq!(store.counts().retired, 1);
    }

    #[test]
    fn replay_and_compaction_preserve_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("node-1.log");
        let (keep, gone) = (record(1), record(1));
        {
            let store = NodeStore::open(&path).unwrap();
            store.insert_key(keep.clone(), KeyState::Available).unwrap();
            store.insert_key(gone.clone(), KeyState::Allocated).unwrap();
            store.transition(keep.key_uuid, KeyState::Allocated).unwrap();
            store.retire(gone.key_uuid).unwrap();
        }
        let store = NodeStore::open(&path).unwrap();
        assert_eq!(store.live_key(keep.key_uuid).unwrap(), keep);
        assert_eq!(store.key(keep.key_uuid).unwrap().state, KeyState::Allocated);
        assert_eq!(store.key(gone.key_uuid).unwrap().state, KeyState::Retired);
        store.compact().unwrap();
        let before = store.counts();
        drop(store);
        let store = NodeStore::open(&path).unwrap();
        assert_eq!(store.counts(), before);
        let gone_share = gone.share.to_bytes();
        let bytes = store.persisted_bytes().unwrap();
        assert!(!bytes.windows(32).any(|w| w == gone_share));
    }

    #[test]
    fn compaction_interval_bounds_the_log() {
        let store = NodeStore::in_memory().with_compaction_interval(8);
        for _ in 0..10 {
            let r = record(2);
            let uuid = r.key_uuid;
            store.insert_key(r, KeyState::Allocated).unwrap();
            store.retire(uuid).unwrap();
        }
        // 20 appends; each compaction shrinks the log to one stub per retired key.
        assert!(store.persisted_records().unwrap().len() < 20);
        assert_eq!(store.counts().retired, 10);
    }
}
