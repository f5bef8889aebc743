//! The KMN coordinator: routes client requests to the nodes, keeps the key
//! registry and the pools, and performs split and reconstruction for import,
//! add and export. It persists registry metadata only.
//!
//! The coordinator is semi-trusted: during import, add and export it sees
//! full secrets in memory. Those buffers are zeroized after use.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use kmn_core::ec::{ecdsa_verify, Digest, EcdsaSignature, GroupPoint, Scalar};
use kmn_core::protocol::keyops::{export_key, import_key, split_increment};
use kmn_core::sharing::{check_params, ShamirShare};
use kmn_core::transport::{duration_ms, RoomId};
use kmn_core::PartyIndex;
use parking_lot::{Condvar, Mutex};
use rand::rngs::OsRng;
use serde::{Deserialize, Serialize};
use uuid::Uuid;
use zeroize::Zeroize;

use crate::api::{encode_reply, KmnReply, KmnRequest, SignPath};
use crate::error::{KmnError, RemoteErrorKind};
use crate::log::AppendLog;
use crate::node::{NodeRequest, NodeResponse};
use crate::store::KeyState;
use crate::wire::{Caller, Channel, Handler};

const PRESIG_WAIT: Duration = Duration::from_secs(10);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    /// Unallocated keys kept ready.
    pub keys: usize,
    /// Ready presignatures kept per allocated key.
    pub presigs_per_key: usize,
    /// Ready presignatures kept per unallocated key.
    pub pooled_key_presigs: usize,
    /// Queue one background presignature for every key produced by ADD.
    pub presign_on_add: bool,
    /// Run the background replenisher at all.
    pub replenish: bool,
    #[serde(with = "duration_ms")]
    pub max_backoff: Duration,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            keys: 32,
            presigs_per_key: 8,
            pooled_key_presigs: 1,
            presign_on_add: true,
            replenish: true,
            max_backoff: Duration::from_secs(2),
        }
    }
}

impl PoolConfig {
    /// No pooling at all: every request runs its sessions in the foreground.
    pub fn disabled() -> Self {
        PoolConfig {
            keys: 0,
            presigs_per_key: 0,
            pooled_key_presigs: 0,
            presign_on_add: false,
            replenish: false,
            ..PoolConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoordinatorConfig {
    pub threshold: u16,
    pub parties: Vec<PartyIndex>,
    #[serde(default)]
    pub pool: PoolConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoordinatorStats {
    pub dkg_sessions: u64,
    pub presign_sessions: u64,
    pub online_signs: u64,
    pub interactive_signs: u64,
    pub pool_hits: u64,
    pub pool_misses: u64,
    pub replenish_failures: u64,
}

#[derive(Default)]
struct Counters {
    dkg_sessions: AtomicU64,
    presign_sessions: AtomicU64,
    online_signs: AtomicU64,
    interactive_signs: AtomicU64,
    pool_hits: AtomicU64,
    pool_misses: AtomicU64,
    replenish_failures: AtomicU64,
}

fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PresigMeta {
    id: RoomId,
    signers: Vec<PartyIndex>,
}

#[derive(Clone, Debug)]
struct KeyMeta {
    public_key: GroupPoint,
    state: KeyState,
    owner: Option<Caller>,
    ready: VecDeque<PresigMeta>,
    /// Presign sessions started but not yet finished.
    pending: usize,
}

#[derive(Default)]
struct Registry {
    keys: HashMap<Uuid, KeyMeta>,
    pool: VecDeque<Uuid>,
    pending_keys: usize,
}

/// Registry events as persisted; none of them carries secret material.
#[derive(Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Key {
        key: Uuid,
        public_key: GroupPoint,
        state: KeyState,
        owner: Option<u16>,
    },
    State {
        key: Uuid,
        state: KeyState,
        owner: Option<u16>,
    },
    Presig {
        key: Uuid,
        presig: PresigMeta,
    },
    PresigUsed {
        key: Uuid,
        id: RoomId,
    },
}

impl Registry {
    fn apply(&mut self, event: Event) {
        match event {
            Event::Key {
                key,
                public_key,
                state,
                owner,
            } => {
                self.keys.insert(
                    key,
                    KeyMeta {
                        public_key,
                        state,
                        owner: owner.map(Caller),
                        ready: VecDeque::new(),
                        pending: 0,
                    },
                );
                if state == KeyState::Available {
                    self.pool.push_back(key);
                }
            }
            Event::State { key, state, owner } => {
                if let Some(m) = self.keys.get_mut(&key) {
                    m.state = state;
                    m.owner = owner.map(Caller);
                    if state == KeyState::Retired {
                        m.ready.clear();
                    }
                }
                if state != KeyState::Available {
                    self.pool.retain(|k| *k != key);
                }
            }
            Event::Presig { key, presig } => {
                if let Some(m) = self.keys.get_mut(&key) {
                    if m.state != KeyState::Retired {
                        m.ready.push_back(presig);
                    }
                }
            }
            Event::PresigUsed { key, id } => {
                if let Some(m) = self.keys.get_mut(&key) {
                    m.ready.retain(|p| p.id != id);
                }
            }
        }
    }
}

enum Task {
    Keygen,
    Presign(Uuid),
}

struct Inner {
    config: CoordinatorConfig,
    nodes: BTreeMap<PartyIndex, Arc<dyn Channel>>,
    registry: Mutex<Registry>,
    log: AppendLog,
    counters: Counters,
    in_flight: AtomicUsize,
    rotation: AtomicUsize,
    add_queue: Mutex<VecDeque<Uuid>>,
    wake: Condvar,
    wake_lock: Mutex<()>,
    shutdown: AtomicBool,
}

/// Holds the in-flight count while a foreground request runs.
struct Foreground<'a>(&'a AtomicUsize);

impl<'a> Foreground<'a> {
    fn enter(c: &'a AtomicUsize) -> Self {
        c.fetch_add(1, Ordering::SeqCst);
        Foreground(c)
    }
}

impl Drop for Foreground<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

pub struct Coordinator {
    inner: Arc<Inner>,
    worker: Mutex<Option<JoinHandle<()>>>,
}

impl Coordinator {
    /// Starts a coordinator with an in-memory registry log.
    pub fn new(config: CoordinatorConfig, nodes: BTreeMap<PartyIndex, Arc<dyn Channel>>) -> Result<Self, KmnError> {
        Self::build(config, nodes, AppendLog::in_memory(), Registry::default())
    }

    /// Starts a coordinator whose registry is persisted at `path`.
    pub fn open(
        config: CoordinatorConfig,
        nodes: BTreeMap<PartyIndex, Arc<dyn Channel>>,
        path: impl AsRef<Path>,
    ) -> Result<Self, KmnError> {
        let (log, records) = AppendLog::open(path).map_err(|e| KmnError::Service(e.to_string()))?;
        let mut registry = Registry::default();
        for r in records {
            let event: Event = serde_json::from_slice(&r).map_err(|e| KmnError::Service(e.to_string()))?;
            registry.apply(event);
        }
        Self::build(config, nodes, log, registry)
    }

    fn build(
        config: CoordinatorConfig,
        nodes: BTreeMap<PartyIndex, Arc<dyn Channel>>,
        log: AppendLog,
        registry: Registry,
    ) -> Result<Self, KmnError> {
        check_params(config.threshold, config.parties.len() as u16).map_err(|e| KmnError::BadRequest(e.to_string()))?;
        if let Some(p) = config.parties.iter().find(|p| !nodes.contains_key(p)) {
            return Err(KmnError::BadRequest(format!("no channel for node {p}")));
        }
        let inner = Arc::new(Inner {
            config,
            nodes,
            registry: Mutex::new(registry),
            log,
            counters: Counters::default(),
            in_flight: AtomicUsize::new(0),
            rotation: AtomicUsize::new(0),
            add_queue: Mutex::new(VecDeque::new()),
            wake: Condvar::new(),
            wake_lock: Mutex::new(()),
            shutdown: AtomicBool::new(false),
        });
        let worker = if inner.config.pool.replenish || inner.config.pool.presign_on_add {
            let inner = inner.clone();
            Some(
                std::thread::Builder::new()
                    .name("kmn-replenish".into())
                    .spawn(move || inner.replenish_loop())
                    .map_err(|e| KmnError::Service(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Coordinator {
            inner,
            worker: Mutex::new(worker),
        })
    }

    pub fn config(&self) -> &CoordinatorConfig {
        &self.inner.config
    }

    pub fn stats(&self) -> CoordinatorStats {
        let c = &self.inner.counters;
        let get = |a: &AtomicU64| a.load(Ordering::Relaxed);
        CoordinatorStats {
            dkg_sessions: get(&c.dkg_sessions),
            presign_sessions: get(&c.presign_sessions),
            online_signs: get(&c.online_signs),
            interactive_signs: get(&c.interactive_signs),
            pool_hits: get(&c.pool_hits),
            pool_misses: get(&c.pool_misses),
            replenish_failures: get(&c.replenish_failures),
        }
    }

    /// Unallocated keys ready in the pool.
    pub fn pooled_keys(&self) -> usize {
        self.inner.registry.lock().pool.len()
    }

    pub fn pooled_key_ids(&self) -> Vec<Uuid> {
        self.inner.registry.lock().pool.iter().copied().collect()
    }

    /// Ready presignatures for `key`.
    pub fn ready_presigs(&self, key: Uuid) -> usize {
        self.inner.registry.lock().keys.get(&key).map_or(0, |m| m.ready.len())
    }

    pub fn key_state(&self, key: Uuid) -> Option<KeyState> {
        self.inner.registry.lock().keys.get(&key).map(|m| m.state)
    }

    /// Largest ready-presignature count over all keys.
    pub fn max_ready_presigs(&self) -> usize {
        self.inner.registry.lock().keys.values().map(|m| m.ready.len()).max().unwrap_or(0)
    }

    /// Raw persisted registry bytes, for audits of what reaches disk.
    pub fn persisted_bytes(&self) -> io::Result<Vec<u8>> {
        self.inner.log.raw_bytes()
    }

    pub fn generate_key(&self, caller: Caller) -> Result<(Uuid, GroupPoint), KmnError> {
        let _fg = Foreground::enter(&self.inner.in_flight);
        self.inner.generate_key(caller)
    }

    pub fn sign(&self, caller: Caller, key: Uuid, digest: &Digest) -> Result<(EcdsaSignature, SignPath), KmnError> {
        let _fg = Foreground::enter(&self.inner.in_flight);
        self.inner.sign(caller, key, digest)
    }

    pub fn export(&self, caller: Caller, key: Uuid) -> Result<Scalar, KmnError> {
        let _fg = Foreground::enter(&self.inner.in_flight);
        self.inner.export(caller, key)
    }

    pub fn import(&self, caller: Caller, secret: Scalar) -> Result<(Uuid, GroupPoint), KmnError> {
        let _fg = Foreground::enter(&self.inner.in_flight);
        self.inner.import(caller, secret)
    }

    pub fn add(&self, caller: Caller, key: Uuid, increment: Scalar) -> Result<(Uuid, GroupPoint), KmnError> {
        let _fg = Foreground::enter(&self.inner.in_flight);
        self.inner.add(caller, key, increment)
    }

    pub fn shutdown(&self) {
        self.inner.shutdown.store(true, Ordering::SeqCst);
        self.inner.notify();
        if let Some(h) = self.worker.lock().take() {
            let _ = h.join();
        }
    }
}

impl Drop for Coordinator {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl Handler for Coordinator {
    fn handle(&self, caller: Caller, request: &[u8]) -> Vec<u8> {
        let req = match KmnRequest::decode(request) {
            Ok(r) => r,
            Err(e) => return encode_reply(&Err(KmnError::BadRequest(e.to_string()))),
        };
        let reply = match &req {
            KmnRequest::Gen => self
                .generate_key(caller)
                .map(|(key, public_key)| KmnReply::Key { key, public_key }),
            KmnRequest::Sign { key, digest } => self
                .sign(caller, *key, digest)
                .map(|(signature, path)| KmnReply::Signature { signature, path }),
            KmnRequest::Export { key } => self.export(caller, *key).map(KmnReply::Secret),
            KmnRequest::Import { secret } => self
                .import(caller, *secret)
                .map(|(key, public_key)| KmnReply::Key { key, public_key }),
            KmnRequest::Add { key, increment } => self
                .add(caller, *key, *increment)
                .map(|(key, public_key)| KmnReply::Key { key, public_key }),
        };
        encode_reply(&reply)
    }
}

impl Inner {
    fn notify(&self) {
        let _g = self.wake_lock.lock();
        self.wake.notify_all();
    }

    fn record(&self, registry: &mut Registry, event: Event) -> Result<(), KmnError> {
        let bytes = serde_json::to_vec(&event).expect("registry events serialize");
        self.log.append(&bytes).map_err(|e| KmnError::Service(format!("registry log: {e}")))?;
        registry.apply(event);
        Ok(())
    }

    /// `t` signers, rotating over the parties to spread load.
    fn choose_signers(&self) -> Vec<PartyIndex> {
        let parties = &self.config.parties;
        let start = self.rotation.fetch_add(1, Ordering::Relaxed);
        let mut s: Vec<PartyIndex> = (0..self.config.threshold as usize)
            .map(|i| parties[(start + i) % parties.len()])
            .collect();
        s.sort_unstable();
        s
    }

    /// Sends one request per target concurrently; each target runs its side
    /// on its own thread. Request and response buffers are zeroized.
    fn fanout(
        &self,
        targets: &[PartyIndex],
        make: impl Fn(PartyIndex) -> NodeRequest + Sync,
    ) -> BTreeMap<PartyIndex, Result<NodeResponse, KmnError>> {
        std::thread::scope(|s| {
            let handles: Vec<_> = targets
                .iter()
                .map(|&p| {
                    let make = &make;
                    let channel = self.nodes[&p].clone();
                    (
                        p,
                        s.spawn(move || {
                            let mut req = serde_json::to_vec(&make(p)).expect("node requests serialize");
                            let out = channel.call(&req);
                            req.zeroize();
                            let mut resp = out?;
                            let parsed = serde_json::from_slice::<NodeResponse>(&resp);
                            resp.zeroize();
                            match parsed {
                                Ok(NodeResponse::Failed { error }) => Err(KmnError::Node { party: p, error }),
                                Ok(r) => Ok(r),
                                Err(e) => Err(KmnError::Service(format!("node {p}: {e}"))),
                            }
                        }),
                    )
                })
                .collect();
            handles
                .into_iter()
                .map(|(p, h)| (p, h.join().unwrap_or_else(|_| Err(KmnError::Service(format!("node {p} panicked"))))))
                .collect()
        })
    }

    /// All responses mapped through `extract`, or one error summarizing the
    /// failures. Protocol aborts dominate and carry the union of culprits.
    fn gather<T>(
        results: BTreeMap<PartyIndex, Result<NodeResponse, KmnError>>,
        extract: impl Fn(NodeResponse) -> Option<T>,
    ) -> Result<BTreeMap<PartyIndex, T>, KmnError> {
        let mut ok = BTreeMap::new();
        let mut errors = Vec::new();
        for (p, r) in results {
            match r.map(&extract) {
                Ok(Some(v)) => {
                    ok.insert(p, v);
                }
                Ok(None) => errors.push(KmnError::Service(format!("node {p}: unexpected response"))),
                Err(e) => errors.push(e),
            }
        }
        if errors.is_empty() {
            return Ok(ok);
        }
        let aborts: Vec<&KmnError> = errors
            .iter()
            .filter(|e| matches!(e, KmnError::Node { error, .. } if error.kind == RemoteErrorKind::Protocol))
            .collect();
        if let Some(KmnError::Node { error, .. }) = aborts.first() {
            let mut culprits: Vec<PartyIndex> = aborts.iter().flat_map(|e| e.culprits().to_vec()).collect();
            culprits.sort_unstable();
            culprits.dedup();
            return Err(KmnError::Aborted {
                message: error.message.clone(),
                fault: error.fault,
                culprits,
            });
        }
        Err(errors.swap_remove(0))
    }

    fn agreed<T: PartialEq + Clone>(values: &BTreeMap<PartyIndex, T>, what: &str) -> Result<T, KmnError> {
        let mut it = values.values();
        let first = it.next().ok_or_else(|| KmnError::Service(format!("no {what} returned")))?;
        if it.any(|v| v != first) {
            return Err(KmnError::Service(format!("nodes disagree on {what}")));
        }
        Ok(first.clone())
    }

    fn run_keygen(&self, background: bool) -> Result<(Uuid, GroupPoint), KmnError> {
        let key_uuid = Uuid::new_v4();
        let room = RoomId::random(&mut OsRng);
        let parties = self.config.parties.clone();
        let threshold = self.config.threshold;
        let results = self.fanout(&parties, |_| NodeRequest::Keygen {
            room,
            key_uuid,
            parties: parties.clone(),
            threshold,
            background,
        });
        bump(&self.counters.dkg_sessions);
        let keys = Self::gather(results, |r| match r {
            NodeResponse::Key { public_key, .. } => Some(public_key),
            _ => None,
        })?;
        Ok((key_uuid, Self::agreed(&keys, "public key")?))
    }

    fn run_presign(&self, key: Uuid, background: bool) -> Result<PresigMeta, KmnError> {
        let signers = self.choose_signers();
        let room = RoomId::random(&mut OsRng);
        let results = self.fanout(&signers, |_| NodeRequest::Presign {
            room,
            key_uuid: key,
            signers: signers.clone(),
            background,
        });
        bump(&self.counters.presign_sessions);
        let ids = Self::gather(results, |r| match r {
            NodeResponse::Presigned { presig_id, big_r } => Some((presig_id, big_r)),
            _ => None,
        })?;
        let (id, _) = Self::agreed(&ids, "presignature")?;
        Ok(PresigMeta { id, signers })
    }

    fn allocate(&self, caller: Caller, key: Uuid) -> Result<(), KmnError> {
        let parties = self.config.parties.clone();
        Self::gather(self.fanout(&parties, |_| NodeRequest::Allocate { key_uuid: key }), |r| {
            matches!(r, NodeResponse::Done).then_some(())
        })?;
        let mut reg = self.registry.lock();
        self.record(
            &mut reg,
            Event::State {
                key,
                state: KeyState::Allocated,
                owner: Some(caller.0),
            },
        )
    }

    fn generate_key(&self, caller: Caller) -> Result<(Uuid, GroupPoint), KmnError> {
        let pooled = {
            let mut reg = self.registry.lock();
            let key = reg.pool.pop_front();
            key.map(|k| (k, reg.keys[&k].public_key))
        };
        self.notify();
        match pooled {
            Some((key, pk)) => {
                bump(&self.counters.pool_hits);
                self.allocate(caller, key)?;
                Ok((key, pk))
            }
            None => {
                bump(&self.counters.pool_misses);
                let (key, pk) = self.run_keygen(false)?;
                {
                    let mut reg = self.registry.lock();
                    self.record(
                        &mut reg,
                        Event::Key {
                            key,
                            public_key: pk,
                            state: KeyState::Available,
                            owner: None,
                        },
                    )?;
                    reg.pool.retain(|k| *k != key);
                }
                self.allocate(caller, key)?;
                Ok((key, pk))
            }
        }
    }

    /// Checks that `key` is allocated to `caller`.
    fn owned(reg: &Registry, caller: Caller, key: Uuid) -> Result<&KeyMeta, KmnError> {
        let meta = reg.keys.get(&key).ok_or(KmnError::NotFound(key))?;
        match meta.state {
            KeyState::Available => Err(KmnError::NotFound(key)),
            KeyState::Retired => Err(KmnError::InvalidState(key, KeyState::Retired)),
            KeyState::Allocated if meta.owner != Some(caller) => Err(KmnError::Unauthorized(key)),
            KeyState::Allocated => Ok(meta),
        }
    }

    /// Waits for a presignature of `key` that is queued or being computed,
    /// so a sign right after ADD still takes the online path.
    fn await_presig(&self, key: Uuid) {
        let deadline = std::time::Instant::now() + PRESIG_WAIT;
        loop {
            {
                let reg = self.registry.lock();
                let waiting = reg.keys.get(&key).is_some_and(|m| {
                    m.ready.is_empty() && (m.pending > 0 || self.add_queue.lock().contains(&key))
                });
                if !waiting {
                    return;
                }
            }
            if std::time::Instant::now() >= deadline {
                return;
            }
            std::thread::sleep(Duration::from_millis(2));
        }
    }

    fn sign(&self, caller: Caller, key: Uuid, digest: &Digest) -> Result<(EcdsaSignature, SignPath), KmnError> {
        self.await_presig(key);
        let (pk, presig) = {
            let mut reg = self.registry.lock();
            let pk = Self::owned(&reg, caller, key)?.public_key;
            let presig = reg.keys.get_mut(&key).and_then(|m| m.ready.pop_front());
            if let Some(p) = &presig {
                self.record(&mut reg, Event::PresigUsed { key, id: p.id })?;
            }
            (pk, presig)
        };
        let digest_bytes = digest.0;
        let online = presig.map(|p| {
            self.notify();
            let room = RoomId::random(&mut OsRng);
            let results = self.fanout(&p.signers, |_| NodeRequest::Sign {
                room,
                key_uuid: key,
                presig_id: p.id,
                digest: digest_bytes,
            });
            Self::gather(results, |r| r.signature())
        });
        let (sigs, path) = match online {
            Some(Ok(sigs)) => {
                bump(&self.counters.online_signs);
                (sigs, SignPath::Online)
            }
            // A presignature missing at a node falls back to the interactive path.
            Some(Err(KmnError::Node { error, .. })) if error.kind == RemoteErrorKind::NotFound => {
                self.sign_interactive(key, digest_bytes)?
            }
            Some(Err(e)) => return Err(e),
            None => self.sign_interactive(key, digest_bytes)?,
        };
        let sig: EcdsaSignature = Self::agreed(&sigs, "signature")?;
        if !ecdsa_verify(&pk, digest, &sig) {
            return Err(KmnError::Service("aggregated signature does not verify".into()));
        }
        Ok((sig, path))
    }

    fn sign_interactive(
        &self,
        key: Uuid,
        digest: [u8; 32],
    ) -> Result<(BTreeMap<PartyIndex, EcdsaSignature>, SignPath), KmnError> {
        let signers = self.choose_signers();
        let room = RoomId::random(&mut OsRng);
        let results = self.fanout(&signers, |_| NodeRequest::SignInteractive {
            room,
            key_uuid: key,
            signers: signers.clone(),
            digest,
        });
        let sigs = Self::gather(results, |r| r.signature())?;
        bump(&self.counters.interactive_signs);
        Ok((sigs, SignPath::Interactive))
    }

    /// Marks an owned key retired before touching the nodes, so concurrent
    /// export or add requests on the same key fail fast.
    fn retire(&self, caller: Caller, key: Uuid) -> Result<GroupPoint, KmnError> {
        let mut reg = self.registry.lock();
        let pk = Self::owned(&reg, caller, key)?.public_key;
        self.record(
            &mut reg,
            Event::State {
                key,
                state: KeyState::Retired,
                owner: Some(caller.0),
            },
        )?;
        Ok(pk)
    }

    fn export(&self, caller: Caller, key: Uuid) -> Result<Scalar, KmnError> {
        let pk = self.retire(caller, key)?;
        let parties = self.config.parties.clone();
        let results = self.fanout(&parties, |_| NodeRequest::ExportShare { key_uuid: key });
        let mut shares = Vec::new();
        let mut commitment = None;
        for r in results.into_values() {
            if let Ok(NodeResponse::Share { share, commitment: c }) = r {
                commitment.get_or_insert(c);
                shares.push(share);
            }
        }
        let Some(commitment) = commitment.filter(|_| shares.len() >= self.config.threshold as usize) else {
            shares.iter_mut().for_each(Zeroize::zeroize);
            return Err(KmnError::Service(format!("only {} shares of {key} returned", shares.len())));
        };
        if commitment.public_key() != pk {
            shares.iter_mut().for_each(Zeroize::zeroize);
            return Err(KmnError::Service("share commitment does not match the registered key".into()));
        }
        export_key(&mut shares, &commitment).map_err(|e| KmnError::Service(e.to_string()))
    }

    fn distribute(&self, split: &kmn_core::protocol::keyops::SplitKey, base: Option<Uuid>) -> Result<BTreeMap<PartyIndex, GroupPoint>, KmnError> {
        let parties = split.parties.clone();
        let share_for = |p: PartyIndex| -> ShamirShare { split.share_for(p).expect("share for every party").clone() };
        let results = self.fanout(&parties, |p| match base {
            None => NodeRequest::StoreShare {
                share: share_for(p),
                parties: parties.clone(),
                commitment: split.commitment.clone(),
            },
            Some(base) => NodeRequest::AddShare {
                base,
                share: share_for(p),
                commitment: split.commitment.clone(),
            },
        });
        Self::gather(results, |r| match r {
            NodeResponse::Done => Some(split.public_key()),
            NodeResponse::Key { public_key, .. } => Some(public_key),
            _ => None,
        })
    }

    fn import(&self, caller: Caller, mut secret: Scalar) -> Result<(Uuid, GroupPoint), KmnError> {
        let split = import_key(secret, self.config.threshold, &self.config.parties, &mut OsRng);
        secret.zeroize();
        let split = split.map_err(|e| KmnError::BadRequest(e.to_string()))?;
        let pk = Self::agreed(&self.distribute(&split, None)?, "public key")?;
        let mut reg = self.registry.lock();
        self.record(
            &mut reg,
            Event::Key {
                key: split.key_uuid,
                public_key: pk,
                state: KeyState::Allocated,
                owner: Some(caller.0),
            },
        )?;
        Ok((split.key_uuid, pk))
    }

    fn add(&self, caller: Caller, key: Uuid, mut increment: Scalar) -> Result<(Uuid, GroupPoint), KmnError> {
        let base_pk = {
            let reg = self.registry.lock();
            Self::owned(&reg, caller, key)?.public_key
        };
        let split = split_increment(increment, self.config.threshold, &self.config.parties, &mut OsRng);
        increment.zeroize();
        let split = split.map_err(|e| KmnError::BadRequest(e.to_string()))?;
        self.retire(caller, key)?;
        let pk = Self::agreed(&self.distribute(&split, Some(key))?, "combined key")?;
        if pk != base_pk + split.public_key() {
            return Err(KmnError::Service("combined key is not the sum of its parts".into()));
        }
        {
            let mut reg = self.registry.lock();
            self.record(
                &mut reg,
                Event::Key {
                    key: split.key_uuid,
                    public_key: pk,
                    state: KeyState::Allocated,
                    owner: Some(caller.0),
                },
            )?;
        }
        if self.config.pool.presign_on_add {
            self.add_queue.lock().push_back(split.key_uuid);
            self.notify();
        }
        Ok((split.key_uuid, pk))
    }

    fn next_task(&self) -> Option<Task> {
        let pool = &self.config.pool;
        let mut reg = self.registry.lock();
        if let Some(key) = self.add_queue.lock().pop_front() {
            if let Some(m) = reg.keys.get_mut(&key) {
                if m.state != KeyState::Retired && m.ready.len() + m.pending < pool.presigs_per_key.max(1) {
                    m.pending += 1;
                    return Some(Task::Presign(key));
                }
            }
        }
        if !pool.replenish || self.in_flight.load(Ordering::SeqCst) > 0 {
            return None;
        }
        if reg.pool.len() + reg.pending_keys < pool.keys {
            reg.pending_keys += 1;
            return Some(Task::Keygen);
        }
        let pooled: Vec<Uuid> = reg.pool.iter().copied().collect();
        for key in pooled {
            let m = reg.keys.get_mut(&key).expect("pooled keys are registered");
            if m.ready.len() + m.pending < pool.pooled_key_presigs {
                m.pending += 1;
                return Some(Task::Presign(key));
            }
        }
        for (key, m) in reg.keys.iter_mut() {
            if m.state == KeyState::Allocated && m.ready.len() + m.pending < pool.presigs_per_key {
                m.pending += 1;
                return Some(Task::Presign(*key));
            }
        }
        None
    }

    fn run_task(&self, task: &Task) -> Result<(), KmnError> {
        match task {
            Task::Keygen => {
                let result = self.run_keygen(true);
                let mut reg = self.registry.lock();
                reg.pending_keys -= 1;
                let (key, pk) = result?;
                self.record(
                    &mut reg,
                    Event::Key {
                        key,
                        public_key: pk,
                        state: KeyState::Available,
                        owner: None,
                    },
                )
            }
            Task::Presign(key) => {
                let result = self.run_presign(*key, true);
                let mut reg = self.registry.lock();
                if let Some(m) = reg.keys.get_mut(key) {
                    m.pending -= 1;
                }
                let presig = result?;
                self.record(&mut reg, Event::Presig { key: *key, presig })
            }
        }
    }

    fn replenish_loop(&self) {
        let mut backoff = Duration::from_millis(50);
        while !self.shutdown.load(Ordering::SeqCst) {
            let Some(task) = self.next_task() else {
                let mut g = self.wake_lock.lock();
                self.wake.wait_for(&mut g, Duration::from_millis(100));
                continue;
            };
            match self.run_task(&task) {
                Ok(()) => backoff = Duration::from_millis(50),
                Err(e) => {
                    bump(&self.counters.replenish_failures);
                    log::warn!("replenish failed: {e}; retrying in {backoff:?}");
                    let mut g = self.wake_lock.lock();
                    self.wake.wait_for(&mut g, backoff);
                    backoff = (backoff * 2).min(self.config.pool.max_backoff);
                }
            }
        }
    }
}
