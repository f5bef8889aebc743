//! The payment processor (PP): wallets of note references held at one FSP,
//! local transfers, and the nine-step remote transfer between FSPs.
//!
//! Remote transfer, sender side: announce (1), receive `R1` (3), generate
//! `R2` (4), register `v` under `R1 + R2` (5), store the receipt (6), export
//! and disclose `r2` (7), await the acknowledgment (8). Recipient side:
//! generate `R1` (2), and after disclosure add `r2` to its key and switch the
//! note to a fresh key (9).
//!
//! Client API, request `verb u8 ‖ body`, response `status u8 ‖ body`:
//!
//! | verb | body | reply |
//! |------|------|-------|
//! | `CREATE_WALLET` | owner token | wallet uuid |
//! | `FUND` | wallet uuid ‖ v u64 | |
//! | `TRANSFER` | from uuid ‖ fsp u16 ‖ to uuid ‖ v u64 | session uuid |
//! | `BALANCE` | wallet uuid | u64 |

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use kmn_core::ec::{GroupPoint, KeyPair, Scalar};
use kmn_core::encoding::{DecodeError, Reader, Writer};
use parking_lot::{Mutex, RwLock};
use rand::rngs::OsRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;
use zeroize::Zeroize;

use crate::api::SignPath;
use crate::error::KmnError;
use crate::keys::KeyService;
use crate::verifier::{Command, CommandKind, Output, Rejection, TransferReceipt, VerifierClient, VerifierError, RECEIPT_LEN};
use crate::wire::{Caller, Channel, Handler, RpcError};

pub const CREATE_WALLET: u8 = 0x10;
pub const FUND: u8 = 0x11;
pub const TRANSFER: u8 = 0x12;
pub const BALANCE: u8 = 0x13;

pub const OK: u8 = 0x00;
pub const NOT_FOUND: u8 = 0x01;
pub const INSUFFICIENT: u8 = 0x02;
pub const REJECTED: u8 = 0x03;
pub const FAILED: u8 = 0x04;
pub const BAD_REQUEST: u8 = 0x05;

pub type FspId = u16;

#[derive(Debug, Error)]
pub enum PpError {
    #[error("wallet {0} not found")]
    UnknownWallet(Uuid),
    #[error("insufficient funds: balance {available}, requested {requested}")]
    InsufficientFunds { available: u64, requested: u64 },
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("kmn: {0}")]
    Kmn(#[from] KmnError),
    #[error("verifier: {0}")]
    Verifier(#[from] VerifierError),
    #[error("peer fsp {fsp}: {message}")]
    Peer { fsp: FspId, message: String },
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("session {0} disclosed but not acknowledged")]
    AwaitingAck(Uuid),
    #[error("payment processor stopped")]
    Crashed,
    #[error("storage: {0}")]
    Storage(String),
}

impl PpError {
    fn status(&self) -> u8 {
        match self {
            PpError::UnknownWallet(_) => NOT_FOUND,
            PpError::InsufficientFunds { .. } => INSUFFICIENT,
            PpError::Verifier(VerifierError::Rejected(_)) => REJECTED,
            PpError::BadRequest(_) => BAD_REQUEST,
            _ => FAILED,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteRef {
    pub key: Uuid,
    pub value: u64,
    pub public_key: GroupPoint,
    #[serde(default)]
    pub reserved: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Wallet {
    pub id: Uuid,
    pub owner: String,
    pub notes: Vec<NoteRef>,
}

impl Wallet {
    pub fn balance(&self) -> u64 {
        self.notes.iter().map(|n| n.value).sum()
    }

    pub fn available(&self) -> u64 {
        self.notes.iter().filter(|n| !n.reserved).map(|n| n.value).sum()
    }
}

/// One timed step of a transfer, numbered as in the remote flow; local
/// transfers use 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub number: u8,
    pub label: String,
    pub millis: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SendState {
    Prepared,
    KeyReady {
        r1: GroupPoint,
        uuid2: Uuid,
        r2_pub: GroupPoint,
    },
    Registering {
        r1: GroupPoint,
        uuid2: Uuid,
        r2_pub: GroupPoint,
        signature: String,
    },
    Registered {
        uuid2: Uuid,
        receipt: String,
    },
    Disclosing {
        r2: Scalar,
        receipt: String,
    },
    Complete {
        receipt: String,
    },
    Aborted {
        reason: String,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SendSession {
    pub id: Uuid,
    pub wallet: Uuid,
    pub to_fsp: FspId,
    pub to_wallet: Uuid,
    pub value: u64,
    /// The exact-value note being transferred.
    pub note: NoteRef,
    pub state: SendState,
    #[serde(default)]
    pub steps: Vec<Step>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RecvState {
    Awaiting,
    Combined { uuid_c: Uuid },
    Switching { uuid_c: Uuid, fresh: NoteRef },
    Credited { fresh: NoteRef },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecvSession {
    pub id: Uuid,
    pub from_fsp: FspId,
    pub wallet: Uuid,
    pub value: u64,
    pub uuid1: Uuid,
    pub r1: GroupPoint,
    pub state: RecvState,
    #[serde(default)]
    pub step9_path: Option<SignPath>,
}

#[derive(Clone, Default, Serialize, Deserialize)]
struct State {
    wallets: BTreeMap<Uuid, Wallet>,
    sends: BTreeMap<Uuid, SendSession>,
    receives: BTreeMap<Uuid, RecvSession>,
}

/// Messages between PPs; sent over an authenticated encrypted channel.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "msg", rename_all = "snake_case")]
pub enum PeerRequest {
    Announce {
        session_id: Uuid,
        value: u64,
        sender_fsp: FspId,
        wallet: Uuid,
    },
    Disclose {
        session_id: Uuid,
        r2: Scalar,
        receipt: String,
    },
}

impl Drop for PeerRequest {
    fn drop(&mut self) {
        if let PeerRequest::Disclose { r2, .. } = self {
            r2.zeroize();
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "msg", rename_all = "snake_case")]
pub enum PeerResponse {
    Announced { r1: GroupPoint, millis: f64 },
    Ack { millis: f64, path: Option<SignPath> },
    Error { violation: bool, message: String },
}

/// The result of a completed transfer, for transcripts.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferOutcome {
    pub session_id: Uuid,
    pub remote: bool,
    pub steps: Vec<Step>,
    pub receipt: Option<TransferReceipt>,
    /// Signing path of the recipient's final switch.
    pub step9_path: Option<SignPath>,
}

impl TransferOutcome {
    /// `session_id ‖ remote ‖ path ‖ receipt? ‖ steps`, the body of a
    /// TRANSFER reply. Step times travel as whole microseconds.
    pub fn encode(&self, w: &mut Writer) {
        w.uuid(&self.session_id).u8(self.remote as u8);
        w.u8(self.step9_path.map_or(0xff, |p| p as u8));
        match &self.receipt {
            Some(r) => w.u8(1).raw(&r.encode()),
            None => w.u8(0),
        };
        w.u16(self.steps.len() as u16);
        for step in &self.steps {
            w.u8(step.number)
                .u64((step.millis * 1e3).round() as u64)
                .bytes(step.label.as_bytes());
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let session_id = r.uuid()?;
        let remote = r.u8()? != 0;
        let step9_path = match r.u8()? {
            0 => Some(SignPath::Online),
            1 => Some(SignPath::Interactive),
            2 => Some(SignPath::Local),
            _ => None,
        };
        let receipt = match r.u8()? {
            0 => None,
            _ => Some(TransferReceipt::decode(r.raw(RECEIPT_LEN)?)?),
        };
        let mut steps = Vec::new();
        for _ in 0..r.u16()? {
            let number = r.u8()?;
            let millis = r.u64()? as f64 / 1e3;
            let label = String::from_utf8_lossy(r.bytes()?).into_owned();
            steps.push(Step { number, label, millis });
        }
        Ok(TransferOutcome {
            session_id,
            remote,
            steps,
            receipt,
            step9_path,
        })
    }
}

#[derive(Clone, Debug)]
pub struct PpConfig {
    pub fsp: FspId,
    /// JSON snapshot of wallets and sessions, rewritten on every change.
    pub snapshot: Option<PathBuf>,
    /// Central-bank key, for the test-only FUND operation.
    pub bank: Option<KeyPair>,
    pub verifier_key: GroupPoint,
}

fn hex_receipt(r: &TransferReceipt) -> String {
    hex::encode(r.encode())
}

fn parse_receipt(s: &str) -> Result<TransferReceipt, PpError> {
    let bytes = hex::decode(s).map_err(|e| PpError::Storage(e.to_string()))?;
    TransferReceipt::decode(&bytes).map_err(|e| PpError::Storage(e.to_string()))
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub struct PaymentProcessor {
    config: PpConfig,
    keys: Arc<dyn KeyService>,
    verifier: VerifierClient,
    peers: RwLock<HashMap<FspId, Arc<dyn Channel>>>,
    state: Mutex<State>,
    /// Recipient sessions currently being disclosed to.
    busy: Mutex<HashSet<Uuid>>,
    crash_after_receipt: AtomicBool,
    crashed: AtomicBool,
    double_spends: AtomicU64,
}

impl PaymentProcessor {
    /// Starts a PP, loading its snapshot if one exists. Call
    /// [`PaymentProcessor::recover`] afterwards to resume open sessions.
    pub fn new(config: PpConfig, keys: Arc<dyn KeyService>, verifier: VerifierClient) -> Result<Self, PpError> {
        let state = match &config.snapshot {
            Some(path) if path.exists() => {
                let bytes = fs::read(path).map_err(|e| PpError::Storage(e.to_string()))?;
                serde_json::from_slice(&bytes).map_err(|e| PpError::Storage(e.to_string()))?
            }
            _ => State::default(),
        };
        Ok(PaymentProcessor {
            config,
            keys,
            verifier,
            peers: RwLock::new(HashMap::new()),
            state: Mutex::new(state),
            busy: Mutex::new(HashSet::new()),
            crash_after_receipt: AtomicBool::new(false),
            crashed: AtomicBool::new(false),
            double_spends: AtomicU64::new(0),
        })
    }

    pub fn fsp(&self) -> FspId {
        self.config.fsp
    }

    pub fn add_peer(&self, fsp: FspId, channel: Arc<dyn Channel>) {
        self.peers.write().insert(fsp, channel);
    }

    /// Makes the next remote send stop right after storing its receipt, as
    /// if the process were killed there.
    pub fn crash_after_receipt(&self) {
        self.crash_after_receipt.store(true, Ordering::SeqCst);
    }

    pub fn is_crashed(&self) -> bool {
        self.crashed.load(Ordering::SeqCst)
    }

    fn alive(&self) -> Result<(), PpError> {
        if self.is_crashed() {
            return Err(PpError::Crashed);
        }
        Ok(())
    }

    fn persist(&self, state: &State) -> Result<(), PpError> {
        let Some(path) = &self.config.snapshot else {
            return Ok(());
        };
        write_atomic(path, &serde_json::to_vec(state).expect("state serializes"))
            .map_err(|e| PpError::Storage(e.to_string()))
    }

    fn mutate<T>(&self, f: impl FnOnce(&mut State) -> Result<T, PpError>) -> Result<T, PpError> {
        let mut st = self.state.lock();
        let out = f(&mut st)?;
        self.persist(&st)?;
        Ok(out)
    }

    pub fn create_wallet(&self, owner: &str) -> Result<Uuid, PpError> {
        self.alive()?;
        let id = Uuid::new_v4();
        self.mutate(|st| {
            st.wallets.insert(
                id,
                Wallet {
                    id,
                    owner: owner.to_string(),
                    notes: Vec::new(),
                },
            );
            Ok(())
        })?;
        Ok(id)
    }

    pub fn wallet(&self, id: Uuid) -> Option<Wallet> {
        self.state.lock().wallets.get(&id).cloned()
    }

    pub fn wallets(&self) -> Vec<Uuid> {
        self.state.lock().wallets.keys().copied().collect()
    }

    /// Spendable balance: every note not reserved by a transfer in progress.
    pub fn balance(&self, wallet: Uuid) -> Result<u64, PpError> {
        self.state
            .lock()
            .wallets
            .get(&wallet)
            .map(Wallet::available)
            .ok_or(PpError::UnknownWallet(wallet))
    }

    /// Value of every note held in every wallet, reserved or not.
    pub fn total_value(&self) -> u64 {
        self.state.lock().wallets.values().map(Wallet::balance).sum()
    }

    /// Value sent out of this PP's wallets and not yet acknowledged.
    pub fn in_flight_value(&self) -> u64 {
        self.state
            .lock()
            .sends
            .values()
            .filter(|s| {
                matches!(
                    s.state,
                    SendState::Registering { .. } | SendState::Registered { .. } | SendState::Disclosing { .. }
                )
            })
            .map(|s| s.value)
            .sum()
    }

    /// Sessions that registered the transfer but have no acknowledgment.
    pub fn stalled_sessions(&self) -> Vec<Uuid> {
        self.state
            .lock()
            .sends
            .values()
            .filter(|s| matches!(s.state, SendState::Registered { .. } | SendState::Disclosing { .. }))
            .map(|s| s.id)
            .collect()
    }

    pub fn send_session(&self, id: Uuid) -> Option<SendSession> {
        self.state.lock().sends.get(&id).cloned()
    }

    pub fn receive_session(&self, id: Uuid) -> Option<RecvSession> {
        self.state.lock().receives.get(&id).cloned()
    }

    /// Verifier rejections for an already-spent input seen by this PP.
    pub fn double_spend_rejections(&self) -> u64 {
        self.double_spends.load(Ordering::Relaxed)
    }

    fn note_rejection(&self, e: &VerifierError) {
        if *e == VerifierError::Rejected(Rejection::DoubleSpend) {
            self.double_spends.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn apply(&self, cmd: &Command) -> Result<(), PpError> {
        self.verifier.apply(cmd).map(|_| ()).map_err(|e| {
            self.note_rejection(&e);
            PpError::Verifier(e)
        })
    }

    /// Signs `cmd` once per input, with the KMN key behind each input.
    fn sign_inputs(&self, cmd: &mut Command, keys: &[Uuid]) -> Result<Vec<SignPath>, PpError> {
        let digest = cmd.digest();
        let mut paths = Vec::new();
        for key in keys {
            let (sig, path) = self.keys.sign(*key, &digest)?;
            cmd.signatures.push(sig);
            paths.push(path);
        }
        Ok(paths)
    }

    fn fresh_note(&self, value: u64) -> Result<NoteRef, PpError> {
        let (key, public_key) = self.keys.generate()?;
        Ok(NoteRef {
            key,
            value,
            public_key,
            reserved: false,
        })
    }

    /// Test-only issuance: the bank creates a note of `value` for `wallet`.
    pub fn fund(&self, wallet: Uuid, value: u64) -> Result<(), PpError> {
        self.alive()?;
        let bank = self
            .config
            .bank
            .as_ref()
            .ok_or_else(|| PpError::BadRequest("no bank key configured".into()))?;
        if value == 0 {
            return Err(PpError::BadRequest("zero value".into()));
        }
        if !self.state.lock().wallets.contains_key(&wallet) {
            return Err(PpError::UnknownWallet(wallet));
        }
        let note = self.fresh_note(value)?;
        let mut cmd = Command::new(
            CommandKind::Create,
            vec![],
            vec![Output {
                key: note.public_key,
                value,
            }],
        );
        cmd.signatures.push(bank.sign(&cmd.digest(), &mut OsRng));
        self.apply(&cmd)?;
        self.mutate(|st| {
            st.wallets
                .get_mut(&wallet)
                .ok_or(PpError::UnknownWallet(wallet))?
                .notes
                .push(note);
            Ok(())
        })
    }

    /// Reserves notes of `wallet` worth at least `value`, largest first.
    fn reserve(&self, wallet: Uuid, value: u64) -> Result<Vec<NoteRef>, PpError> {
        self.mutate(|st| {
            let w = st.wallets.get_mut(&wallet).ok_or(PpError::UnknownWallet(wallet))?;
            let available = w.available();
            if available < value {
                return Err(PpError::InsufficientFunds {
                    available,
                    requested: value,
                });
            }
            let mut free: Vec<&mut NoteRef> = w.notes.iter_mut().filter(|n| !n.reserved).collect();
            free.sort_by(|a, b| b.value.cmp(&a.value));
            let mut picked = Vec::new();
            let mut sum = 0;
            for n in free {
                if sum >= value {
                    break;
                }
                n.reserved = true;
                sum += n.value;
                picked.push(n.clone());
            }
            Ok(picked)
        })
    }

    fn release_note(&self, wallet: Uuid, key: Uuid) {
        let _ = self.mutate(|st| {
            if let Some(n) = st
                .wallets
                .get_mut(&wallet)
                .and_then(|w| w.notes.iter_mut().find(|n| n.key == key))
            {
                n.reserved = false;
            }
            Ok(())
        });
    }

    /// Swaps `spent` for `created` in `wallet` after the verifier accepted.
    fn replace_notes(&self, wallet: Uuid, spent: &[Uuid], created: Vec<NoteRef>) -> Result<(), PpError> {
        self.mutate(|st| {
            let w = st.wallets.get_mut(&wallet).ok_or(PpError::UnknownWallet(wallet))?;
            w.notes.retain(|n| !spent.contains(&n.key));
            w.notes.extend(created);
            Ok(())
        })
    }

    /// Produces one reserved note of exactly `value` in `wallet`, merging
    /// and splitting as needed. Change goes to a fresh key.
    fn prepare_exact(&self, wallet: Uuid, value: u64, steps: &mut Vec<Step>) -> Result<NoteRef, PpError> {
        let inputs = self.reserve(wallet, value)?;
        let result = self.shape_note(wallet, value, inputs, steps);
        if result.is_err() {
            // Keep notes reserved by other transfers of this wallet reserved.
            let keep: HashSet<Uuid> = self.state.lock().sends.values().filter(|s| s.wallet == wallet && !matches!(s.state, SendState::Aborted { .. } | SendState::Complete { .. })).map(|s| s.note.key).collect();
            let _ = self.mutate(|st| {
                if let Some(w) = st.wallets.get_mut(&wallet) {
                    for n in &mut w.notes {
                        if !keep.contains(&n.key) {
                            n.reserved = false;
                        }
                    }
                }
                Ok(())
            });
        }
        result
    }

    fn shape_note(
        &self,
        wallet: Uuid,
        value: u64,
        inputs: Vec<NoteRef>,
        steps: &mut Vec<Step>,
    ) -> Result<NoteRef, PpError> {
        let mut note = if inputs.len() == 1 {
            inputs.into_iter().next().expect("one input")
        } else {
            let t = Instant::now();
            let total = inputs.iter().map(|n| n.value).sum();
            let mut merged = self.fresh_note(total)?;
            merged.reserved = true;
            let mut cmd = Command::new(
                CommandKind::Merge,
                inputs.iter().map(|n| n.public_key).collect(),
                vec![Output {
                    key: merged.public_key,
                    value: total,
                }],
            );
            let keys: Vec<Uuid> = inputs.iter().map(|n| n.key).collect();
            self.sign_inputs(&mut cmd, &keys)?;
            self.apply(&cmd)?;
            self.replace_notes(wallet, &keys, vec![merged.clone()])?;
            steps.push(Step {
                number: 0,
                label: format!("merge {} notes", keys.len()),
                millis: ms_since(t),
            });
            merged
        };
        if note.value > value {
            let t = Instant::now();
            let mut exact = self.fresh_note(value)?;
            exact.reserved = true;
            let change = self.fresh_note(note.value - value)?;
            let mut cmd = Command::new(
                CommandKind::Split,
                vec![note.public_key],
                vec![
                    Output {
                        key: exact.public_key,
                        value,
                    },
                    Output {
                        key: change.public_key,
                        value: change.value,
                    },
                ],
            );
            self.sign_inputs(&mut cmd, &[note.key])?;
            self.apply(&cmd)?;
            self.replace_notes(wallet, &[note.key], vec![exact.clone(), change])?;
            steps.push(Step {
                number: 0,
                label: "split off change".into(),
                millis: ms_since(t),
            });
            note = exact;
        }
        Ok(note)
    }

    /// Moves `value` from `from` to `to_wallet` at `to_fsp`; local when the
    /// recipient is at this FSP.
    pub fn transfer(&self, from: Uuid, to_fsp: FspId, to_wallet: Uuid, value: u64) -> Result<TransferOutcome, PpError> {
        if to_fsp == self.config.fsp {
            self.local_transfer(from, to_wallet, value)
        } else {
            self.remote_transfer(from, to_fsp, to_wallet, value)
        }
    }

    pub fn local_transfer(&self, from: Uuid, to: Uuid, value: u64) -> Result<TransferOutcome, PpError> {
        self.alive()?;
        if value == 0 {
            return Err(PpError::BadRequest("zero value".into()));
        }
        if !self.state.lock().wallets.contains_key(&to) {
            return Err(PpError::UnknownWallet(to));
        }
        let mut steps = Vec::new();
        let note = self.prepare_exact(from, value, &mut steps)?;
        let t = Instant::now();
        let switched = (|| {
            let fresh = self.fresh_note(value)?;
            let mut cmd = Command::transfer(note.public_key, value, fresh.public_key);
            self.sign_inputs(&mut cmd, &[note.key])?;
            self.apply(&cmd)?;
            Ok::<_, PpError>(fresh)
        })();
        let fresh = match switched {
            Ok(f) => f,
            Err(e) => {
                self.release_note(from, note.key);
                return Err(e);
            }
        };
        self.mutate(|st| {
            if let Some(w) = st.wallets.get_mut(&from) {
                w.notes.retain(|n| n.key != note.key);
            }
            st.wallets.get_mut(&to).ok_or(PpError::UnknownWallet(to))?.notes.push(fresh);
            Ok(())
        })?;
        steps.push(Step {
            number: 0,
            label: "switch to recipient key".into(),
            millis: ms_since(t),
        });
        Ok(TransferOutcome {
            session_id: Uuid::new_v4(),
            remote: false,
            steps,
            receipt: None,
            step9_path: None,
        })
    }

    fn peer(&self, fsp: FspId) -> Result<Arc<dyn Channel>, PpError> {
        self.peers.read().get(&fsp).cloned().ok_or_else(|| PpError::Peer {
            fsp,
            message: "no channel configured".into(),
        })
    }

    fn call_peer(&self, fsp: FspId, req: &PeerRequest) -> Result<PeerResponse, PpError> {
        let channel = self.peer(fsp)?;
        let mut bytes = serde_json::to_vec(req).expect("peer requests serialize");
        let out = channel.call(&bytes);
        bytes.zeroize();
        let peer_err = |message: String| PpError::Peer { fsp, message };
        let resp = out.map_err(|e: RpcError| peer_err(e.to_string()))?;
        let resp: PeerResponse = serde_json::from_slice(&resp).map_err(|e| peer_err(e.to_string()))?;
        match resp {
            PeerResponse::Error { violation: true, message } => Err(PpError::ProtocolViolation(message)),
            PeerResponse::Error { message, .. } => Err(peer_err(message)),
            ok => Ok(ok),
        }
    }

    fn set_send_state(&self, id: Uuid, state: SendState, step: Option<Step>) -> Result<(), PpError> {
        self.mutate(|st| {
            let s = st.sends.get_mut(&id).expect("known session");
            s.state = state;
            s.steps.extend(step);
            Ok(())
        })
    }

    pub fn remote_transfer(&self, from: Uuid, to_fsp: FspId, to_wallet: Uuid, value: u64) -> Result<TransferOutcome, PpError> {
        self.alive()?;
        if value == 0 {
            return Err(PpError::BadRequest("zero value".into()));
        }
        self.peer(to_fsp)?;
        let mut steps = Vec::new();
        let note = self.prepare_exact(from, value, &mut steps)?;
        let id = Uuid::new_v4();
        self.mutate(|st| {
            st.sends.insert(
                id,
                SendSession {
                    id,
                    wallet: from,
                    to_fsp,
                    to_wallet,
                    value,
                    note: note.clone(),
                    state: SendState::Prepared,
                    steps,
                },
            );
            Ok(())
        })?;

        let t = Instant::now();
        let announced = self.call_peer(
            to_fsp,
            &PeerRequest::Announce {
                session_id: id,
                value,
                sender_fsp: self.config.fsp,
                wallet: to_wallet,
            },
        );
        let (r1, recipient_ms) = match announced {
            Ok(PeerResponse::Announced { r1, millis }) => (r1, millis),
            Ok(other) => return self.abort_send(id, PpError::ProtocolViolation(format!("unexpected {other:?}"))),
            Err(e) => return self.abort_send(id, e),
        };
        let total = ms_since(t);
        let step1 = Step {
            number: 1,
            label: "announce v to recipient".into(),
            millis: (total - recipient_ms).max(0.0),
        };
        self.mutate(|st| {
            let s = st.sends.get_mut(&id).expect("known session");
            s.steps.push(step1);
            s.steps.push(Step {
                number: 2,
                label: "recipient generates (r1, R1)".into(),
                millis: recipient_ms,
            });
            s.steps.push(Step {
                number: 3,
                label: "R1 returned".into(),
                millis: 0.0,
            });
            Ok(())
        })?;

        let t = Instant::now();
        let (uuid2, r2_pub) = match self.keys.generate() {
            Ok(k) => k,
            Err(e) => return self.abort_send(id, e.into()),
        };
        self.set_send_state(
            id,
            SendState::KeyReady { r1, uuid2, r2_pub },
            Some(Step {
                number: 4,
                label: "generate (r2, R2)".into(),
                millis: ms_since(t),
            }),
        )?;
        self.drive(id)
    }

    fn abort_send(&self, id: Uuid, error: PpError) -> Result<TransferOutcome, PpError> {
        let (wallet, key) = {
            let st = self.state.lock();
            let s = &st.sends[&id];
            (s.wallet, s.note.key)
        };
        let _ = self.set_send_state(
            id,
            SendState::Aborted {
                reason: error.to_string(),
            },
            None,
        );
        self.release_note(wallet, key);
        Err(error)
    }

    /// Advances a send session from its persisted state to completion.
    fn drive(&self, id: Uuid) -> Result<TransferOutcome, PpError> {
        loop {
            self.alive()?;
            let session = self.state.lock().sends[&id].clone();
            match session.state.clone() {
                SendState::Prepared => {
                    return self.abort_send(id, PpError::Peer {
                        fsp: session.to_fsp,
                        message: "interrupted before announce completed".into(),
                    })
                }
                SendState::KeyReady { r1, uuid2, r2_pub } => {
                    let t = Instant::now();
                    let mut cmd = Command::transfer(session.note.public_key, session.value, r1 + r2_pub);
                    if let Err(e) = self.sign_inputs(&mut cmd, &[session.note.key]) {
                        return self.abort_send(id, e);
                    }
                    let signature = hex::encode(cmd.signatures[0].to_bytes());
                    self.set_send_state(
                        id,
                        SendState::Registering {
                            r1,
                            uuid2,
                            r2_pub,
                            signature,
                        },
                        None,
                    )?;
                    let receipt = self.verifier.register_transfer(
                        session.note.public_key,
                        session.value,
                        r1 + r2_pub,
                        &cmd.signatures[0],
                    );
                    match receipt {
                        Ok(r) => self.registered(id, &session, uuid2, r, t)?,
                        Err(e) => {
                            self.note_rejection(&e);
                            return self.abort_send(id, e.into());
                        }
                    }
                }
                SendState::Registering {
                    r1,
                    uuid2,
                    r2_pub,
                    signature,
                } => {
                    // Resubmission after a restart: the verifier may already
                    // have applied the registration.
                    let t = Instant::now();
                    let sig = kmn_core::ec::EcdsaSignature::from_bytes(
                        &hex::decode(&signature).map_err(|e| PpError::Storage(e.to_string()))?,
                    )
                    .map_err(|e| PpError::Storage(e.to_string()))?;
                    let dest = r1 + r2_pub;
                    match self.verifier.register_transfer(session.note.public_key, session.value, dest, &sig) {
                        Ok(r) => self.registered(id, &session, uuid2, r, t)?,
                        Err(VerifierError::Rejected(Rejection::DoubleSpend)) => {
                            let tx = Command::transfer(session.note.public_key, session.value, dest).tx_id();
                            let r = self
                                .verifier
                                .receipts(&tx)?
                                .into_iter()
                                .next()
                                .ok_or_else(|| PpError::ProtocolViolation("input spent elsewhere".into()))?;
                            self.registered(id, &session, uuid2, r, t)?;
                        }
                        Err(e @ VerifierError::Rejected(_)) => return self.abort_send(id, e.into()),
                        Err(e) => return Err(e.into()),
                    }
                }
                SendState::Registered { uuid2, receipt } => {
                    let r2 = self.keys.export(uuid2)?;
                    self.set_send_state(id, SendState::Disclosing { r2, receipt }, None)?;
                }
                SendState::Disclosing { r2, receipt } => {
                    let t = Instant::now();
                    let resp = self.call_peer(
                        session.to_fsp,
                        &PeerRequest::Disclose {
                            session_id: id,
                            r2,
                            receipt: receipt.clone(),
                        },
                    );
                    let (recipient_ms, path) = match resp {
                        Ok(PeerResponse::Ack { millis, path }) => (millis, path),
                        Ok(_) | Err(PpError::Peer { .. }) => return Err(PpError::AwaitingAck(id)),
                        Err(e) => return Err(e),
                    };
                    let total = ms_since(t);
                    let parsed = parse_receipt(&receipt)?;
                    self.mutate(|st| {
                        let s = st.sends.get_mut(&id).expect("known session");
                        s.state = SendState::Complete { receipt };
                        s.steps.push(Step {
                            number: 7,
                            label: "export r2 and disclose".into(),
                            millis: (total - recipient_ms).max(0.0),
                        });
                        s.steps.push(Step {
                            number: 9,
                            label: "recipient adds r2 and switches to a fresh key".into(),
                            millis: recipient_ms,
                        });
                        s.steps.push(Step {
                            number: 8,
                            label: "acknowledgment".into(),
                            millis: 0.0,
                        });
                        Ok(())
                    })?;
                    let steps = self.state.lock().sends[&id].steps.clone();
                    return Ok(TransferOutcome {
                        session_id: id,
                        remote: true,
                        steps,
                        receipt: Some(parsed),
                        step9_path: path,
                    });
                }
                SendState::Complete { receipt } => {
                    return Ok(TransferOutcome {
                        session_id: id,
                        remote: true,
                        steps: session.steps,
                        receipt: Some(parse_receipt(&receipt)?),
                        step9_path: None,
                    })
                }
                SendState::Aborted { reason } => return Err(PpError::Peer { fsp: session.to_fsp, message: reason }),
            }
        }
    }

    fn registered(
        &self,
        id: Uuid,
        session: &SendSession,
        uuid2: Uuid,
        receipt: TransferReceipt,
        started: Instant,
    ) -> Result<(), PpError> {
        if !receipt.verify(&self.config.verifier_key) || receipt.value != session.value {
            return Err(PpError::ProtocolViolation("verifier receipt does not verify".into()));
        }
        let step5 = Step {
            number: 5,
            label: "register v under R1 + R2".into(),
            millis: ms_since(started),
        };
        let t = Instant::now();
        self.mutate(|st| {
            if let Some(w) = st.wallets.get_mut(&session.wallet) {
                w.notes.retain(|n| n.key != session.note.key);
            }
            let s = st.sends.get_mut(&id).expect("known session");
            s.state = SendState::Registered {
                uuid2,
                receipt: hex_receipt(&receipt),
            };
            s.steps.push(step5);
            Ok(())
        })?;
        self.mutate(|st| {
            st.sends.get_mut(&id).expect("known session").steps.push(Step {
                number: 6,
                label: "store receipt".into(),
                millis: ms_since(t),
            });
            Ok(())
        })?;
        if self.crash_after_receipt.swap(false, Ordering::SeqCst) {
            self.crashed.store(true, Ordering::SeqCst);
            return Err(PpError::Crashed);
        }
        Ok(())
    }

    /// Resumes every unfinished send session, e.g. after a restart.
    pub fn recover(&self) -> Vec<(Uuid, Result<TransferOutcome, PpError>)> {
        let open: Vec<Uuid> = self
            .state
            .lock()
            .sends
            .values()
            .filter(|s| !matches!(s.state, SendState::Complete { .. } | SendState::Aborted { .. }))
            .map(|s| s.id)
            .collect();
        open.into_iter().map(|id| (id, self.drive(id))).collect()
    }

    /// Retries a stalled session.
    pub fn resume(&self, id: Uuid) -> Result<TransferOutcome, PpError> {
        self.drive(id)
    }

    fn on_announce(&self, caller: Caller, session_id: Uuid, value: u64, sender_fsp: FspId, wallet: Uuid) -> Result<PeerResponse, PpError> {
        if caller.0 != sender_fsp {
            return Err(PpError::ProtocolViolation("announce from a different fsp".into()));
        }
        if value == 0 {
            return Err(PpError::BadRequest("zero value".into()));
        }
        if let Some(s) = self.state.lock().receives.get(&session_id) {
            if s.from_fsp != sender_fsp || s.value != value || s.wallet != wallet {
                return Err(PpError::ProtocolViolation("announce conflicts with an earlier one".into()));
            }
            return Ok(PeerResponse::Announced { r1: s.r1, millis: 0.0 });
        }
        if !self.state.lock().wallets.contains_key(&wallet) {
            return Err(PpError::UnknownWallet(wallet));
        }
        let t = Instant::now();
        let (uuid1, r1) = self.keys.generate()?;
        self.mutate(|st| {
            let s = st.receives.entry(session_id).or_insert(RecvSession {
                id: session_id,
                from_fsp: sender_fsp,
                wallet,
                value,
                uuid1,
                r1,
                state: RecvState::Awaiting,
                step9_path: None,
            });
            Ok(PeerResponse::Announced {
                r1: s.r1,
                millis: ms_since(t),
            })
        })
    }

    fn on_disclose(&self, caller: Caller, session_id: Uuid, r2: Scalar, receipt: &str) -> Result<PeerResponse, PpError> {
        if !self.busy.lock().insert(session_id) {
            return Err(PpError::Peer {
                fsp: caller.0,
                message: "disclosure already in progress".into(),
            });
        }
        let out = self.finish_receive(caller, session_id, r2, receipt);
        self.busy.lock().remove(&session_id);
        out
    }

    fn finish_receive(&self, caller: Caller, session_id: Uuid, r2: Scalar, receipt: &str) -> Result<PeerResponse, PpError> {
        let t = Instant::now();
        let session = self
            .state
            .lock()
            .receives
            .get(&session_id)
            .cloned()
            .ok_or_else(|| PpError::ProtocolViolation(format!("unknown session {session_id}")))?;
        if session.from_fsp != caller.0 {
            return Err(PpError::ProtocolViolation("disclosure from a different fsp".into()));
        }
        let receipt = TransferReceipt::decode(&hex::decode(receipt).map_err(|e| PpError::ProtocolViolation(e.to_string()))?)
            .map_err(|e| PpError::ProtocolViolation(e.to_string()))?;
        if !receipt.verify(&self.config.verifier_key) || receipt.value != session.value {
            return Err(PpError::ProtocolViolation("receipt does not prove the announced transfer".into()));
        }
        if session.r1 + GroupPoint::mul_base(&r2) != receipt.destination {
            return Err(PpError::ProtocolViolation("R1 + r2·G differs from the registered destination".into()));
        }
        let mut state = session.state.clone();
        loop {
            state = match state {
                RecvState::Awaiting => {
                    let (uuid_c, combined) = self.keys.add(session.uuid1, r2)?;
                    if combined != receipt.destination {
                        return Err(PpError::ProtocolViolation("combined key differs from the destination".into()));
                    }
                    RecvState::Combined { uuid_c }
                }
                RecvState::Combined { uuid_c } => RecvState::Switching {
                    uuid_c,
                    fresh: self.fresh_note(session.value)?,
                },
                RecvState::Switching { uuid_c, fresh } => {
                    let mut cmd = Command::transfer(receipt.destination, session.value, fresh.public_key);
                    let paths = self.sign_inputs(&mut cmd, &[uuid_c])?;
                    match self.apply(&cmd) {
                        Ok(()) => {}
                        // Already switched by an earlier, interrupted attempt.
                        Err(PpError::Verifier(VerifierError::Rejected(Rejection::DoubleSpend)))
                            if self.verifier.receipts(&cmd.tx_id()).is_ok() => {}
                        Err(e) => return Err(e),
                    }
                    self.mutate(|st| {
                        st.receives.get_mut(&session_id).expect("known session").step9_path = paths.first().copied();
                        st.wallets
                            .get_mut(&session.wallet)
                            .ok_or(PpError::UnknownWallet(session.wallet))?
                            .notes
                            .push(fresh.clone());
                        Ok(())
                    })?;
                    RecvState::Credited { fresh }
                }
                RecvState::Credited { .. } => {
                    let path = self.state.lock().receives[&session_id].step9_path;
                    return Ok(PeerResponse::Ack {
                        millis: ms_since(t),
                        path,
                    });
                }
            };
            let next = state.clone();
            self.mutate(|st| {
                st.receives.get_mut(&session_id).expect("known session").state = next;
                Ok(())
            })?;
        }
    }

    pub fn handle_peer(&self, caller: Caller, req: &PeerRequest) -> PeerResponse {
        if self.is_crashed() {
            return PeerResponse::Error {
                violation: false,
                message: PpError::Crashed.to_string(),
            };
        }
        let out = match req {
            PeerRequest::Announce {
                session_id,
                value,
                sender_fsp,
                wallet,
            } => self.on_announce(caller, *session_id, *value, *sender_fsp, *wallet),
            PeerRequest::Disclose {
                session_id,
                r2,
                receipt,
            } => self.on_disclose(caller, *session_id, *r2, receipt),
        };
        out.unwrap_or_else(|e| PeerResponse::Error {
            violation: matches!(e, PpError::ProtocolViolation(_)),
            message: e.to_string(),
        })
    }

    fn handle_client(&self, request: &[u8]) -> Result<Vec<u8>, PpError> {
        let bad = |e: DecodeError| PpError::BadRequest(e.to_string());
        let mut r = Reader::new(request);
        let verb = r.u8().map_err(bad)?;
        let mut w = Writer::new();
        w.u8(OK);
        match verb {
            CREATE_WALLET => {
                let owner = String::from_utf8_lossy(r.rest()).into_owned();
                w.uuid(&self.create_wallet(&owner)?);
            }
            FUND => {
                let wallet = r.uuid().map_err(bad)?;
                let v = r.u64().map_err(bad)?;
                r.finish().map_err(bad)?;
                self.fund(wallet, v)?;
            }
            TRANSFER => {
                let from = r.uuid().map_err(bad)?;
                let fsp = r.u16().map_err(bad)?;
                let to = r.uuid().map_err(bad)?;
                let v = r.u64().map_err(bad)?;
                r.finish().map_err(bad)?;
                self.transfer(from, fsp, to, v)?.encode(&mut w);
            }
            BALANCE => {
                let wallet = r.uuid().map_err(bad)?;
                r.finish().map_err(bad)?;
                w.u64(self.balance(wallet)?);
            }
            other => return Err(PpError::BadRequest(format!("unknown verb {other:#x}"))),
        }
        Ok(w.finish())
    }
}

impl Handler for PaymentProcessor {
    fn handle(&self, _caller: Caller, request: &[u8]) -> Vec<u8> {
        self.handle_client(request).unwrap_or_else(|e| {
            let mut out = vec![e.status()];
            out.extend_from_slice(e.to_string().as_bytes());
            out
        })
    }
}

/// Serves the peer protocol of a PP; mount it behind a `SecureHandler` so
/// the caller is the authenticated peer FSP.
pub struct PeerService(pub Arc<PaymentProcessor>);

impl Handler for PeerService {
    fn handle(&self, caller: Caller, request: &[u8]) -> Vec<u8> {
        let response = match serde_json::from_slice::<PeerRequest>(request) {
            Ok(req) => self.0.handle_peer(caller, &req),
            Err(e) => PeerResponse::Error {
                violation: false,
                message: e.to_string(),
            },
        };
        serde_json::to_vec(&response).expect("peer responses serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PpClientError {
    #[error("status {status}: {message}")]
    Status { status: u8, message: String },
    #[error("rpc: {0}")]
    Rpc(#[from] RpcError),
    #[error("malformed response: {0}")]
    Malformed(String),
}

/// Client of the PP client API, as used by the load generator.
#[derive(Clone)]
pub struct PpClient {
    channel: Arc<dyn Channel>,
}

impl PpClient {
    pub fn new(channel: Arc<dyn Channel>) -> Self {
        PpClient { channel }
    }

    fn call(&self, req: Vec<u8>) -> Result<Vec<u8>, PpClientError> {
        let resp = self.channel.call(&req)?;
        match resp.split_first() {
            Some((&OK, rest)) => Ok(rest.to_vec()),
            Some((&status, rest)) => Err(PpClientError::Status {
                status,
                message: String::from_utf8_lossy(rest).into_owned(),
            }),
            None => Err(PpClientError::Malformed("empty response".into())),
        }
    }

    fn uuid(bytes: &[u8]) -> Result<Uuid, PpClientError> {
        Uuid::from_slice(bytes).map_err(|e| PpClientError::Malformed(e.to_string()))
    }

    pub fn create_wallet(&self, owner: &str) -> Result<Uuid, PpClientError> {
        let mut req = vec![CREATE_WALLET];
        req.extend_from_slice(owner.as_bytes());
        Self::uuid(&self.call(req)?)
    }

    pub fn fund(&self, wallet: Uuid, value: u64) -> Result<(), PpClientError> {
        let mut w = Writer::new();
        w.u8(FUND).uuid(&wallet).u64(value);
        self.call(w.finish()).map(|_| ())
    }

    pub fn transfer(&self, from: Uuid, to_fsp: FspId, to: Uuid, value: u64) -> Result<Uuid, PpClientError> {
        self.transfer_traced(from, to_fsp, to, value).map(|o| o.session_id)
    }

    /// A transfer whose reply carries the timed steps and the receipt.
    pub fn transfer_traced(&self, from: Uuid, to_fsp: FspId, to: Uuid, value: u64) -> Result<TransferOutcome, PpClientError> {
        let mut w = Writer::new();
        w.u8(TRANSFER).uuid(&from).u16(to_fsp).uuid(&to).u64(value);
        let body = self.call(w.finish())?;
        let mut r = Reader::new(&body);
        let outcome = TransferOutcome::decode(&mut r).map_err(|e| PpClientError::Malformed(e.to_string()))?;
        r.finish().map_err(|e| PpClientError::Malformed(e.to_string()))?;
        Ok(outcome)
    }

    pub fn balance(&self, wallet: Uuid) -> Result<u64, PpClientError> {
        let out = self.call({
            let mut w = Writer::new();
            w.u8(BALANCE).uuid(&wallet);
            w.finish()
        })?;
        out.try_into()
            .map(u64::from_be_bytes)
            .map_err(|_| PpClientError::Malformed("balance".into()))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
