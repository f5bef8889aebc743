//! The central verifier: the note ledger, its five commands and signed
//! transfer receipts.
//!
//! Wire protocol, request `verb u8 ‖ body`, response `status u8 ‖ body`:
//!
//! | verb | body |
//! |------|------|
//! | `APPLY` | encoded [`Command`] |
//! | `TRANSFER` | `input R ‖ v u64 ‖ destination R ‖ signature 64` |
//! | `GC` | `age_ms u64` |
//! | `QUERY` | `NOTE ‖ R`, `RECEIPTS ‖ tx_id 32` or `TOTALS` |

use std::collections::{HashMap, HashSet};
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use kmn_core::ec::{ecdsa_verify, Digest, EcdsaSignature, GroupPoint, KeyPair, POINT_LEN};
use kmn_core::encoding::{DecodeError, Reader, Writer};
use parking_lot::{Mutex, RwLock};
use rand::rngs::OsRng;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::log::AppendLog;
use crate::wire::{Caller, Channel, Handler, RpcError};

pub const APPLY: u8 = 0x01;
pub const TRANSFER: u8 = 0x02;
pub const GC: u8 = 0x03;
pub const QUERY: u8 = 0x04;

pub const QUERY_NOTE: u8 = 0x01;
pub const QUERY_RECEIPTS: u8 = 0x02;
pub const QUERY_TOTALS: u8 = 0x03;

pub const OK: u8 = 0x00;

type KeyBytes = [u8; POINT_LEN];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum CommandKind {
    Create = 1,
    Split = 2,
    Merge = 3,
    Switch = 4,
    Destroy = 5,
}

impl CommandKind {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => CommandKind::Create,
            2 => CommandKind::Split,
            3 => CommandKind::Merge,
            4 => CommandKind::Switch,
            5 => CommandKind::Destroy,
            _ => return None,
        })
    }

    fn needs_bank(self) -> bool {
        matches!(self, CommandKind::Create | CommandKind::Destroy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Output {
    pub key: GroupPoint,
    pub value: u64,
}

/// A ledger mutation. Split, Merge and Switch carry one signature per input,
/// by that input's key; Create and Destroy carry one bank signature. All
/// signatures are over [`Command::digest`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Command {
    pub kind: CommandKind,
    pub inputs: Vec<GroupPoint>,
    pub outputs: Vec<Output>,
    pub signatures: Vec<EcdsaSignature>,
}

impl Command {
    pub fn new(kind: CommandKind, inputs: Vec<GroupPoint>, outputs: Vec<Output>) -> Self {
        Command {
            kind,
            inputs,
            outputs,
            signatures: Vec::new(),
        }
    }

    /// The single-input, single-output Switch used to register a transfer.
    pub fn transfer(input: GroupPoint, value: u64, destination: GroupPoint) -> Self {
        Command::new(
            CommandKind::Switch,
            vec![input],
            vec![Output {
                key: destination,
                value,
            }],
        )
    }

    fn body(&self, w: &mut Writer) {
        w.u8(self.kind as u8).u16(self.inputs.len() as u16);
        for p in &self.inputs {
            w.point(p);
        }
        w.u16(self.outputs.len() as u16);
        for o in &self.outputs {
            w.point(&o.key).u64(o.value);
        }
    }

    /// What every signature on the command covers; doubles as the tx id.
    pub fn digest(&self) -> Digest {
        let mut w = Writer::new();
        w.raw(b"filia/cmd");
        self.body(&mut w);
        Digest(Sha256::digest(w.finish()).into())
    }

    pub fn tx_id(&self) -> [u8; 32] {
        self.digest().0
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.body(&mut w);
        w.u16(self.signatures.len() as u16);
        for s in &self.signatures {
            w.raw(&s.to_bytes());
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let cmd = Self::read(&mut r)?;
        r.finish()?;
        Ok(cmd)
    }

    fn read(r: &mut Reader) -> Result<Self, DecodeError> {
        let kind = CommandKind::from_u8(r.u8()?).ok_or(DecodeError::Invalid("command kind"))?;
        let n = r.u16()? as usize;
        let inputs = (0..n).map(|_| r.point()).collect::<Result<_, _>>()?;
        let n = r.u16()? as usize;
        let outputs = (0..n)
            .map(|_| {
                Ok(Output {
                    key: r.point()?,
                    value: r.u64()?,
                })
            })
            .collect::<Result<_, DecodeError>>()?;
        let n = r.u16()? as usize;
        let signatures = (0..n)
            .map(|_| EcdsaSignature::from_bytes(r.raw(64)?).map_err(|_| DecodeError::Invalid("signature")))
            .collect::<Result<_, _>>()?;
        Ok(Command {
            kind,
            inputs,
            outputs,
            signatures,
        })
    }
}

/// Verifier-signed proof that `value` was registered under `destination`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransferReceipt {
    pub tx_id: [u8; 32],
    pub value: u64,
    pub destination: GroupPoint,
    pub signature: EcdsaSignature,
}

pub const RECEIPT_LEN: usize = 32 + 8 + POINT_LEN + 64;

fn receipt_digest(tx_id: &[u8; 32], value: u64, destination: &GroupPoint) -> Digest {
    let mut h = Sha256::new();
    h.update(b"filia/receipt");
    h.update(tx_id);
    h.update(value.to_be_bytes());
    h.update(destination.to_bytes());
    Digest(h.finalize().into())
}

impl TransferReceipt {
    pub fn verify(&self, verifier_key: &GroupPoint) -> bool {
        ecdsa_verify(
            verifier_key,
            &receipt_digest(&self.tx_id, self.value, &self.destination),
            &self.signature,
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(RECEIPT_LEN);
        self.write(&mut w);
        w.finish()
    }

    fn write(&self, w: &mut Writer) {
        w.raw(&self.tx_id)
            .u64(self.value)
            .point(&self.destination)
            .raw(&self.signature.to_bytes());
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let out = Self::read(&mut r)?;
        r.finish()?;
        Ok(out)
    }

    fn read(r: &mut Reader) -> Result<Self, DecodeError> {
        Ok(TransferReceipt {
            tx_id: r.array()?,
            value: r.u64()?,
            destination: r.point()?,
            signature: EcdsaSignature::from_bytes(r.raw(64)?).map_err(|_| DecodeError::Invalid("signature"))?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Error)]
#[repr(u8)]
pub enum Rejection {
    #[error("input already consumed")]
    DoubleSpend = 1,
    #[error("unknown input note")]
    UnknownNote = 2,
    #[error("signature check failed")]
    AuthFail = 3,
    #[error("value not conserved")]
    ValueMismatch = 4,
    #[error("output key already registered")]
    DupKey = 5,
    #[error("restricted to the central bank")]
    Forbidden = 6,
    #[error("malformed command")]
    Malformed = 7,
}

impl Rejection {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => Rejection::DoubleSpend,
            2 => Rejection::UnknownNote,
            3 => Rejection::AuthFail,
            4 => Rejection::ValueMismatch,
            5 => Rejection::DupKey,
            6 => Rejection::Forbidden,
            7 => Rejection::Malformed,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoteStatus {
    Active,
    Consumed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Note {
    pub key: GroupPoint,
    pub value: u64,
    pub status: NoteStatus,
    consumed_at_ms: u64,
}

/// What the ledger knows about a key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoteQuery {
    Unknown,
    Active(u64),
    Consumed(u64),
    /// Consumed and garbage collected; only its key digest remains.
    Collected,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Totals {
    pub created: u64,
    pub destroyed: u64,
    pub active_value: u64,
    pub active_notes: u64,
}

impl Totals {
    /// Active value equals everything created minus everything destroyed.
    pub fn conserved(&self) -> bool {
        self.created.checked_sub(self.destroyed) == Some(self.active_value)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Applied {
    pub tx_id: [u8; 32],
    /// One receipt per output.
    pub receipts: Vec<TransferReceipt>,
}

fn key_digest(k: &KeyBytes) -> [u8; 32] {
    Sha256::digest(k).into()
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

#[derive(Default)]
struct Ledger {
    notes: HashMap<KeyBytes, Note>,
    tombstones: HashSet<[u8; 32]>,
    transactions: HashMap<[u8; 32], Vec<Output>>,
    totals: Totals,
}

impl Ledger {
    fn validate(&self, cmd: &Command, sigs_ok: bool) -> Result<(), Rejection> {
        let (ni, no) = (cmd.inputs.len(), cmd.outputs.len());
        let shape = match cmd.kind {
            CommandKind::Create => ni == 0 && no >= 1,
            CommandKind::Split => ni == 1 && no >= 2,
            CommandKind::Merge => ni >= 2 && no == 1,
            CommandKind::Switch => ni == 1 && no == 1,
            CommandKind::Destroy => ni >= 1 && no == 0,
        };
        let sig_count = if cmd.kind.needs_bank() { 1 } else { ni };
        if !shape || cmd.signatures.len() != sig_count {
            return Err(Rejection::Malformed);
        }
        if cmd.kind.needs_bank() && !sigs_ok {
            return Err(Rejection::Forbidden);
        }
        let mut seen = HashSet::new();
        let mut in_value: u128 = 0;
        for p in &cmd.inputs {
            let k = p.to_bytes();
            if !seen.insert(k) || self.tombstones.contains(&key_digest(&k)) {
                return Err(Rejection::DoubleSpend);
            }
            match self.notes.get(&k) {
                None => return Err(Rejection::UnknownNote),
                Some(n) if n.status == NoteStatus::Consumed => return Err(Rejection::DoubleSpend),
                Some(n) => in_value += n.value as u128,
            }
        }
        if !sigs_ok {
            return Err(Rejection::AuthFail);
        }
        let out_value: u128 = cmd.outputs.iter().map(|o| o.value as u128).sum();
        if cmd.outputs.iter().any(|o| o.value == 0) || out_value > u64::MAX as u128 {
            return Err(Rejection::ValueMismatch);
        }
        if !cmd.kind.needs_bank() && in_value != out_value {
            return Err(Rejection::ValueMismatch);
        }
        let mut seen = HashSet::new();
        for o in &cmd.outputs {
            let k = o.key.to_bytes();
            if !seen.insert(k)
                || o.key.is_identity()
                || self.notes.contains_key(&k)
                || self.tombstones.contains(&key_digest(&k))
            {
                return Err(Rejection::DupKey);
            }
        }
        Ok(())
    }

    /// Applies an already validated command.
    fn commit(&mut self, cmd: &Command, at_ms: u64) {
        for p in &cmd.inputs {
            let note = self.notes.get_mut(&p.to_bytes()).expect("validated input");
            note.status = NoteStatus::Consumed;
            note.consumed_at_ms = at_ms;
            self.totals.active_value -= note.value;
            self.totals.active_notes -= 1;
            if cmd.kind == CommandKind::Destroy {
                self.totals.destroyed += note.value;
            }
        }
        for o in &cmd.outputs {
            self.notes.insert(
                o.key.to_bytes(),
                Note {
                    key: o.key,
                    value: o.value,
                    status: NoteStatus::Active,
                    consumed_at_ms: 0,
                },
            );
            self.totals.active_value += o.value;
            self.totals.active_notes += 1;
            if cmd.kind == CommandKind::Create {
                self.totals.created += o.value;
            }
        }
        self.transactions.insert(cmd.tx_id(), cmd.outputs.clone());
    }

    fn gc(&mut self, now_ms: u64, age_ms: u64) -> usize {
        let cutoff = now_ms.saturating_sub(age_ms);
        let old: Vec<KeyBytes> = self
            .notes
            .iter()
            .filter(|(_, n)| n.status == NoteStatus::Consumed && n.consumed_at_ms <= cutoff)
            .map(|(k, _)| *k)
            .collect();
        for k in &old {
            self.notes.remove(k);
            self.tombstones.insert(key_digest(k));
        }
        old.len()
    }
}

const LOG_COMMAND: u8 = 1;
const LOG_GC: u8 = 2;

pub struct Verifier {
    key: KeyPair,
    bank: GroupPoint,
    ledger: RwLock<Ledger>,
    /// Serializes ledger mutations together with their log appends.
    writer: Mutex<()>,
    log: AppendLog,
    double_spends: AtomicU64,
    trace: Mutex<Option<Vec<Vec<u8>>>>,
}

impl Verifier {
    pub fn new(key: KeyPair, bank: GroupPoint) -> Self {
        Verifier {
            key,
            bank,
            ledger: RwLock::new(Ledger::default()),
            writer: Mutex::new(()),
            log: AppendLog::in_memory(),
            double_spends: AtomicU64::new(0),
            trace: Mutex::new(None),
        }
    }

    /// Opens a verifier with a durable command log at `path`, replaying it.
    pub fn open(key: KeyPair, bank: GroupPoint, path: impl AsRef<Path>) -> io::Result<Self> {
        let (log, records) = AppendLog::open(path)?;
        let mut ledger = Ledger::default();
        let bad = |e: DecodeError| io::Error::new(io::ErrorKind::InvalidData, e.to_string());
        for rec in records {
            let mut r = Reader::new(&rec);
            match r.u8().map_err(bad)? {
                LOG_COMMAND => {
                    let at = r.u64().map_err(bad)?;
                    let cmd = Command::read(&mut r).map_err(bad)?;
                    ledger.commit(&cmd, at);
                }
                LOG_GC => {
                    let now = r.u64().map_err(bad)?;
                    let age = r.u64().map_err(bad)?;
                    ledger.gc(now, age);
                }
                _ => return Err(io::Error::new(io::ErrorKind::InvalidData, "unknown log record")),
            }
        }
        Ok(Verifier {
            ledger: RwLock::new(ledger),
            log,
            ..Verifier::new(key, bank)
        })
    }

    pub fn public_key(&self) -> GroupPoint {
        self.key.public()
    }

    pub fn bank_key(&self) -> GroupPoint {
        self.bank
    }

    fn signatures_ok(&self, cmd: &Command) -> bool {
        let digest = cmd.digest();
        if cmd.kind.needs_bank() {
            return cmd.signatures.len() == 1 && ecdsa_verify(&self.bank, &digest, &cmd.signatures[0]);
        }
        cmd.inputs.len() == cmd.signatures.len()
            && cmd.inputs.iter().zip(&cmd.signatures).all(|(k, s)| ecdsa_verify(k, &digest, s))
    }

    fn issue(&self, tx_id: [u8; 32], outputs: &[Output]) -> Vec<TransferReceipt> {
        outputs
            .iter()
            .map(|o| TransferReceipt {
                tx_id,
                value: o.value,
                destination: o.key,
                signature: self.key.sign(&receipt_digest(&tx_id, o.value, &o.key), &mut OsRng),
            })
            .collect()
    }

    /// Validates and applies `cmd` atomically; a rejection changes nothing.
    pub fn apply(&self, cmd: &Command) -> Result<Applied, Rejection> {
        // Signatures depend only on the command, so they are checked before
        // taking the writer lock; the rejection order is unchanged.
        let sigs_ok = self.signatures_ok(cmd);
        let _w = self.writer.lock();
        let verdict = self.ledger.read().validate(cmd, sigs_ok);
        if let Err(e) = verdict {
            if e == Rejection::DoubleSpend {
                self.double_spends.fetch_add(1, Ordering::Relaxed);
            }
            return Err(e);
        }
        let at = now_ms();
        let mut w = Writer::new();
        w.u8(LOG_COMMAND).u64(at);
        w.raw(&cmd.encode());
        if let Err(e) = self.log.append(&w.finish()) {
            log::error!("verifier log append failed: {e}");
            return Err(Rejection::Malformed);
        }
        self.ledger.write().commit(cmd, at);
        let tx_id = cmd.tx_id();
        Ok(Applied {
            tx_id,
            receipts: self.issue(tx_id, &cmd.outputs),
        })
    }

    /// Switch of `input` to `destination` with receipt.
    pub fn register_transfer(
        &self,
        input: GroupPoint,
        value: u64,
        destination: GroupPoint,
        signature: EcdsaSignature,
    ) -> Result<TransferReceipt, Rejection> {
        let mut cmd = Command::transfer(input, value, destination);
        cmd.signatures.push(signature);
        Ok(self.apply(&cmd)?.receipts[0])
    }

    /// Drops consumed notes older than `age`, keeping a key digest for each.
    pub fn garbage_collect(&self, age: Duration) -> usize {
        let _w = self.writer.lock();
        let now = now_ms();
        let age_ms = age.as_millis() as u64;
        let mut w = Writer::new();
        w.u8(LOG_GC).u64(now).u64(age_ms);
        if let Err(e) = self.log.append(&w.finish()) {
            log::error!("verifier log append failed: {e}");
            return 0;
        }
        self.ledger.write().gc(now, age_ms)
    }

    pub fn note(&self, key: &GroupPoint) -> NoteQuery {
        let k = key.to_bytes();
        let ledger = self.ledger.read();
        match ledger.notes.get(&k) {
            Some(n) if n.status == NoteStatus::Active => NoteQuery::Active(n.value),
            Some(n) => NoteQuery::Consumed(n.value),
            None if ledger.tombstones.contains(&key_digest(&k)) => NoteQuery::Collected,
            None => NoteQuery::Unknown,
        }
    }

    /// Fresh receipts for an applied transaction.
    pub fn receipts(&self, tx_id: &[u8; 32]) -> Option<Vec<TransferReceipt>> {
        let outputs = self.ledger.read().transactions.get(tx_id).cloned()?;
        Some(self.issue(*tx_id, &outputs))
    }

    pub fn totals(&self) -> Totals {
        self.ledger.read().totals
    }

    /// Recomputes the totals from the notes and checks them against the
    /// running counters.
    pub fn audit(&self) -> Result<Totals, String> {
        let ledger = self.ledger.read();
        let active: Vec<&Note> = ledger.notes.values().filter(|n| n.status == NoteStatus::Active).collect();
        let value: u64 = active.iter().map(|n| n.value).sum();
        let t = ledger.totals;
        if value != t.active_value || active.len() as u64 != t.active_notes {
            return Err(format!("running totals {t:?} disagree with notes ({value}, {})", active.len()));
        }
        if !t.conserved() {
            return Err(format!("created {} - destroyed {} != active {}", t.created, t.destroyed, t.active_value));
        }
        Ok(t)
    }

    /// Active notes as (key, value), sorted by key encoding.
    pub fn active_notes(&self) -> Vec<(GroupPoint, u64)> {
        let ledger = self.ledger.read();
        let mut out: Vec<(KeyBytes, GroupPoint, u64)> = ledger
            .notes
            .iter()
            .filter(|(_, n)| n.status == NoteStatus::Active)
            .map(|(k, n)| (*k, n.key, n.value))
            .collect();
        out.sort_by_key(|a| a.0);
        out.into_iter().map(|(_, k, v)| (k, v)).collect()
    }

    pub fn double_spend_rejections(&self) -> u64 {
        self.double_spends.load(Ordering::Relaxed)
    }

    /// Starts recording every APPLY and TRANSFER request body.
    pub fn start_trace(&self) {
        *self.trace.lock() = Some(Vec::new());
    }

    pub fn take_trace(&self) -> Vec<Vec<u8>> {
        self.trace.lock().take().unwrap_or_default()
    }

    pub fn persisted_bytes(&self) -> io::Result<Vec<u8>> {
        self.log.raw_bytes()
    }
}

fn encode_applied(a: &Applied) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(OK).raw(&a.tx_id).u16(a.receipts.len() as u16);
    for r in &a.receipts {
        r.write(&mut w);
    }
    w.finish()
}

fn rejection(e: Rejection) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(e as u8).raw(e.to_string().as_bytes());
    w.finish()
}

impl Handler for Verifier {
    fn handle(&self, _caller: Caller, request: &[u8]) -> Vec<u8> {
        let Some((&verb, body)) = request.split_first() else {
            return rejection(Rejection::Malformed);
        };
        if matches!(verb, APPLY | TRANSFER) {
            if let Some(t) = self.trace.lock().as_mut() {
                t.push(request.to_vec());
            }
        }
        match verb {
            APPLY => match Command::decode(body) {
                Ok(cmd) => self.apply(&cmd).map_or_else(rejection, |a| encode_applied(&a)),
                Err(_) => rejection(Rejection::Malformed),
            },
            TRANSFER => {
                let mut r = Reader::new(body);
                let parsed = (|| -> Result<Command, DecodeError> {
                    let input = r.point()?;
                    let value = r.u64()?;
                    let destination = r.point()?;
                    let sig = EcdsaSignature::from_bytes(r.raw(64)?).map_err(|_| DecodeError::Invalid("signature"))?;
                    let mut cmd = Command::transfer(input, value, destination);
                    cmd.signatures.push(sig);
                    Ok(cmd)
                })();
                match parsed {
                    Ok(cmd) if r.remaining() == 0 => self.apply(&cmd).map_or_else(rejection, |a| encode_applied(&a)),
                    _ => rejection(Rejection::Malformed),
                }
            }
            GC => match body.try_into().map(u64::from_be_bytes) {
                Ok(age) => {
                    let n = self.garbage_collect(Duration::from_millis(age));
                    let mut w = Writer::new();
                    w.u8(OK).u64(n as u64);
                    w.finish()
                }
                Err(_) => rejection(Rejection::Malformed),
            },
            QUERY => {
                let mut r = Reader::new(body);
                let mut w = Writer::new();
                match r.u8() {
                    Ok(QUERY_NOTE) => match r.point() {
                        Ok(p) => {
                            let (tag, v) = match self.note(&p) {
                                NoteQuery::Unknown => (0, 0),
                                NoteQuery::Active(v) => (1, v),
                                NoteQuery::Consumed(v) => (2, v),
                                NoteQuery::Collected => (3, 0),
                            };
                            w.u8(OK).u8(tag).u64(v);
                        }
                        Err(_) => return rejection(Rejection::Malformed),
                    },
                    Ok(QUERY_RECEIPTS) => match r.array::<32>() {
                        Ok(tx) => match self.receipts(&tx) {
                            Some(rs) => {
                                return encode_applied(&Applied {
                                    tx_id: tx,
                                    receipts: rs,
                                })
                            }
                            None => return rejection(Rejection::UnknownNote),
                        },
                        Err(_) => return rejection(Rejection::Malformed),
                    },
                    Ok(QUERY_TOTALS) => {
                        let t = self.totals();
                        w.u8(OK).u64(t.created).u64(t.destroyed).u64(t.active_value).u64(t.active_notes);
                    }
                    _ => return rejection(Rejection::Malformed),
                }
                w.finish()
            }
            _ => rejection(Rejection::Malformed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerifierError {
    #[error("rejected: {0}")]
    Rejected(Rejection),
    #[error("rpc: {0}")]
    Rpc(#[from] RpcError),
    #[error("malformed verifier response: {0}")]
    Malformed(String),
}

/// Client of the verifier wire protocol.
#[derive(Clone)]
pub struct VerifierClient {
    channel: Arc<dyn Channel>,
}

impl VerifierClient {
    pub fn new(channel: Arc<dyn Channel>) -> Self {
        VerifierClient { channel }
    }

    fn call(&self, verb: u8, body: &[u8]) -> Result<Vec<u8>, VerifierError> {
        let mut req = Vec::with_capacity(1 + body.len());
        req.push(verb);
        req.extend_from_slice(body);
        let resp = self.channel.call(&req)?;
        match resp.split_first() {
            Some((&OK, rest)) => Ok(rest.to_vec()),
            Some((&code, _)) => Err(Rejection::from_u8(code)
                .map(VerifierError::Rejected)
                .unwrap_or_else(|| VerifierError::Malformed(format!("status {code}")))),
            None => Err(VerifierError::Malformed("empty response".into())),
        }
    }

    fn applied(bytes: &[u8]) -> Result<Applied, VerifierError> {
        let mut r = Reader::new(bytes);
        let parse = |r: &mut Reader| -> Result<Applied, DecodeError> {
            let tx_id = r.array()?;
            let n = r.u16()?;
            let receipts = (0..n).map(|_| TransferReceipt::read(r)).collect::<Result<_, _>>()?;
            Ok(Applied { tx_id, receipts })
        };
        let out = parse(&mut r).map_err(|e| VerifierError::Malformed(e.to_string()))?;
        r.finish().map_err(|e| VerifierError::Malformed(e.to_string()))?;
        Ok(out)
    }

    pub fn apply(&self, cmd: &Command) -> Result<Applied, VerifierError> {
        Self::applied(&self.call(APPLY, &cmd.encode())?)
    }

    pub fn register_transfer(
        &self,
        input: GroupPoint,
        value: u64,
        destination: GroupPoint,
        signature: &EcdsaSignature,
    ) -> Result<TransferReceipt, VerifierError> {
        let mut w = Writer::new();
        w.point(&input).u64(value).point(&destination).raw(&signature.to_bytes());
        let applied = Self::applied(&self.call(TRANSFER, &w.finish())?)?;
        applied
            .receipts
            .first()
            .copied()
            .ok_or_else(|| VerifierError::Malformed("no receipt".into()))
    }

    pub fn garbage_collect(&self, age: Duration) -> Result<u64, VerifierError> {
        let out = self.call(GC, &(age.as_millis() as u64).to_be_bytes())?;
        out.try_into()
            .map(u64::from_be_bytes)
            .map_err(|_| VerifierError::Malformed("gc count".into()))
    }

    pub fn note(&self, key: &GroupPoint) -> Result<NoteQuery, VerifierError> {
        let mut w = Writer::new();
        w.u8(QUERY_NOTE).point(key);
        let out = self.call(QUERY, &w.finish())?;
        let mut r = Reader::new(&out);
        let m = |e: DecodeError| VerifierError::Malformed(e.to_string());
        let tag = r.u8().map_err(m)?;
        let v = r.u64().map_err(m)?;
        Ok(match tag {
            1 => NoteQuery::Active(v),
            2 => NoteQuery::Consumed(v),
            3 => NoteQuery::Collected,
            _ => NoteQuery::Unknown,
        })
    }

    pub fn receipts(&self, tx_id: &[u8; 32]) -> Result<Vec<TransferReceipt>, VerifierError> {
        let mut w = Writer::new();
        w.u8(QUERY_RECEIPTS).raw(tx_id);
        Ok(Self::applied(&self.call(QUERY, &w.finish())?)?.receipts)
    }

    pub fn totals(&self) -> Result<Totals, VerifierError> {
        let out = self.call(QUERY, &[QUERY_TOTALS])?;
        let mut r = Reader::new(&out);
        let m = |e: DecodeError| VerifierError::Malformed(e.to_string());
        Ok(Totals {
            created: r.u64().map_err(m)?,
            destroyed: r.u64().map_err(m)?,
            active_value: r.u64().map_err(m)?,
            active_notes: r.u64().map_err(m)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn setup() -> (Verifier, KeyPair) {
        let bank = KeyPair::generate(&mut OsRng);
        (Verifier::new(KeyPair::generate(&mut OsRng), bank.public()), bank)
    }

    fn signed(mut cmd: Command, keys: &[&KeyPair]) -> Command {
        let d = cmd.digest();
        cmd.signatures = keys.iter().map(|k| k.sign(&d, &mut OsRng)).collect();
        cmd
    }

    fn create(v: &Verifier, bank: &KeyPair, value: u64) -> KeyPair {
        let owner = KeyPair::generate(&mut OsRng);
        let cmd = Command::new(CommandKind::Create, vec![], vec![Output { key: owner.public(), value }]);
        v.apply(&signed(cmd, &[bank])).unwrap();
        owner
    }

    #[test]
    fn split_conserves_and_replay_is_a_double_spend() {
        let (v, bank) = setup();
        let owner = create(&v, &bank, 100);
        let (a, b) = (KeyPair::generate(&mut OsRng), KeyPair::generate(&mut OsRng));
        let split = signed(
            Command::new(
                CommandKind::Split,
                vec![owner.public()],
                vec![
                    Output { key: a.public(), value: 60 },
                    Output { key: b.public(), value: 40 },
                ],
            ),
            &[&owner],
        );
        let applied = v.apply(&split).unwrap();
        assert_eq!(applied.receipts.len(), 2);
        assert!(applied.receipts.iter().all(|r| r.verify(&v.public_key())));
        assert_eq!(v.apply(&split), Err(Rejection::DoubleSpend));
        assert_eq!(v.double_spend_rejections(), 1);
        assert_eq!(v.audit().unwrap().active_value, 100);
    }

    #[test]
    fn merge_needs_every_input_signature() {
        let (v, bank) = setup();
        let a = create(&v, &bank, 60);
        let b = create(&v, &bank, 40);
        let c = KeyPair::generate(&mut OsRng);
        let merge = Command::new(
            CommandKind::Merge,
            vec![a.public(), b.public()],
            vec![Output { key: c.public(), value: 100 }],
        );
        let mut half = signed(merge.clone(), &[&a, &a]);
        assert_eq!(v.apply(&half), Err(Rejection::AuthFail));
        half.signatures.pop();
        assert_eq!(v.apply(&half), Err(Rejection::Malformed));
        v.apply(&signed(merge, &[&a, &b])).unwrap();
        assert_eq!(v.note(&c.public()), NoteQuery::Active(100));
    }

    #[test]
    fn only_the_bank_creates_and_destroys() {
        let (v, bank) = setup();
        let mallory = KeyPair::generate(&mut OsRng);
        let cmd = Command::new(CommandKind::Create, vec![], vec![Output { key: mallory.public(), value: 5 }]);
        assert_eq!(v.apply(&signed(cmd, &[&mallory])), Err(Rejection::Forbidden));
        let note = create(&v, &bank, 7);
        let destroy = Command::new(CommandKind::Destroy, vec![note.public()], vec![]);
        assert_eq!(v.apply(&signed(destroy.clone(), &[&note])), Err(Rejection::Forbidden));
        v.apply(&signed(destroy, &[&bank])).unwrap();
        let t = v.audit().unwrap();
        assert_eq!((t.created, t.destroyed, t.active_value), (7, 7, 0));
    }

    #[test]
    fn transfer_checks_value_and_destination() {
        let (v, bank) = setup();
        let owner = create(&v, &bank, 50);
        let other = create(&v, &bank, 10);
        let dest = KeyPair::generate(&mut OsRng).public();
        let sig = |value: u64, d: GroupPoint| owner.sign(&Command::transfer(owner.public(), value, d).digest(), &mut OsRng);
        assert_eq!(
            v.register_transfer(owner.public(), 60, dest, sig(60, dest)),
            Err(Rejection::ValueMismatch)
        );
        assert_eq!(
            v.register_transfer(owner.public(), 50, other.public(), sig(50, other.public())),
            Err(Rejection::DupKey)
        );
        let receipt = v.register_transfer(owner.public(), 50, dest, sig(50, dest)).unwrap();
        assert!(receipt.verify(&v.public_key()));
        assert!(!receipt.verify(&bank.public()));
        assert_eq!(receipt.destination, dest);
        assert_eq!(v.receipts(&receipt.tx_id).unwrap()[0].value, 50);
    }

    #[test]
    fn gc_keeps_double_spend_detection() {
        let (v, bank) = setup();
        let owner = create(&v, &bank, 9);
        let live = create(&v, &bank, 3);
        let dest = KeyPair::generate(&mut OsRng);
        let cmd = signed(Command::transfer(owner.public(), 9, dest.public()), &[&owner]);
        v.apply(&cmd).unwrap();
        assert_eq!(v.garbage_collect(Duration::from_secs(3600)), 0);
        assert_eq!(v.garbage_collect(Duration::ZERO), 1);
        assert_eq!(v.note(&owner.public()), NoteQuery::Collected);
        assert_eq!(v.note(&live.public()), NoteQuery::Active(3));
        assert_eq!(v.apply(&cmd), Err(Rejection::DoubleSpend));
        let back = signed(Command::transfer(dest.public(), 9, owner.public()), &[&dest]);
        assert_eq!(v.apply(&back), Err(Rejection::DupKey));
        v.audit().unwrap();
    }

    #[test]
    fn log_replay_restores_the_ledger() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("verifier.log");
        let key = KeyPair::generate(&mut OsRng);
        let bank = KeyPair::generate(&mut OsRng);
        let (owner, dest) = {
            let v = Verifier::open(key.clone(), bank.public(), &path).unwrap();
            let owner = create(&v, &bank, 20);
            let dest = KeyPair::generate(&mut OsRng);
            v.apply(&signed(Command::transfer(owner.public(), 20, dest.public()), &[&owner]))
                .unwrap();
            v.garbage_collect(Duration::ZERO);
            (owner, dest)
        };
        let v = Verifier::open(key, bank.public(), &path).unwrap();
        assert_eq!(v.note(&owner.public()), NoteQuery::Collected);
        assert_eq!(v.note(&dest.public()), NoteQuery::Active(20));
        assert_eq!(v.audit().unwrap().created, 20);
    }

    #[test]
    fn wire_client_roundtrips() {
        let (v, bank) = setup();
        let v = Arc::new(v);
        let client = VerifierClient::new(Arc::new(crate::wire::LocalChannel::new(v.clone(), Caller::ANONYMOUS)));
        let owner = KeyPair::generate(&mut OsRng);
        let cmd = signed(
            Command::new(CommandKind::Create, vec![], vec![Output { key: owner.public(), value: 4 }]),
            &[&bank],
        );
        client.apply(&cmd).unwrap();
        assert_eq!(client.apply(&cmd), Err(VerifierError::Rejected(Rejection::DupKey)));
        let dest = KeyPair::generate(&mut OsRng).public();
        let sig = owner.sign(&Command::transfer(owner.public(), 4, dest).digest(), &mut OsRng);
        let receipt = client.register_transfer(owner.public(), 4, dest, &sig).unwrap();
        assert_eq!(client.receipts(&receipt.tx_id).unwrap()[0].destination, dest);
        assert_eq!(client.note(&dest).unwrap(), NoteQuery::Active(4));
        assert_eq!(client.garbage_collect(Duration::ZERO).unwrap(), 1);
        assert_eq!(client.totals().unwrap().active_value, 4);
        assert_eq!(
            VerifierClient::new(Arc::new(crate::wire::LocalChannel::new(v, Caller::ANONYMOUS)))
                .call(0x7F, &[]),
            Err(VerifierError::Rejected(Rejection::Malformed))
        );
    }

    proptest! {
        #[test]
        fn command_encoding_roundtrips(kind in 1u8..=5, ins in 0usize..4, outs in proptest::collection::vec(1u64..1000, 0..4), sigs in 0usize..3) {
            let pts: Vec<GroupPoint> = (0..ins.max(outs.len())).map(|i| GroupPoint::mul_base(&kmn_core::ec::Scalar::from_u64(i as u64 + 1))).collect();
            let sig = EcdsaSignature::new(kmn_core::ec::Scalar::from_u64(2), kmn_core::ec::Scalar::from_u64(3)).unwrap();
            let cmd = Command {
                kind: CommandKind::from_u8(kind).unwrap(),
                inputs: pts[..ins].to_vec(),
                outputs: outs.iter().enumerate().map(|(i, v)| Output { key: pts[i], value: *v }).collect(),
                signatures: vec![sig; sigs],
            };
            prop_assert_eq!(Command::decode(&cmd.encode()).unwrap(), cmd);
        }
    }
}
