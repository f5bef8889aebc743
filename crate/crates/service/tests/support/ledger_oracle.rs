//! Randomized ledger commands replayed against the verifier and against a
//! plain set model of the ledger.

use std::collections::{HashMap, HashSet};
use std::time::Duration;

use kmn_core::ec::{GroupPoint, KeyPair};
use kmn_service::{Command, CommandKind, Output, Verifier};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Key = [u8; 33];

/// The model: live notes and every key ever spent.
#[derive(Default)]
pub struct SetOracle {
    pub active: HashMap<Key, u64>,
    spent: HashSet<Key>,
}

impl SetOracle {
    /// `auth` is whether the generator produced a complete, valid signature set.
    pub fn decide(&self, cmd: &Command, auth: bool) -> bool {
        let ins: Vec<Key> = cmd.inputs.iter().map(|p| p.to_bytes()).collect();
        let outs: Vec<Key> = cmd.outputs.iter().map(|o| o.key.to_bytes()).collect();
        let shape = match cmd.kind {
            CommandKind::Create => ins.is_empty() && !outs.is_empty(),
            CommandKind::Split => ins.len() == 1 && outs.len() >= 2,
            CommandKind::Merge => ins.len() >= 2 && outs.len() == 1,
            CommandKind::Switch => ins.len() == 1 && outs.len() == 1,
            CommandKind::Destroy => !ins.is_empty() && outs.is_empty(),
        };
        let distinct = |v: &[Key]| v.iter().collect::<HashSet<_>>().len() == v.len();
        let inputs_live = ins.iter().all(|k| self.active.contains_key(k));
        let outputs_fresh = outs
            .iter()
            .all(|k| !self.active.contains_key(k) && !self.spent.contains(k));
        let positive = cmd.outputs.iter().all(|o| o.value > 0);
        let sum_in: u128 = ins.iter().filter_map(|k| self.active.get(k)).map(|v| *v as u128).sum();
        let sum_out: u128 = cmd.outputs.iter().map(|o| o.value as u128).sum();
        let conserved = matches!(cmd.kind, CommandKind::Create | CommandKind::Destroy) || sum_in == sum_out;
        shape && auth && distinct(&ins) && distinct(&outs) && inputs_live && outputs_fresh && positive && conserved
    }

    pub fn apply(&mut self, cmd: &Command) {
        for p in &cmd.inputs {
            let k = p.to_bytes();
            self.active.remove(&k);
            self.spent.insert(k);
        }
        for o in &cmd.outputs {
            self.active.insert(o.key.to_bytes(), o.value);
        }
    }
}

pub struct FuzzReport {
    pub commands: usize,
    pub accepted: usize,
    pub mismatches: Vec<String>,
    pub final_sets_equal: bool,
}

struct Generator {
    rng: StdRng,
    bank: KeyPair,
    keys: Vec<KeyPair>,
    index: HashMap<Key, usize>,
}

impl Generator {
    fn fresh(&mut self) -> usize {
        let k = KeyPair::generate(&mut self.rng);
        self.index.insert(k.public().to_bytes(), self.keys.len());
        self.keys.push(k);
        self.keys.len() - 1
    }

    fn any_key(&mut self) -> usize {
        if self.keys.is_empty() || self.rng.gen_bool(0.4) {
            self.fresh()
        } else {
            self.rng.gen_range(0..self.keys.len())
        }
    }

    fn input(&mut self, oracle: &SetOracle) -> usize {
        let live: Vec<usize> = oracle.active.keys().map(|k| self.index[k]).collect();
        if !live.is_empty() && self.rng.gen_bool(0.8) {
            let mut live = live;
            live.sort_unstable();
            live[self.rng.gen_range(0..live.len())]
        } else {
            self.any_key()
        }
    }

    fn command(&mut self, oracle: &SetOracle) -> (Command, bool) {
        let kind = match self.rng.gen_range(0..100) {
            0..=14 => CommandKind::Create,
            15..=39 => CommandKind::Split,
            40..=59 => CommandKind::Merge,
            60..=89 => CommandKind::Switch,
            _ => CommandKind::Destroy,
        };
        let (mut n_in, mut n_out) = match kind {
            CommandKind::Create => (0, self.rng.gen_range(1..=3)),
            CommandKind::Split => (1, self.rng.gen_range(2..=3)),
            CommandKind::Merge => (self.rng.gen_range(2..=3), 1),
            CommandKind::Switch => (1, 1),
            CommandKind::Destroy => (self.rng.gen_range(1..=2), 0),
        };
        if self.rng.gen_bool(0.03) {
            n_in += 1;
        }
        if self.rng.gen_bool(0.03) && n_out > 0 {
            n_out -= 1;
        }
        let inputs: Vec<usize> = (0..n_in).map(|_| self.input(oracle)).collect();
        let total: u64 = inputs
            .iter()
            .filter_map(|i| oracle.active.get(&self.keys[*i].public().to_bytes()))
            .sum();
        let mut values = vec![0u64; n_out];
        if n_out > 0 {
            let mut left = if kind == CommandKind::Create || total == 0 {
                self.rng.gen_range(1..=1000)
            } else {
                total
            };
            for v in values.iter_mut().take(n_out - 1) {
                let take = if left > 1 { self.rng.gen_range(1..left) } else { 0 };
                *v = take;
                left -= take;
            }
            values[n_out - 1] = left;
            if self.rng.gen_bool(0.05) {
                values[0] = values[0].wrapping_add(1);
            }
        }
        let outputs = values
            .into_iter()
            .map(|value| {
                let k = self.any_key();
                Output {
                    key: self.keys[k].public(),
                    value,
                }
            })
            .collect();
        let mut cmd = Command::new(kind, inputs.iter().map(|i| self.keys[*i].public()).collect(), outputs);
        let digest = cmd.digest();
        let mut auth = true;
        let bank_kind = matches!(kind, CommandKind::Create | CommandKind::Destroy);
        let signers: Vec<KeyPair> = if bank_kind {
            vec![self.bank.clone()]
        } else {
            inputs.iter().map(|i| self.keys[*i].clone()).collect()
        };
        for s in signers {
            let signer = if self.rng.gen_bool(0.04) {
                auth = false;
                let k = self.any_key();
                self.keys[k].clone()
            } else {
                s
            };
            cmd.signatures.push(signer.sign(&digest, &mut self.rng));
        }
        if !bank_kind && n_in > 0 && self.rng.gen_bool(0.02) {
            cmd.signatures.pop();
            auth = false;
        }
        // A wrong signer may happen to be the right key.
        if !auth && !bank_kind {
            auth = cmd.signatures.len() == cmd.inputs.len()
                && cmd
                    .inputs
                    .iter()
                    .zip(&cmd.signatures)
                    .all(|(k, s)| kmn_core::ec::ecdsa_verify(k, &digest, s));
        }
        if !auth && bank_kind {
            auth = kmn_core::ec::ecdsa_verify(&self.bank.public(), &digest, &cmd.signatures[0]);
        }
        (cmd, auth)
    }
}

pub fn run(seed: u64, commands: usize) -> FuzzReport {
    let mut rng = StdRng::seed_from_u64(seed);
    let bank = KeyPair::generate(&mut rng);
    let verifier = Verifier::new(KeyPair::generate(&mut rng), bank.public());
    let mut gen = Generator {
        rng,
        bank,
        keys: Vec::new(),
        index: HashMap::new(),
    };
    let mut oracle = SetOracle::default();
    let mut accepted = 0;
    let mut mismatches = Vec::new();
    for i in 0..commands {
        if gen.rng.gen_bool(0.01) {
            verifier.garbage_collect(Duration::ZERO);
        }
        let (cmd, auth) = gen.command(&oracle);
        let expect = oracle.decide(&cmd, auth);
        let got = verifier.apply(&cmd);
        if got.is_ok() != expect {
            mismatches.push(format!("command {i} ({:?}): oracle {expect}, verifier {got:?}", cmd.kind));
        }
        if expect {
            oracle.apply(&cmd);
            accepted += 1;
        }
    }
    let ours: HashSet<(Key, u64)> = oracle.active.iter().map(|(k, v)| (*k, *v)).collect();
    let theirs: HashSet<(Key, u64)> = verifier
        .active_notes()
        .into_iter()
        .map(|(k, v): (GroupPoint, u64)| (k.to_bytes(), v))
        .collect();
    let conserved = verifier.audit().is_ok();
    FuzzReport {
        commands,
        accepted,
        mismatches,
        final_sets_equal: ours == theirs && conserved,
    }
}
