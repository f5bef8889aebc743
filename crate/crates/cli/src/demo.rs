//! `kmn demo-transfer`: one transfer with its timed steps, either against a
//! running deployment or on an in-process network.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Duration;

use kmn_core::ec::{GroupPoint, KeyPair};
use kmn_core::paillier::PaillierProfile;
use kmn_service::pp::{FspId, Step};
use kmn_service::wire::TcpChannel;
use kmn_service::{FspNetwork, FspOptions, KmnOptions, PoolConfig, PpClient, SignPath, TransferOutcome};

use crate::error::CliError;
use crate::topology::{Materials, TopologyConfig};

pub struct DemoRequest {
    pub from: FspId,
    pub to: FspId,
    pub value: u64,
}

/// `①`…`⑨` for the remote flow, `·` for local bookkeeping steps.
fn marker(number: u8) -> char {
    match number {
        1..=20 => char::from_u32(0x2460 + number as u32 - 1).expect("circled digit"),
        _ => '·',
    }
}

fn step_line(step: &Step) -> String {
    format!(" {} {:<52} {:>9.2} ms", marker(step.number), step.label, step.millis)
}

pub fn transcript(req: &DemoRequest, outcome: &TransferOutcome, verifier_key: &GroupPoint, balances: (u64, u64)) -> String {
    let mut s = String::new();
    let kind = if outcome.remote { "remote" } else { "local" };
    let _ = writeln!(s, "{kind} transfer of {} from FSP {} to FSP {}", req.value, req.from, req.to);
    for step in &outcome.steps {
        let _ = writeln!(s, "{}", step_line(step));
    }
    if let Some(r) = &outcome.receipt {
        let ok = if r.verify(verifier_key) { "verifies" } else { "DOES NOT VERIFY" };
        let _ = writeln!(s, "receipt {} for {} {ok} under the verifier key", hex::encode(&r.tx_id[..8]), r.value);
    }
    if let Some(path) = outcome.step9_path {
        let path = match path {
            SignPath::Online => "online, from a presignature",
            SignPath::Interactive => "interactive",
            SignPath::Local => "single signer",
        };
        let _ = writeln!(s, "final switch accepted by the verifier, signed {path}");
    }
    let total: f64 = outcome.steps.iter().map(|s| s.millis).sum();
    let _ = writeln!(s, "total {total:.2} ms; balances: sender {}, recipient {}", balances.0, balances.1);
    s
}

fn check(req: &DemoRequest) -> Result<(), CliError> {
    if req.value == 0 {
        return Err(CliError::Config("transfer value must be positive".into()));
    }
    Ok(())
}

fn run(req: &DemoRequest, sender: &PpClient, recipient: &PpClient, verifier_key: &GroupPoint) -> Result<String, CliError> {
    let from = sender.create_wallet("demo-sender")?;
    let to = recipient.create_wallet("demo-recipient")?;
    sender.fund(from, req.value.saturating_mul(2))?;
    let outcome = sender.transfer_traced(from, req.to, to, req.value)?;
    let balances = (sender.balance(from)?, recipient.balance(to)?);
    Ok(transcript(req, &outcome, verifier_key, balances))
}

/// Against the daemons of `topo`, which must be up.
pub fn against(topo: &TopologyConfig, req: &DemoRequest) -> Result<String, CliError> {
    check(req)?;
    let client = |id: FspId| -> Result<PpClient, CliError> {
        let f = topo.fsp(id).ok_or_else(|| CliError::Config(format!("no FSP {id} in the topology")))?;
        Ok(PpClient::new(Arc::new(TcpChannel::new(f.pp_client, Duration::from_secs(120)))))
    };
    let materials = Materials::load(topo)?
        .ok_or_else(|| CliError::Network(format!("no deployment state in {}; run `kmn deploy up` first", topo.data_dir.display())))?;
    let verifier_key = KeyPair::from_secret(materials.verifier_key).map_err(CliError::config)?.public();
    run(req, &client(req.from)?, &client(req.to)?, &verifier_key)
}

/// On a fresh in-process network of two FSPs with (2, 3) KMNs.
pub fn in_process(req: &DemoRequest, paillier: PaillierProfile) -> Result<String, CliError> {
    check(req)?;
    let opts = FspOptions {
        fsps: vec![1, 2],
        kmn: KmnOptions {
            paillier,
            pool: PoolConfig {
                keys: 2,
                ..PoolConfig::default()
            },
            ..KmnOptions::default()
        },
        ..FspOptions::default()
    };
    if !opts.fsps.contains(&req.from) || !opts.fsps.contains(&req.to) {
        return Err(CliError::Config("the in-process demo has FSPs 1 and 2".into()));
    }
    let net = FspNetwork::start(opts)?;
    run(req, &net.client(req.from), &net.client(req.to), &net.verifier().public_key())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markers() {
        assert_eq!(marker(1), '①');
        assert_eq!(marker(9), '⑨');
        assert_eq!(marker(0), '·');
    }

    #[test]
    fn zero_value_is_rejected_before_any_work() {
        let req = DemoRequest { from: 1, to: 2, value: 0 };
        let err = in_process(&req, PaillierProfile::fast_test()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn in_process_remote_demo_prints_nine_steps() {
        let req = DemoRequest { from: 1, to: 2, value: 7 };
        let out = in_process(&req, PaillierProfile::fast_test()).unwrap();
        for n in 1..=9 {
            assert!(out.contains(marker(n)), "step {n} missing:\n{out}");
        }
        assert!(out.contains("verifies under the verifier key"), "{out}");
        assert!(out.contains("balances: sender 7, recipient 7"), "{out}");
    }

    #[test]
    fn local_demo_has_no_remote_steps() {
        let req = DemoRequest { from: 1, to: 1, value: 3 };
        let out = in_process(&req, PaillierProfile::fast_test()).unwrap();
        assert!(out.starts_with("local transfer"), "{out}");
        assert!(!out.contains('①'), "{out}");
    }
}
