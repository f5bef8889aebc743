//! Acceptance run: one pass/fail line per criterion, non-zero exit if any
//! fails.
//!
//! Knobs (environment):
//! - `KMN_ACCEPT_PAILLIER_BITS` (default 1024)
//! - `KMN_ACCEPT_ITERATIONS`: keygen→presign→sign chains per point for
//!   criteria 1 and 2 (default 100)
//! - `KMN_ACCEPT_SWEEP_ITERATIONS`: iterations per point of the scaling
//!   sweep, criteria 5 and 6 (default 30)
//! - `KMN_ACCEPT_LOAD_SECS`: window per load level, criterion 7 (default 10)
//! - `KMN_ACCEPT_ONLY`: comma-separated criterion numbers to run

#[path = "../../service/tests/support/ledger_oracle.rs"]
mod ledger_oracle;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use kmn_bench::load::quick_load_config;
use kmn_bench::{run_crypto_sweep, run_load_test, PhaseKind, ScenarioConfig, Step, UseCase};
use kmn_core::cluster::{cached_paillier, ClusterOptions, LocalCluster, Session};
use kmn_core::ec::{ecdsa_verify, Digest, EcdsaSignature, GroupPoint, Scalar};
use kmn_core::paillier::PaillierProfile;
use kmn_core::protocol::mta;
use kmn_core::{FaultKind, FaultPlan, PartyIndex, Profile};
use kmn_service::{FspNetwork, FspOptions, KeyService, KmnDeployment, KmnOptions, PoolConfig, SignerKind};
use num_bigint::BigUint;
use num_traits::Num;
use p256::ecdsa::signature::hazmat::PrehashVerifier;
use rand::rngs::{OsRng, StdRng};
use rand::{Rng, SeedableRng};

type Verdict = Result<String, String>;

fn env_or<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn paillier() -> PaillierProfile {
    let bits: u64 = env_or("KMN_ACCEPT_PAILLIER_BITS", 1024);
    PaillierProfile {
        bits,
        allow_unsafe: bits < 2048,
    }
}

fn check(ok: bool, what: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what.into())
    }
}

/// Independent ECDSA verification through the `p256` crate.
fn p256_verifies(pk: &GroupPoint, digest: &Digest, sig: &EcdsaSignature) -> bool {
    let Ok(vk) = p256::ecdsa::VerifyingKey::from_sec1_bytes(&pk.to_bytes()) else {
        return false;
    };
    let Ok(sig) = p256::ecdsa::Signature::from_slice(&sig.to_bytes()) else {
        return false;
    };
    vk.verify_prehash(&digest.0, &sig).is_ok()
}

fn cluster(n: u16, profile: Profile) -> LocalCluster {
    let mut opts = ClusterOptions::fast(n);
    opts.paillier = paillier();
    opts.profile = profile;
    opts.transport.round_timeout = Duration::from_secs(3);
    LocalCluster::new(opts).expect("cluster")
}

fn rounds<T>(session: &Session<T>) -> BTreeSet<u8> {
    session.stats.values().map(|s| s.rounds).collect()
}

/// Criteria 1 and 2 share one run of keygen→presign→sign chains.
struct ChainRun {
    chains: usize,
    verified: usize,
    failures: Vec<String>,
    keygen_rounds: BTreeSet<u8>,
    presign_rounds: BTreeSet<u8>,
    sign_rounds: BTreeSet<u8>,
}

fn run_chains() -> ChainRun {
    let iterations: usize = env_or("KMN_ACCEPT_ITERATIONS", 100);
    let mut run = ChainRun {
        chains: 0,
        verified: 0,
        failures: Vec::new(),
        keygen_rounds: BTreeSet::new(),
        presign_rounds: BTreeSet::new(),
        sign_rounds: BTreeSet::new(),
    };
    let mut rng = StdRng::seed_from_u64(7);
    for (t, n) in [(2u16, 3u16), (3, 5), (5, 9)] {
        let c = cluster(n, Profile::Production);
        let signers: Vec<PartyIndex> = (1..=t).collect();
        for i in 0..iterations {
            run.chains += 1;
            let keygen = c.keygen(t);
            run.keygen_rounds.extend(rounds(&keygen));
            let Ok(keys) = keygen.into_ok() else {
                run.failures.push(format!("({t},{n}) #{i}: keygen aborted"));
                continue;
            };
            let pk = keys[&1].public_key;
            let presign = c.presign(&keys, &signers);
            run.presign_rounds.extend(rounds(&presign));
            let Ok(presigs) = presign.into_ok() else {
                run.failures.push(format!("({t},{n}) #{i}: presign aborted"));
                continue;
            };
            let digest = Digest(rng.gen());
            let (sign, _) = c.sign(presigs, &pk, &digest);
            run.sign_rounds.extend(rounds(&sign));
            match sign.into_ok() {
                Ok(sigs) if sigs.len() == signers.len() => {
                    let good = sigs
                        .values()
                        .all(|s| ecdsa_verify(&pk, &digest, s) && p256_verifies(&pk, &digest, s));
                    if good {
                        run.verified += 1;
                    } else {
                        run.failures.push(format!("({t},{n}) #{i}: signature does not verify"));
                    }
                }
                _ => run.failures.push(format!("({t},{n}) #{i}: sign aborted")),
            }
        }
    }
    run
}

fn criterion_1(run: &ChainRun) -> Verdict {
    check(
        run.failures.is_empty() && run.verified == run.chains,
        format!("{}/{} verified; first failures: {:?}", run.verified, run.chains, &run.failures[..run.failures.len().min(3)]),
    )?;
    Ok(format!("{} signatures verified under both verifiers", run.verified))
}

fn criterion_2(run: &ChainRun) -> Verdict {
    let want = |s: &BTreeSet<u8>, r: u8| s.len() == 1 && s.contains(&r);
    check(
        want(&run.keygen_rounds, 3) && want(&run.presign_rounds, 3) && want(&run.sign_rounds, 1),
        format!(
            "rounds seen: keygen {:?}, presign {:?}, sign {:?}",
            run.keygen_rounds, run.presign_rounds, run.sign_rounds
        ),
    )?;
    Ok(format!("keygen 3, presign 3, sign 1 over {} chains", run.chains))
}

/// The P-256 group order, written out independently of the library.
fn group_order() -> BigUint {
    BigUint::from_str_radix("ffffffff00000000ffffffffffffffffbce6faada7179e84f3b9cac2fc632551", 16).unwrap()
}

fn big(s: &Scalar) -> BigUint {
    BigUint::from_bytes_be(&s.to_bytes())
}

fn criterion_3() -> Verdict {
    let q = group_order();
    let key = cached_paillier(1, paillier()).map_err(|e| e.to_string())?;
    let mut rng = StdRng::seed_from_u64(3);
    let mut mismatches = 0;
    for i in 0..1000 {
        let (a, b) = match i {
            0 => (-Scalar::ONE, -Scalar::ONE),
            1 => (Scalar::ZERO, Scalar::random(&mut rng)),
            _ => (Scalar::random(&mut rng), Scalar::random(&mut rng)),
        };
        let enc_a = key.encrypt(&mta::scalar_to_big(&a), &mut rng).map_err(|e| e.to_string())?;
        let resp = mta::respond(key.public(), &enc_a, &b, &mut rng).map_err(|e| e.to_string())?;
        let alpha = mta::finish(&key, &resp.ciphertext).map_err(|e| e.to_string())?;
        let lhs = (big(&alpha) + big(&resp.beta)) % &q;
        let rhs = (big(&a) * big(&b)) % &q;
        if lhs != rhs {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches} of 1000 pairs differ"))?;
    Ok("1000 pairs match a·b mod q".into())
}

fn criterion_4() -> Verdict {
    let mut opts = KmnOptions::fast(2, 3);
    opts.paillier = paillier();
    let recipient = KmnDeployment::start(opts.clone()).map_err(|e| e.to_string())?;
    let sender = KmnDeployment::start(opts).map_err(|e| e.to_string())?;
    let (rc, sc) = (
        recipient.client(kmn_service::Caller(1)).map_err(|e| e.to_string())?,
        sender.client(kmn_service::Caller(1)).map_err(|e| e.to_string())?,
    );
    let digest = Digest::random(&mut OsRng);

    // Generated R1: the combined key signs under R1 + R2.
    let (uuid1, r1_pub) = rc.generate().map_err(|e| e.to_string())?;
    let (uuid2, r2_pub) = sc.generate().map_err(|e| e.to_string())?;
    let r2 = sc.export(uuid2).map_err(|e| e.to_string())?;
    check(GroupPoint::mul_base(&r2) == r2_pub, "exported r2 does not match R2")?;
    let (combined, rc_pub) = rc.add(uuid1, r2).map_err(|e| e.to_string())?;
    check(rc_pub == r1_pub + r2_pub, "combined public key differs from R1 + R2")?;
    let (sig, _) = rc.sign(combined, &digest).map_err(|e| e.to_string())?;
    let target = r1_pub + r2_pub;
    check(
        ecdsa_verify(&target, &digest, &sig) && p256_verifies(&target, &digest, &sig),
        "signature under the combined key does not verify against R1 + R2",
    )?;
    let exported = rc.export(combined).map_err(|e| e.to_string())?;
    check(GroupPoint::mul_base(&exported) == target, "exported combined key is not the discrete log of R1 + R2")?;

    // Imported r1, so the exported scalar can be compared directly.
    let r1 = Scalar::random_nonzero(&mut OsRng);
    let (imported, _) = rc.import(r1).map_err(|e| e.to_string())?;
    let (combined, _) = rc.add(imported, r2).map_err(|e| e.to_string())?;
    let (sig, _) = rc.sign(combined, &digest).map_err(|e| e.to_string())?;
    let sum_pub = GroupPoint::mul_base(&r1) + r2_pub;
    check(p256_verifies(&sum_pub, &digest, &sig), "imported-key signature does not verify")?;
    let exported = rc.export(combined).map_err(|e| e.to_string())?;
    check(big(&exported) == (big(&r1) + big(&r2)) % group_order(), "export differs from r1 + r2 mod q")?;
    Ok("signature verifies under R1 + R2 and export equals r1 + r2 mod q".into())
}

fn scaling_sweep() -> Result<kmn_bench::CryptoReport, String> {
    let config = ScenarioConfig {
        id: "acceptance".into(),
        phase: PhaseKind::Crypto,
        sweep: vec![(2, 3), (3, 5), (5, 9), (8, 13), (12, 20), (3, 9), (3, 13), (3, 20)],
        iterations: env_or("KMN_ACCEPT_SWEEP_ITERATIONS", 30),
        paillier: paillier(),
        ..ScenarioConfig::default()
    };
    run_crypto_sweep(&config).map_err(|e| e.to_string())
}

fn criterion_5(report: &kmn_bench::CryptoReport) -> Verdict {
    check(report.errors() == 0, format!("{} aborted sessions in the sweep", report.errors()))?;
    let diagonal = [(2u16, 3u16), (3, 5), (5, 9), (8, 13), (12, 20)];
    let (xs, ys): (Vec<f64>, Vec<f64>) = diagonal
        .iter()
        .map(|&(t, n)| (n as f64, report.get(t, n, Step::Dkg).unwrap().compute().mean))
        .unzip();
    let fit = kmn_bench::fit_quadratic(&xs, &ys).ok_or("no fit")?;
    let median = |n: u16, step: Step| report.get(3, n, step).unwrap().compute().median;
    let spread = |step: Step| {
        let v: Vec<f64> = [5u16, 9, 13, 20].iter().map(|&n| median(n, step)).collect();
        kmn_bench::stats::relative_spread(&v)
    };
    let (presign, sign) = (spread(Step::Presign), spread(Step::Sign));
    let ms = |step: Step| -> Vec<String> {
        [5u16, 9, 13, 20].iter().map(|&n| format!("{:.2}", median(n, step) / 1e6)).collect()
    };
    let detail = format!(
        "dkg R² = {:.4}; at t = 3 over n ∈ {{5,9,13,20}}: presign spread {:.1}% (median ms {:?}), sign spread {:.1}% (median ms {:?})",
        fit.r_squared,
        presign * 100.0,
        ms(Step::Presign),
        sign * 100.0,
        ms(Step::Sign)
    );
    check(fit.r_squared >= 0.9 && fit.a > 0.0 && presign < 0.25 && sign < 0.25, detail.clone())?;
    Ok(detail)
}

fn criterion_6(report: &kmn_bench::CryptoReport) -> Verdict {
    let mut worst = 0.0f64;
    for m in report.steps.iter().filter(|m| m.step == Step::Sign) {
        let presign = report.get(m.t, m.n, Step::Presign).unwrap().compute().mean;
        worst = worst.max(m.compute().mean / presign);
    }
    let detail = format!("largest online-sign / presign compute ratio {:.2}%", worst * 100.0);
    check(worst <= 0.10, detail.clone())?;
    Ok(detail)
}

fn criterion_7() -> Verdict {
    let secs: u64 = env_or("KMN_ACCEPT_LOAD_SECS", 10);
    let mut config = quick_load_config(vec![1, 2, 5, 10, 20, 50], Duration::from_secs(secs));
    config.paillier = paillier();
    config.signers = vec![SignerKind::Threshold, SignerKind::Single];
    config.pool = PoolConfig::default();
    let report = run_load_test(&config).map_err(|e| e.to_string())?;
    let mut problems = Vec::new();
    for level in &report.levels {
        if let Err(e) = &level.conserved {
            problems.push(format!("{:?}/{:?} users {}: {e}", level.signer, level.use_case, level.users));
        }
        if level.double_spends != 0 {
            problems.push(format!("{} double-spend rejections", level.double_spends));
        }
    }
    for &users in &config.users {
        let tps = |uc, s| report.level(uc, s, users).unwrap().tps();
        if tps(UseCase::Uc2, SignerKind::Threshold) >= tps(UseCase::Uc1, SignerKind::Threshold) {
            problems.push(format!("users {users}: UC2 tps not below UC1"));
        }
        for uc in [UseCase::Uc1, UseCase::Uc2] {
            if tps(uc, SignerKind::Threshold) >= tps(uc, SignerKind::Single) {
                problems.push(format!("users {users}: threshold {uc:?} tps not below the single-signer stub"));
            }
        }
    }
    for uc in [UseCase::Uc1, UseCase::Uc2] {
        let lat: Vec<f64> = report
            .series(uc, SignerKind::Threshold)
            .iter()
            .map(|l| l.latency().mean)
            .collect();
        if lat.windows(2).any(|w| w[1] < w[0]) {
            problems.push(format!("{uc:?} latency decreases with load: {lat:.0?}"));
        }
    }
    let line = |uc| {
        report
            .series(uc, SignerKind::Threshold)
            .iter()
            .map(|l| format!("{}:{:.2}", l.users, l.tps()))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let detail = format!("{secs} s windows; tps UC1 [{}] UC2 [{}]", line(UseCase::Uc1), line(UseCase::Uc2));
    check(problems.is_empty(), format!("{detail}; {}", problems.join("; ")))?;
    Ok(detail)
}

struct FaultCase {
    label: &'static str,
    t: u16,
    n: u16,
    culprit: PartyIndex,
    plan: FaultPlan,
    stage: Step,
    kind: FaultKind,
}

fn fault_matrix() -> Vec<FaultCase> {
    let case = |label, t, n, culprit, plan, stage, kind| FaultCase {
        label,
        t,
        n,
        culprit,
        plan,
        stage,
        kind,
    };
    use FaultKind::*;
    use Step::*;
    vec![
        case("equivocate keygen r1", 2, 3, 2, FaultPlan::equivocate(1), Dkg, Equivocation),
        case("equivocate keygen r1", 3, 5, 5, FaultPlan::equivocate(1), Dkg, Equivocation),
        case("equivocate keygen r2", 2, 3, 1, FaultPlan::equivocate(2), Dkg, Equivocation),
        case("equivocate keygen r2", 3, 4, 3, FaultPlan::equivocate(2), Dkg, Equivocation),
        case("equivocate presign r1", 3, 4, 2, FaultPlan::equivocate(1), Presign, Equivocation),
        case("bad share 1→3", 3, 4, 1, FaultPlan::bad_share_to(3), Dkg, InvalidShare),
        case("bad share 2→1", 2, 3, 2, FaultPlan::bad_share_to(1), Dkg, InvalidShare),
        case("bad share 4→2", 3, 5, 4, FaultPlan::bad_share_to(2), Dkg, InvalidShare),
        case("bad share 3→5", 3, 5, 3, FaultPlan::bad_share_to(5), Dkg, InvalidShare),
        case("bad share 5→1", 4, 5, 5, FaultPlan::bad_share_to(1), Dkg, InvalidShare),
        case("bad partial", 2, 3, 1, FaultPlan::bad_partial(), Sign, InvalidPartial),
        case("bad partial", 2, 3, 2, FaultPlan::bad_partial(), Sign, InvalidPartial),
        case("bad partial", 3, 4, 3, FaultPlan::bad_partial(), Sign, InvalidPartial),
        case("bad partial", 3, 5, 2, FaultPlan::bad_partial(), Sign, InvalidPartial),
        case("bad partial", 4, 5, 4, FaultPlan::bad_partial(), Sign, InvalidPartial),
        case("silent keygen r1", 2, 3, 3, FaultPlan::silent_from(1), Dkg, Timeout),
        case("silent keygen r3", 3, 4, 2, FaultPlan::silent_from(3), Dkg, Timeout),
        case("silent presign r1", 2, 3, 1, FaultPlan::silent_from(1), Presign, Timeout),
        case("silent presign r2", 3, 4, 3, FaultPlan::silent_from(2), Presign, Timeout),
        case("silent sign", 3, 5, 2, FaultPlan::silent_from(1), Sign, Timeout),
    ]
}

fn blamed<T>(session: &Session<T>, culprit: PartyIndex, kind: FaultKind) -> Result<(), String> {
    let honest: Vec<PartyIndex> = session.outputs.keys().copied().filter(|&p| p != culprit).collect();
    for p in &honest {
        let report = session.outputs[p]
            .as_ref()
            .err()
            .and_then(|e| e.report())
            .ok_or(format!("party {p} did not abort with a report"))?;
        if report.culprits != vec![culprit] || report.kind != kind {
            return Err(format!("party {p} reported {:?} {:?}", report.kind, report.culprits));
        }
    }
    let named = session.culprits_named_by(&honest);
    check(named == BTreeSet::from([culprit]), format!("named {named:?}"))
}

fn criterion_8() -> Verdict {
    let cases = fault_matrix();
    let mut failures = Vec::new();
    for c in &cases {
        let mut cl = cluster(c.n, Profile::Test);
        let signers: Vec<PartyIndex> = (1..=c.t).collect();
        let digest = Digest::random(&mut OsRng);
        let result = match c.stage {
            Step::Dkg => {
                cl.set_faults(c.culprit, c.plan.clone());
                blamed(&cl.keygen(c.t), c.culprit, c.kind)
            }
            Step::Presign => {
                let keys = cl.keygen(c.t).into_ok().map_err(|e| e.to_string())?;
                cl.set_faults(c.culprit, c.plan.clone());
                blamed(&cl.presign(&keys, &signers), c.culprit, c.kind)
            }
            Step::Sign => {
                let keys = cl.keygen(c.t).into_ok().map_err(|e| e.to_string())?;
                let presigs = cl.presign(&keys, &signers).into_ok().map_err(|e| e.to_string())?;
                cl.set_faults(c.culprit, c.plan.clone());
                blamed(&cl.sign(presigs, &keys[&1].public_key, &digest).0, c.culprit, c.kind)
            }
        };
        if let Err(e) = result {
            failures.push(format!("{} ({},{}) culprit {}: {e}", c.label, c.t, c.n, c.culprit));
        }
    }
    check(failures.is_empty(), failures.join("; "))?;
    Ok(format!("{} of {} cases name exactly the faulty party", cases.len(), cases.len()))
}

fn criterion_9() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut opts = FspOptions::fast();
    opts.kmn.paillier = paillier();
    opts.data_dir = Some(dir.path().to_path_buf());
    let net = FspNetwork::start(opts).map_err(|e| e.to_string())?;
    let mut completed = 0;
    let mut problems = Vec::new();
    for trial in 0..10u64 {
        let (pp1, pp2) = (net.pp(1), net.pp(2));
        let a = pp1.create_wallet("sender").map_err(|e| e.to_string())?;
        let c = pp2.create_wallet("recipient").map_err(|e| e.to_string())?;
        pp1.fund(a, 100 + trial).map_err(|e| e.to_string())?;
        let before = net.verifier().totals();

        pp1.crash_after_receipt();
        if !matches!(pp1.transfer(a, 2, c, 40), Err(kmn_service::PpError::Crashed)) {
            problems.push(format!("trial {trial}: no crash"));
            continue;
        }
        let resumed = net.restart_pp(1).map_err(|e| e.to_string())?;
        let ok = resumed.len() == 1 && resumed[0].1.is_ok();
        let after = net.verifier().totals();
        let balances = (net.pp(1).balance(a), net.pp(2).balance(c));
        let conserved = net.audit().is_ok() && after.created == before.created && after.destroyed == before.destroyed;
        if ok && conserved && matches!(balances, (Ok(x), Ok(40)) if x == 60 + trial) {
            completed += 1;
        } else {
            problems.push(format!("trial {trial}: resumed ok {ok}, conserved {conserved}, balances {balances:?}"));
        }
    }
    let ds = net.verifier().double_spend_rejections();
    check(completed == 10 && ds == 0, format!("{completed}/10 completed, {ds} double spends; {}", problems.join("; ")))?;
    Ok("10/10 transfers completed after restart, value conserved".into())
}

fn criterion_10() -> Verdict {
    let report = ledger_oracle::run(10, 10_000);
    check(
        report.mismatches.is_empty() && report.final_sets_equal,
        format!(
            "{} mismatches (first: {:?}), final sets equal {}",
            report.mismatches.len(),
            report.mismatches.first(),
            report.final_sets_equal
        ),
    )?;
    Ok(format!(
        "{} commands, {} accepted, decisions and final active set identical",
        report.commands, report.accepted
    ))
}

fn main() {
    // Accept and ignore libtest flags passed through by `cargo test`.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let only: Option<BTreeSet<u8>> = std::env::var("KMN_ACCEPT_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: u8| only.as_ref().is_none_or(|o| o.contains(&n));

    let mut chains = None;
    let mut sweep = None;
    let mut failed = Vec::new();
    let mut report = |n: u8, verdict: Verdict, started: Instant| {
        let secs = started.elapsed().as_secs_f64();
        match verdict {
            Ok(d) => println!("criterion {n:>2}: PASS ({secs:.1} s) {d}"),
            Err(e) => {
                println!("criterion {n:>2}: FAIL ({secs:.1} s) {e}");
                failed.push(n);
            }
        }
    };
    let guarded = |f: &mut dyn FnMut() -> Verdict| -> Verdict {
        catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .map_or("panicked".into(), |m| format!("panicked: {m}")))
        })
    };

    for n in 1..=10u8 {
        if !wanted(n) {
            continue;
        }
        let started = Instant::now();
        let verdict = guarded(&mut || match n {
            1 | 2 => {
                let run = chains.get_or_insert_with(run_chains);
                if n == 1 {
                    criterion_1(run)
                } else {
                    criterion_2(run)
                }
            }
            3 => criterion_3(),
            4 => criterion_4(),
            5 | 6 => {
                if sweep.is_none() {
                    sweep = Some(scaling_sweep()?);
                }
                let s = sweep.as_ref().unwrap();
                if n == 5 {
                    criterion_5(s)
                } else {
                    criterion_6(s)
                }
            }
            7 => criterion_7(),
            8 => criterion_8(),
            9 => criterion_9(),
            _ => criterion_10(),
        });
        report(n, verdict, started);
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
