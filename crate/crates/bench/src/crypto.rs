//! Phase 1: per-node compute and I/O of keygen, presign and online sign over
//! a `(t, n)` sweep, one thread per node.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use kmn_core::cluster::{ClusterOptions, LocalCluster, Session};
use kmn_core::ec::{ecdsa_verify, Digest};
use kmn_core::transport::{SessionStats, Stage, TransportConfig};
use kmn_core::{PartyIndex, ProtocolError};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::config::{ConfigError, PhaseKind, ScenarioConfig};
use crate::report::MetricsRow;
use crate::stats::Summary;
use crate::BenchError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Step {
    Dkg,
    Presign,
    Sign,
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Step::Dkg => "dkg",
            Step::Presign => "presign",
            Step::Sign => "sign",
        })
    }
}

/// Measurements of one step at one `(t, n)`. Each entry of `compute_ns` and
/// `io_ns` is one iteration's mean over the participating nodes.
#[derive(Clone, Debug)]
pub struct StepMeasurements {
    pub t: u16,
    pub n: u16,
    pub step: Step,
    pub compute_ns: Vec<f64>,
    pub io_ns: Vec<f64>,
    pub per_round_compute_ns: BTreeMap<String, Vec<f64>>,
    pub per_round_io_ns: BTreeMap<String, Vec<f64>>,
    /// Round counts reported by the participants, over all iterations.
    pub rounds_seen: BTreeSet<u8>,
    pub errors: Vec<String>,
}

impl StepMeasurements {
    fn new(t: u16, n: u16, step: Step) -> Self {
        StepMeasurements {
            t,
            n,
            step,
            compute_ns: Vec::new(),
            io_ns: Vec::new(),
            per_round_compute_ns: BTreeMap::new(),
            per_round_io_ns: BTreeMap::new(),
            rounds_seen: BTreeSet::new(),
            errors: Vec::new(),
        }
    }

    fn record(&mut self, stats: &BTreeMap<PartyIndex, SessionStats>) {
        let nodes = stats.len().max(1) as f64;
        self.compute_ns
            .push(stats.values().map(|s| s.compute_ns() as f64).sum::<f64>() / nodes);
        self.io_ns.push(stats.values().map(|s| s.io_wait_ns() as f64).sum::<f64>() / nodes);
        let mut compute: BTreeMap<String, f64> = BTreeMap::new();
        let mut io: BTreeMap<String, f64> = BTreeMap::new();
        for s in stats.values() {
            self.rounds_seen.insert(s.rounds);
            for sample in &s.samples {
                let label = match sample.stage {
                    Stage::Round(r) => format!("r{r}"),
                    Stage::Output => "out".to_string(),
                };
                *compute.entry(label.clone()).or_default() += sample.compute_ns as f64 / nodes;
                *io.entry(label).or_default() += sample.io_wait_ns as f64 / nodes;
            }
        }
        for (k, v) in compute {
            self.per_round_compute_ns.entry(k).or_default().push(v);
        }
        for (k, v) in io {
            self.per_round_io_ns.entry(k).or_default().push(v);
        }
    }

    pub fn compute(&self) -> Summary {
        Summary::of(&self.compute_ns)
    }

    pub fn io(&self) -> Summary {
        Summary::of(&self.io_ns)
    }

    pub fn iterations(&self) -> usize {
        self.compute_ns.len() + self.errors.len()
    }

    fn rows(&self, scenario: &str) -> Vec<MetricsRow> {
        let base = MetricsRow {
            scenario: scenario.to_string(),
            phase: "crypto".into(),
            t: Some(self.t),
            n: Some(self.n),
            step: self.step.to_string(),
            ..MetricsRow::default()
        };
        let total = self.iterations();
        let mut all = MetricsRow {
            round: "all".into(),
            samples: self.compute_ns.len(),
            rounds: self.rounds_seen.iter().next_back().copied(),
            error_rate: if total == 0 { 0.0 } else { self.errors.len() as f64 / total as f64 },
            error_kind: self.errors.first().cloned(),
            ..base.clone()
        };
        all.set_compute(&self.compute());
        all.set_io(&self.io());
        let mut rows = vec![all];
        for (round, values) in &self.per_round_compute_ns {
            let mut r = MetricsRow {
                round: round.clone(),
                samples: values.len(),
                ..base.clone()
            };
            r.set_compute(&Summary::of(values));
            r.set_io(&Summary::of(&self.per_round_io_ns[round]));
            rows.push(r);
        }
        rows
    }
}

#[derive(Clone, Debug, Default)]
pub struct CryptoReport {
    pub scenario: String,
    pub steps: Vec<StepMeasurements>,
    /// Sign sessions whose every output verifies under the keygen public key.
    pub signatures_verified: usize,
    pub signatures_failed: usize,
}

impl CryptoReport {
    pub fn get(&self, t: u16, n: u16, step: Step) -> Option<&StepMeasurements> {
        self.steps.iter().find(|m| m.t == t && m.n == n && m.step == step)
    }

    pub fn rows(&self) -> Vec<MetricsRow> {
        self.steps.iter().flat_map(|m| m.rows(&self.scenario)).collect()
    }

    pub fn errors(&self) -> usize {
        self.steps.iter().map(|m| m.errors.len()).sum()
    }
}

fn describe(err: &ProtocolError) -> String {
    match err.report() {
        Some(r) => format!("{:?}", r.kind),
        None => err.to_string(),
    }
}

fn first_error<T>(session: &Session<T>) -> Option<String> {
    session.outputs.values().find_map(|r| r.as_ref().err()).map(describe)
}

struct Point {
    t: u16,
    n: u16,
    cluster: LocalCluster,
    rng: StdRng,
    signers: Vec<PartyIndex>,
    dkg: StepMeasurements,
    presign: StepMeasurements,
    sign: StepMeasurements,
}

impl Point {
    fn new(config: &ScenarioConfig, t: u16, n: u16) -> Result<Point, BenchError> {
        let cluster = LocalCluster::new(ClusterOptions {
            n,
            paillier: config.paillier,
            transport: TransportConfig::default(),
            profile: config.profile,
        })
        .map_err(|e| BenchError::Setup(e.to_string()))?;
        Ok(Point {
            t,
            n,
            cluster,
            rng: StdRng::seed_from_u64(config.seed ^ ((t as u64) << 32 | n as u64)),
            signers: (1..=t).collect(),
            dkg: StepMeasurements::new(t, n, Step::Dkg),
            presign: StepMeasurements::new(t, n, Step::Presign),
            sign: StepMeasurements::new(t, n, Step::Sign),
        })
    }

    /// One keygen → presign → online-sign chain. Returns whether the
    /// signatures verified, or `None` if a step aborted.
    fn iterate(&mut self) -> Option<bool> {
        let session = self.cluster.keygen(self.t);
        if let Some(e) = first_error(&session) {
            self.dkg.errors.push(e);
            return None;
        }
        self.dkg.record(&session.stats);
        let keys = session.into_ok().expect("no party failed");
        let public_key = keys[&1].public_key;

        let session = self.cluster.presign(&keys, &self.signers);
        if let Some(e) = first_error(&session) {
            self.presign.errors.push(e);
            return None;
        }
        self.presign.record(&session.stats);
        let presigs = session.into_ok().expect("no party failed");

        let digest = Digest(self.rng.gen());
        let (session, _) = self.cluster.sign(presigs, &public_key, &digest);
        if let Some(e) = first_error(&session) {
            self.sign.errors.push(e);
            return None;
        }
        self.sign.record(&session.stats);
        let valid = session
            .outputs
            .values()
            .flatten()
            .all(|sig| ecdsa_verify(&public_key, &digest, sig));
        Some(valid && session.outputs.len() == self.signers.len())
    }
}

/// Runs `iterations` keygen → presign → online-sign chains per sweep point.
/// Iterations go round-robin over the points, so slow drift in machine
/// speed lands on every point alike. Aborts are recorded and the sweep goes
/// on.
pub fn run_crypto_sweep(config: &ScenarioConfig) -> Result<CryptoReport, BenchError> {
    config.validate()?;
    if config.phase != PhaseKind::Crypto {
        return Err(BenchError::Config(ConfigError::WrongPhase(PhaseKind::Crypto)));
    }
    let mut report = CryptoReport {
        scenario: config.id.clone(),
        ..CryptoReport::default()
    };
    let mut points = config
        .sweep
        .iter()
        .map(|&(t, n)| Point::new(config, t, n))
        .collect::<Result<Vec<_>, _>>()?;
    for i in 0..config.iterations {
        log::info!("crypto sweep: iteration {}/{} over {} points", i + 1, config.iterations, points.len());
        for point in &mut points {
            match point.iterate() {
                Some(true) => report.signatures_verified += 1,
                Some(false) => report.signatures_failed += 1,
                None => {}
            }
        }
    }
    for p in points {
        log::debug!("crypto sweep: ({}, {}) done", p.t, p.n);
        report.steps.extend([p.dkg, p.presign, p.sign]);
    }
    Ok(report)
}
