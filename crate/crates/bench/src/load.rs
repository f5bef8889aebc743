//! Phase 2: closed-loop virtual users issuing transfers against two FSPs
//! and one verifier, per load level.

use std::collections::BTreeMap;
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use kmn_core::paillier::PaillierProfile;
use kmn_service::pp::PpClientError;
use kmn_service::{FspNetwork, FspOptions, KmnOptions, SignerKind};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use uuid::Uuid;

use crate::config::{ConfigError, PhaseKind, ScenarioConfig, UseCase};
use crate::report::MetricsRow;
use crate::stats::Summary;
use crate::BenchError;

/// Value each sender wallet starts with; transfers move one unit.
const FUNDING: u64 = 1 << 40;

const WARM_UP_LIMIT: Duration = Duration::from_secs(120);

#[derive(Clone, Debug)]
pub struct LoadLevel {
    pub use_case: UseCase,
    pub signer: SignerKind,
    pub users: usize,
    /// Users start transfers only inside this window.
    pub window: Duration,
    /// From the start of the window to the last completion.
    pub span: Duration,
    /// Successful transfers under the timeout.
    pub completed: usize,
    pub errors: usize,
    pub error_kinds: BTreeMap<String, usize>,
    /// Latency of every transfer, in ms.
    pub latencies_ms: Vec<f64>,
    pub conserved: Result<(), String>,
    pub double_spends: u64,
}

impl LoadLevel {
    /// Completions over the time it took to produce them, so levels whose
    /// latency exceeds the window are still measured at saturation.
    pub fn tps(&self) -> f64 {
        if self.span.is_zero() {
            0.0
        } else {
            self.completed as f64 / self.span.as_secs_f64()
        }
    }

    pub fn latency(&self) -> Summary {
        Summary::of(&self.latencies_ms)
    }

    pub fn error_rate(&self) -> f64 {
        let total = self.completed + self.errors;
        if total == 0 {
            0.0
        } else {
            self.errors as f64 / total as f64
        }
    }

    fn variant(&self) -> String {
        let signer = match self.signer {
            SignerKind::Threshold => "threshold",
            SignerKind::Single => "single",
        };
        format!("{signer}/{}", self.use_case.label())
    }

    fn row(&self, scenario: &str) -> MetricsRow {
        let mut row = MetricsRow {
            scenario: scenario.to_string(),
            phase: "e2e".into(),
            users: Some(self.users),
            variant: Some(self.variant()),
            step: "transfer".into(),
            round: "all".into(),
            samples: self.latencies_ms.len(),
            tps: Some(self.tps()),
            error_rate: self.error_rate(),
            error_kind: self
                .error_kinds
                .iter()
                .max_by_key(|(_, c)| **c)
                .map(|(k, _)| k.clone())
                .or_else(|| self.conserved.as_ref().err().map(|e| format!("conservation: {e}"))),
            ..MetricsRow::default()
        };
        row.set_latency(&self.latency());
        row
    }
}

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub scenario: String,
    pub levels: Vec<LoadLevel>,
}

impl LoadReport {
    pub fn rows(&self) -> Vec<MetricsRow> {
        self.levels.iter().map(|l| l.row(&self.scenario)).collect()
    }

    pub fn level(&self, use_case: UseCase, signer: SignerKind, users: usize) -> Option<&LoadLevel> {
        self.levels
            .iter()
            .find(|l| l.use_case == use_case && l.signer == signer && l.users == users)
    }

    pub fn series(&self, use_case: UseCase, signer: SignerKind) -> Vec<&LoadLevel> {
        let mut v: Vec<_> = self
            .levels
            .iter()
            .filter(|l| l.use_case == use_case && l.signer == signer)
            .collect();
        v.sort_by_key(|l| l.users);
        v
    }
}

struct Outcome {
    started: Instant,
    latency: Duration,
    error: Option<String>,
}

fn classify(e: &PpClientError) -> String {
    match e {
        PpClientError::Status { status, .. } => format!("status {status}"),
        PpClientError::Rpc(_) => "rpc".into(),
        PpClientError::Malformed(_) => "malformed".into(),
    }
}

fn fsp_options(config: &ScenarioConfig, signer: SignerKind) -> FspOptions {
    let (t, n) = config.kmn;
    FspOptions {
        signer,
        kmn: KmnOptions {
            threshold: t,
            parties: n,
            paillier: config.paillier,
            profile: config.profile,
            pool: config.pool.clone(),
            backend: config.backend,
            ..KmnOptions::default()
        },
        ..FspOptions::default()
    }
}

/// Creates wallets, funds every sender and checks both FSPs answer.
fn prepare(net: &FspNetwork, use_case: UseCase, users: usize) -> Result<Vec<(Uuid, u16, Uuid)>, BenchError> {
    let health = |what: &str, e: PpClientError| BenchError::Health(format!("{what}: {e}"));
    let to_fsp = match use_case {
        UseCase::Uc1 => 1,
        UseCase::Uc2 => 2,
    };
    let (sender, receiver) = (net.client(1), net.client(to_fsp));
    (0..users)
        .map(|u| {
            let from = sender.create_wallet(&format!("sender-{u}")).map_err(|e| health("create wallet", e))?;
            let to = receiver
                .create_wallet(&format!("receiver-{u}"))
                .map_err(|e| health("create wallet", e))?;
            sender.fund(from, FUNDING).map_err(|e| health("fund", e))?;
            Ok((from, to_fsp, to))
        })
        .collect()
}

/// Lets each coordinator fill its key pool before the clock starts.
fn warm_up(net: &FspNetwork, config: &ScenarioConfig) {
    if !config.pool.replenish || config.pool.keys == 0 {
        return;
    }
    let deadline = Instant::now() + WARM_UP_LIMIT;
    for f in net.fsp_ids() {
        let Some(kmn) = net.kmn(f) else { continue };
        while kmn.coordinator().pooled_keys() < config.pool.keys && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(20));
        }
    }
}

fn run_level(config: &ScenarioConfig, use_case: UseCase, signer: SignerKind, users: usize) -> Result<LoadLevel, BenchError> {
    let net = FspNetwork::start(fsp_options(config, signer)).map_err(|e| BenchError::Health(e.to_string()))?;
    let pairs = prepare(&net, use_case, users)?;
    warm_up(&net, config);
    let client = net.client(1);
    let window = config.duration;
    let timeout = config.timeout_threshold;
    let barrier = Arc::new(Barrier::new(users + 1));
    let mut seeds = StdRng::seed_from_u64(config.seed ^ users as u64);

    let (outcomes, start) = thread::scope(|scope| {
        let workers: Vec<_> = pairs
            .iter()
            .map(|&(from, to_fsp, to)| {
                let client = client.clone();
                let barrier = barrier.clone();
                let mut rng = StdRng::seed_from_u64(seeds.gen());
                scope.spawn(move || {
                    let mut out = Vec::new();
                    barrier.wait();
                    let deadline = Instant::now() + window;
                    // Users start staggered over the first few milliseconds.
                    thread::sleep(Duration::from_micros(rng.gen_range(0..2000)));
                    while Instant::now() < deadline {
                        let started = Instant::now();
                        let result = client.transfer(from, to_fsp, to, 1);
                        out.push(Outcome {
                            started,
                            latency: started.elapsed(),
                            error: result.err().map(|e| classify(&e)),
                        });
                    }
                    out
                })
            })
            .collect();
        barrier.wait();
        let start = Instant::now();
        let outcomes: Vec<Outcome> = workers
            .into_iter()
            .flat_map(|w| w.join().expect("virtual user panicked"))
            .collect();
        (outcomes, start)
    });

    let last = outcomes
        .iter()
        .map(|o| o.started + o.latency)
        .max()
        .unwrap_or(start);
    let mut level = LoadLevel {
        use_case,
        signer,
        users,
        window,
        span: last.saturating_duration_since(start),
        completed: 0,
        errors: 0,
        error_kinds: BTreeMap::new(),
        latencies_ms: Vec::new(),
        conserved: net.audit().map(|_| ()),
        double_spends: net.verifier().double_spend_rejections()
            + net.fsp_ids().iter().map(|&f| net.pp(f).double_spend_rejections()).sum::<u64>(),
    };
    for o in outcomes {
        level.latencies_ms.push(o.latency.as_secs_f64() * 1e3);
        let error = o.error.or_else(|| (o.latency > timeout).then(|| "timeout".to_string()));
        match error {
            Some(kind) => {
                level.errors += 1;
                *level.error_kinds.entry(kind).or_default() += 1;
            }
            None => level.completed += 1,
        }
    }
    log::info!(
        "load {}: {} users, {:.2} tps, mean latency {:.1} ms, {} errors",
        level.variant(),
        users,
        level.tps(),
        level.latency().mean,
        level.errors
    );
    Ok(level)
}

/// Runs every (signer, use case, users) level on a fresh deployment.
pub fn run_load_test(config: &ScenarioConfig) -> Result<LoadReport, BenchError> {
    config.validate()?;
    if config.phase != PhaseKind::E2e {
        return Err(BenchError::Config(ConfigError::WrongPhase(PhaseKind::E2e)));
    }
    let mut report = LoadReport {
        scenario: config.id.clone(),
        levels: Vec::new(),
    };
    for &signer in &config.signers {
        for &use_case in &config.use_cases {
            for &users in &config.users {
                report.levels.push(run_level(config, use_case, signer, users)?);
            }
        }
    }
    Ok(report)
}

/// A load scenario on the fast 1024-bit profile, for tests and smoke runs.
pub fn quick_load_config(users: Vec<usize>, duration: Duration) -> ScenarioConfig {
    ScenarioConfig {
        id: "quick-load".into(),
        phase: PhaseKind::E2e,
        users,
        duration,
        paillier: PaillierProfile::fast_test(),
        ..ScenarioConfig::default()
    }
}
