//! Benchmarks for the KMN stack: a `(t, n)` sweep of the threshold protocol
//! and closed-loop load tests of same-FSP and cross-FSP transfers.

pub mod config;
pub mod crypto;
pub mod load;
pub mod report;
pub mod stats;

use thiserror::Error;

pub use config::{ConfigError, PhaseKind, ScenarioConfig, UseCase};
pub use crypto::{run_crypto_sweep, CryptoReport, Step, StepMeasurements};
pub use load::{run_load_test, LoadLevel, LoadReport};
pub use report::{dkg_fit, emit_report, summary, MetricsRow};
pub use stats::{fit_quadratic, QuadraticFit, Summary};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("setup: {0}")]
    Setup(String),
    #[error("deployment health check failed: {0}")]
    Health(String),
}
