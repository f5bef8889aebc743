use std::time::Duration;

use kmn_core::paillier::PaillierProfile;
use kmn_core::sharing::check_params;
use kmn_core::transport::duration_ms;
use kmn_core::Profile;
use kmn_service::{Backend, PoolConfig, SignerKind};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseKind {
    #[default]
    Crypto,
    E2e,
}

/// Same-FSP (UC1) or cross-FSP (UC2) transfers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UseCase {
    Uc1,
    Uc2,
}

impl UseCase {
    pub fn label(self) -> &'static str {
        match self {
            UseCase::Uc1 => "uc1",
            UseCase::Uc2 => "uc2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("iterations must be at least 1")]
    Iterations,
    #[error("invalid (t, n) = ({0}, {1})")]
    Threshold(u16, u16),
    #[error("the crypto sweep needs at least one (t, n) point")]
    EmptySweep,
    #[error("user counts must be non-empty, positive and strictly ascending")]
    Users,
    #[error("duration must be positive")]
    Duration,
    #[error("the crypto sweep runs on the in-process backend only")]
    CryptoOverTcp,
    #[error("load tests need at least one use case and one signer")]
    Variants,
    #[error("expected a {0:?} scenario")]
    WrongPhase(PhaseKind),
}

/// One scenario: a crypto sweep or an end-to-end load test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub id: String,
    pub phase: PhaseKind,
    /// `(t, n)` points, crypto phase.
    pub sweep: Vec<(u16, u16)>,
    pub iterations: usize,
    pub paillier: PaillierProfile,
    pub profile: Profile,
    /// Concurrent virtual users per load level, e2e phase.
    pub users: Vec<usize>,
    /// Length of each load level, in milliseconds.
    #[serde(with = "duration_ms")]
    pub duration: Duration,
    /// Transfers slower than this count as errors, in milliseconds.
    #[serde(with = "duration_ms")]
    pub timeout_threshold: Duration,
    pub use_cases: Vec<UseCase>,
    pub signers: Vec<SignerKind>,
    /// Threshold of each FSP's KMN in the load topology.
    pub kmn: (u16, u16),
    pub pool: PoolConfig,
    pub backend: Backend,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            id: "desk".into(),
            phase: PhaseKind::Crypto,
            sweep: vec![(2, 3), (3, 5), (5, 9), (8, 13), (12, 20)],
            iterations: 100,
            paillier: PaillierProfile::default(),
            profile: Profile::Production,
            users: vec![1, 2, 5, 10, 20, 50],
            duration: Duration::from_secs(60),
            timeout_threshold: Duration::from_secs(30),
            use_cases: vec![UseCase::Uc1, UseCase::Uc2],
            signers: vec![SignerKind::Threshold],
            kmn: (2, 3),
            pool: PoolConfig::default(),
            backend: Backend::InProcess,
            seed: 1,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.iterations == 0 {
            return Err(ConfigError::Iterations);
        }
        match self.phase {
            PhaseKind::Crypto => {
                if self.sweep.is_empty() {
                    return Err(ConfigError::EmptySweep);
                }
                for &(t, n) in &self.sweep {
                    check_params(t, n).map_err(|_| ConfigError::Threshold(t, n))?;
                }
                if self.backend == Backend::Tcp {
                    return Err(ConfigError::CryptoOverTcp);
                }
            }
            PhaseKind::E2e => {
                let (t, n) = self.kmn;
                check_params(t, n).map_err(|_| ConfigError::Threshold(t, n))?;
                if self.users.is_empty() || self.users[0] == 0 || self.users.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(ConfigError::Users);
                }
                if self.duration.is_zero() || self.timeout_threshold.is_zero() {
                    return Err(ConfigError::Duration);
                }
                if self.use_cases.is_empty() || self.signers.is_empty() {
                    return Err(ConfigError::Variants);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_for_both_phases() {
        let mut c = ScenarioConfig::default();
        c.validate().unwrap();
        c.phase = PhaseKind::E2e;
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_parameters() {
        let c = ScenarioConfig {
            sweep: vec![(4, 3)],
            ..ScenarioConfig::default()
        };
        assert_eq!(c.validate(), Err(ConfigError::Threshold(4, 3)));
        let c = ScenarioConfig {
            iterations: 0,
            ..ScenarioConfig::default()
        };
        assert_eq!(c.validate(), Err(ConfigError::Iterations));
        let c = ScenarioConfig {
            phase: PhaseKind::E2e,
            users: vec![1, 5, 2],
            ..ScenarioConfig::default()
        };
        assert_eq!(c.validate(), Err(ConfigError::Users));
        let c = ScenarioConfig {
            backend: Backend::Tcp,
            ..ScenarioConfig::default()
        };
        assert_eq!(c.validate(), Err(ConfigError::CryptoOverTcp));
    }
}
