//! `kmn bench crypto|load`: scenario file in, CSV and summary out.

use std::path::{Path, PathBuf};

use kmn_bench::{emit_report, run_crypto_sweep, run_load_test, summary, PhaseKind, ScenarioConfig};

use crate::error::CliError;
use crate::topology::read_toml;

/// Reads a scenario and forces its phase to match the subcommand.
pub fn load_scenario(path: &Path, phase: PhaseKind, seed: Option<u64>) -> Result<ScenarioConfig, CliError> {
    let mut config: ScenarioConfig = read_toml(path)?;
    config.phase = phase;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate().map_err(CliError::config)?;
    Ok(config)
}

/// Runs the scenario and returns the path of the CSV it wrote.
pub fn run(config: &ScenarioConfig, out: &Path) -> Result<PathBuf, CliError> {
    let (rows, phase) = match config.phase {
        PhaseKind::Crypto => {
            let report = run_crypto_sweep(config)?;
            if report.signatures_failed > 0 {
                return Err(CliError::Protocol(format!("{} signatures failed to verify", report.signatures_failed)));
            }
            (report.rows(), "crypto")
        }
        PhaseKind::E2e => (run_load_test(config)?.rows(), "e2e"),
    };
    let path = emit_report(&rows, out, &config.id, phase).map_err(CliError::other)?;
    print!("{}", summary(&rows));
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn small_crypto_scenario_writes_a_csv() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = dir.path().join("s.toml");
        fs::write(
            &scenario,
            "id = \"tiny\"\nsweep = [[2, 3]]\niterations = 2\n\n[paillier]\nbits = 1024\nallow_unsafe = true\n",
        )
        .unwrap();
        let config = load_scenario(&scenario, PhaseKind::Crypto, Some(9)).unwrap();
        assert_eq!(config.seed, 9);
        let csv = run(&config, &dir.path().join("out")).unwrap();
        assert!(csv.ends_with("tiny-crypto.csv"));
        let text = fs::read_to_string(csv).unwrap();
        assert!(text.lines().count() > 3);
    }

    #[test]
    fn shipped_scenarios_validate() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let crypto = load_scenario(&dir.join("crypto.toml"), PhaseKind::Crypto, None).unwrap();
        assert_eq!(crypto.sweep.len(), 5);
        let load = load_scenario(&dir.join("load.toml"), PhaseKind::E2e, None).unwrap();
        assert_eq!(load.signers.len(), 2);
    }

    #[test]
    fn invalid_scenarios_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = dir.path().join("s.toml");
        fs::write(&scenario, "sweep = [[4, 3]]\n").unwrap();
        let err = load_scenario(&scenario, PhaseKind::Crypto, None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = load_scenario(&dir.path().join("missing.toml"), PhaseKind::Crypto, None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
