//! Config-driven experiment runner, sweep orchestrator and report generator
//! for the concept-residual workbench. The binary (`crbm`) is a thin clap
//! wrapper over this library; everything here is callable from tests.

pub mod config;
pub mod report;
pub mod runner;
pub mod selftest;

use std::path::PathBuf;

use crbm_core::error::CoreError;

/// 0 success, 2 config error, 3 training divergence, 1 anything else.
pub fn exit_code(err: &CoreError) -> i32 {
    match err {
        CoreError::InvalidConfig(_) => 2,
        CoreError::Divergence { .. } => 3,
        _ => 1,
    }
}

pub const RESULTS_DIR_ENV: &str = "CRBM_RESULTS_DIR";

/// Results directory precedence: explicit flag, then `CRBM_RESULTS_DIR`,
/// then `./results`.
pub fn resolve_results_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(RESULTS_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_separate_failure_classes() {
        assert_eq!(exit_code(&CoreError::InvalidConfig("x".into())), 2);
        let div = CoreError::Divergence {
            epoch: 1,
            step: 2,
            source: Box::new(CoreError::InvalidConfig("x".into())),
        };
        assert_eq!(exit_code(&div), 3);
        assert_eq!(exit_code(&CoreError::GraphConsumed), 1);
    }

    #[test]
    fn results_dir_resolution_order() {
        let flag = Some(PathBuf::from("elsewhere"));
        assert_eq!(resolve_results_dir(flag), PathBuf::from("elsewhere"));
        // No flag and no env var set by these tests: the default.
        if std::env::var_os(RESULTS_DIR_ENV).is_none() {
            assert_eq!(resolve_results_dir(None), PathBuf::from("results"));
        }
    }
}
