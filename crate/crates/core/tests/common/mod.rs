//! Checks shared by the integration test targets. Each returns `Err` with a
//! short reason instead of panicking so the acceptance target can report it.
#![allow(dead_code)]

pub mod fixtures;
pub mod gradients;
pub mod oracles;
pub mod props;

pub type Check = Result<(), String>;

/// Named check, as listed by the acceptance target.
pub type NamedCheck = (&'static str, fn() -> Check);

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Runs a proptest strategy programmatically so failures come back as `Err`.
pub fn run_prop<S, F>(cases: u32, strategy: S, test: F) -> Check
where
    S: proptest::strategy::Strategy,
    F: Fn(S::Value) -> Result<(), proptest::test_runner::TestCaseError>,
{
    let config = proptest::test_runner::Config {
        cases,
        failure_persistence: None,
        ..proptest::test_runner::Config::default()
    };
    let mut runner = proptest::test_runner::TestRunner::new_with_rng(
        config,
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    runner.run(&strategy, test).map_err(|e| e.to_string())
}
