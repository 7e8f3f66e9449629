//! One test per acceptance criterion; each prints a single PASS/FAIL line.

use std::sync::LazyLock;
use tem_core::suite::{self, CriterionOutcome, SuiteContext};

const SEED: u64 = 20240601;

static CTX: LazyLock<SuiteContext> = LazyLock::new(|| SuiteContext::new(SEED).expect("double-well calibration"));

fn check(outcome: tem_core::Result<CriterionOutcome>) {
    let o = outcome.expect("criterion ran to completion");
    println!("{}", o.line());
    if !o.passed {
        println!("{}", o.detail);
    }
    assert!(o.passed, "{}", o.line());
}

#[test]
fn criterion_01_coupling_marginal_law() {
    check(suite::marginal_law(&CTX));
}

#[test]
fn criterion_02_mean_distance_identity() {
    check(suite::mean_distance(&CTX));
}

#[test]
fn criterion_03_one_step_contraction() {
    check(suite::contraction(&CTX));
}

#[test]
fn criterion_04_second_moment_lower_bounds() {
    check(suite::lower_bounds(&CTX));
}

#[test]
fn criterion_05_strong_error_rate() {
    check(suite::strong_error(&CTX));
}

#[test]
fn criterion_06_invariant_measure_rate() {
    check(suite::invariant_rate(&CTX));
}

#[test]
fn criterion_07_numerical_ergodicity() {
    check(suite::ergodicity(&CTX));
}

#[test]
fn criterion_08_distance_function_invariants() {
    check(suite::distance_function(&CTX));
}

#[test]
fn criterion_09_oracle_equivalences() {
    check(suite::oracles(&CTX));
}

#[test]
fn criterion_10_assumption_checkers() {
    check(suite::assumption_checks(&CTX));
}

#[test]
fn corrupted_acceptance_fails_the_marginal_criterion() {
    fn always_stick(_: &[f64], _: &[f64], _: f64, _: f64, _: f64) -> f64 {
        1.0
    }
    let o = suite::marginal_law_with(&CTX, Some(always_stick)).unwrap();
    println!("mutation check (expected FAIL): {}", o.line());
    assert!(!o.passed);
}
