mod common;

use common::oracle::{digamma, lgamma, library, oracle};

#[test]
fn oracle_special_functions_are_sane() {
    assert!((lgamma(5.0) - 24f64.ln()).abs() < 1e-13);
    assert!((lgamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    assert!((digamma(1.0) + 0.577_215_664_901_532_9).abs() < 1e-13);
    assert!((digamma(0.5) + 0.577_215_664_901_532_9 + 2.0 * 2f64.ln()).abs() < 1e-13);
}

#[test]
fn per_instance_level_proportions_match_enumeration() {
    let (lib, brute) = (library(None), oracle(None));
    assert!((lib - brute).abs() < 1e-8, "library {lib} vs oracle {brute}");
}

#[test]
fn shared_level_proportion_matches_enumeration() {
    let g = [3.1, 1.6];
    let (lib, brute) = (library(Some(g)), oracle(Some(g)));
    assert!((lib - brute).abs() < 1e-8, "library {lib} vs oracle {brute}");
}
