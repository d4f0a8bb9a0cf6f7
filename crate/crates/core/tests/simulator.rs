mod common;

use common::fidelity::{self, RUNS};
use proptest::prelude::*;
use tpp_outlier::tppsim::{HawkesSpec, OutlierSpec, PoissonSpec};

#[test]
fn sinusoidal_poisson_count_matches_quadrature() {
    let f = fidelity::poisson(&PoissonSpec::default(), RUNS, 100);
    assert!((f.target - 10.2960).abs() < 1e-4, "quadrature {}", f.target);
    assert!((f.empirical - f.target).abs() <= 3.0 * f.stderr, "{} ± {} vs {}", f.empirical, f.stderr, f.target);
}

#[test]
fn constant_rate_poisson_count() {
    let spec = PoissonSpec { amplitude: 0.0, offset: 0.5, ..Default::default() };
    let f = fidelity::poisson(&spec, RUNS, 101);
    assert!((f.target - 5.0).abs() < 1e-12);
    assert!((f.empirical - 5.0).abs() <= 3.0 * f.stderr, "{} ± {}", f.empirical, f.stderr);
}

#[test]
fn hawkes_count_matches_branching_oracle() {
    let f = fidelity::hawkes(&HawkesSpec::default(), RUNS, 102);
    // Stationary mean rate μ/(1 − Σα) gives 10.417 before edge effects.
    assert!(f.target < 10.0 / 0.96 && f.target > 10.0, "oracle {}", f.target);
    assert!((f.empirical - f.target).abs() <= 0.02 * f.target, "{} vs {}", f.empirical, f.target);
}

#[test]
fn hawkes_oracle_agrees_on_strong_excitation() {
    let spec = HawkesSpec { mu: 0.5, alphas: vec![0.3, 0.4], decays: vec![2.0, 0.5], ..Default::default() };
    let f = fidelity::hawkes(&spec, RUNS, 103);
    assert!((f.empirical - f.target).abs() <= 0.02 * f.target, "{} vs {}", f.empirical, f.target);
}

#[test]
fn injected_outlier_count() {
    let f = fidelity::outliers(&OutlierSpec { alpha: 0.5 }, 10.0, RUNS, 104);
    assert!((f.empirical - 5.0).abs() <= 3.0 * f.stderr, "{} ± {}", f.empirical, f.stderr);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn thinning_matches_quadrature(amplitude in 0.0f64..2.0, extra in 0.0f64..1.0, frequency in 0.1f64..5.0, horizon in 1.0f64..15.0, seed in 0u64..1000) {
        let spec = PoissonSpec { amplitude, offset: amplitude + extra, frequency, horizon };
        let f = fidelity::poisson(&spec, RUNS, seed);
        prop_assert!((f.empirical - f.target).abs() <= 3.0 * f.stderr, "{} ± {} vs {}", f.empirical, f.stderr, f.target);
    }
}
