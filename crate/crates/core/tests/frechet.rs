mod common;

use common::frechet_oracle::{direct_agreement, equal_covariance, self_distance};

#[test]
fn self_distance_vanishes() {
    assert!(self_distance() < 1e-10);
}

#[test]
fn equal_covariance_reduces_to_mean_gap() {
    for seed in 0..3 {
        let (measured, exact) = equal_covariance(seed);
        assert!((measured - exact).abs() / exact < 0.05, "seed {seed}: {measured}");
    }
}

#[test]
fn agrees_with_direct_formula() {
    let gap = direct_agreement(10);
    assert!(gap < 1e-8, "{gap:e}");
}
