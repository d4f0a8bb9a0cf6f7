mod common;

use common::props;

#[test]
fn encoding_is_causal() {
    props::encoding_is_causal();
}

#[test]
fn corrected_is_subsequence() {
    props::corrected_is_subsequence();
}

#[test]
fn scores_are_online() {
    props::scores_are_online();
}

#[test]
fn first_epoch_ratio_is_one() {
    props::first_epoch_ratio_is_one();
}

#[test]
fn spectral_estimate_converges() {
    props::spectral_estimate_converges();
}

#[test]
fn spectral_bound_holds() {
    props::spectral_bound_holds();
}

#[test]
fn discriminator_spectral_bound_during_training() {
    props::discriminator_spectral_bound_during_training();
}

#[test]
fn auroc_matches_pair_count() {
    props::auroc_matches_pair_count();
}

#[test]
fn auroc_complement_and_monotone_invariance() {
    props::auroc_complement_and_monotone_invariance();
}

#[test]
fn wasserstein_metric_axioms() {
    props::wasserstein_metric_axioms();
}

#[test]
fn dataset_round_trip() {
    props::dataset_round_trip();
}

#[test]
fn uniform_policy_has_maximal_entropy() {
    props::uniform_policy_has_maximal_entropy();
}

#[test]
fn spectral_diag_example() {
    use tpp_outlier::neural::{ParamRole, ParamStore, SpectralLinear};
    use tpp_outlier::seqdata::RngStream;
    let mut store = ParamStore::new();
    let layer = SpectralLinear::new(&mut store, "sn", 2, 2, ParamRole::Head, &mut RngStream::new(5, 0));
    *store.value_mut(layer.w) = gradcore::Matrix::from_vec(2, 2, vec![3.0, 0.0, 0.0, 1.0]);
    for _ in 0..50 {
        layer.power_iterate(&mut store);
    }
    assert!((layer.sigma_estimate(&store) - 3.0).abs() < 1e-9);
    let w = layer.effective_weight(&store);
    assert!((w.get(0, 0) - 1.0).abs() < 1e-9 && (w.get(1, 1) - 1.0 / 3.0).abs() < 1e-9);
}
