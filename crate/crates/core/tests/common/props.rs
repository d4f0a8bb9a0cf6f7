//! Property checks, each a self-contained proptest run that panics with the
//! minimal failing case.

use std::collections::BTreeMap;

use gradcore::{Matrix, Tape};
use nalgebra::DMatrix;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use tpp_outlier::agent::{ppo_loss, Generator, GeneratorConfig, PpoConfig, PpoTargets, RolloutMode};
use tpp_outlier::discriminator::{Discriminator, DiscriminatorConfig};
use tpp_outlier::evalkit::{auroc, wasserstein_seq_distance};
use tpp_outlier::neural::{ParamRole, ParamStore, SpectralLinear};
use tpp_outlier::seqdata::{read_dataset, write_dataset, Dataset, EventSequence, LabeledSequence, RngStream};

const CASES: u32 = 64;
/// Bound on the largest singular value of a normalised weight.
pub const SPECTRAL_BOUND: f64 = 1.01;

fn check<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) {
    let mut runner = TestRunner::new(Config { cases: CASES, failure_persistence: None, ..Config::default() });
    if let Err(e) = runner.run(&strategy, test) {
        panic!("{e}");
    }
}

fn times_strategy(max_len: usize, horizon: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01..horizon, 0..=max_len).prop_map(|mut v| {
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    })
}

fn seq_strategy(max_len: usize) -> impl Strategy<Value = EventSequence> {
    times_strategy(max_len, 10.0).prop_map(|t| EventSequence::new(t, 10.0).unwrap())
}

fn small_generator(seed: u64) -> Generator {
    let mut g = Generator::new(GeneratorConfig { hidden: 6, mlp_hidden: 6, ..Default::default() }, &mut RngStream::new(seed, 0));
    // Off the uniform initialisation so scores actually vary.
    let mut rng = RngStream::new(seed, 1);
    let ids: Vec<_> = g.store().ids().collect();
    for id in ids {
        for x in g.store_mut().value_mut(id).as_mut_slice() {
            *x += rand::Rng::random_range(&mut rng, -0.3..0.3);
        }
    }
    g
}

fn brute_auroc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

fn top_singular_value(w: &Matrix) -> f64 {
    DMatrix::from_row_slice(w.rows(), w.cols(), w.as_slice()).singular_values().max()
}

pub fn dataset_round_trip() {
    let strategy = (prop::collection::vec(seq_strategy(12), 1..8), prop::collection::vec(any::<bool>(), 96));
    check(strategy, |(seqs, flags)| {
        let mut k = 0;
        let labelled: Vec<LabeledSequence> = seqs
            .into_iter()
            .map(|s| {
                let labels = (0..s.len())
                    .map(|_| {
                        k += 1;
                        flags[k % flags.len()] as u8
                    })
                    .collect();
                LabeledSequence::new(s, labels).unwrap()
            })
            .collect();
        let mut meta = BTreeMap::new();
        meta.insert("process".to_string(), "test".to_string());
        let ds = Dataset::new(labelled, 0.5, meta).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&ds, &path).unwrap();
        prop_assert_eq!(read_dataset(&path).unwrap(), ds);
        Ok(())
    });
}

pub fn auroc_matches_pair_count() {
    check(prop::collection::vec((0u8..6, 0u8..2), 2..60), |pairs| {
        // Coarse scores force plenty of ties.
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 5.0).collect();
        let labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        match (auroc(&scores, &labels), brute_auroc(&scores, &labels)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
            (a, b) => prop_assert_eq!(a, b),
        }
        Ok(())
    });
}

pub fn auroc_complement_and_monotone_invariance() {
    check(prop::collection::vec((any::<u32>(), 0u8..2), 2..60), |raw| {
        let mut scores: Vec<f64> = raw.iter().map(|p| p.0 as f64).collect();
        let labels: Vec<u8> = raw.iter().map(|p| p.1).collect();
        // Break ties deterministically.
        for (i, s) in scores.iter_mut().enumerate() {
            *s += i as f64 * 1e-3;
        }
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let squashed: Vec<f64> = scores.iter().map(|s| (s / 1e9).tanh() * 3.0 + 1.0).collect();
        if let (Some(a), Some(b)) = (auroc(&scores, &labels), auroc(&neg, &labels)) {
            prop_assert!((a + b - 1.0).abs() < 1e-12);
            prop_assert_eq!(auroc(&squashed, &labels), Some(a));
        }
        Ok(())
    });
}

pub fn wasserstein_metric_axioms() {
    check((seq_strategy(10), seq_strategy(10), seq_strategy(10)), |(a, b, c)| {
        let d = |x: &EventSequence, y: &EventSequence| wasserstein_seq_distance(x, y).unwrap();
        prop_assert!(d(&a, &b) >= 0.0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert_eq!(d(&a, &a), 0.0);
        if a != b {
            prop_assert!(d(&a, &b) > 0.0);
        }
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
        Ok(())
    });
}

pub fn encoding_is_causal() {
    check((times_strategy(10, 9.0), 0usize..10, 0.01f64..0.9, 0u64..4), |(times, cut, shift, seed)| {
        prop_assume!(cut < times.len());
        let g = small_generator(seed);
        let seq = EventSequence::new(times.clone(), 10.0).unwrap();
        // Move every event after `cut` later; keep the first `cut + 1`.
        let moved: Vec<f64> = times.iter().enumerate().map(|(i, &t)| if i > cut { t + shift } else { t }).collect();
        let other = EventSequence::new(moved, 10.0).unwrap();
        let (e1, e2) = (g.encode(&seq).unwrap(), g.encode(&other).unwrap());
        for r in 0..=cut {
            for c in 0..e1.cols() {
                prop_assert_eq!(e1.get(r, c), e2.get(r, c), "row {} col {}", r, c);
            }
        }
        Ok(())
    });
}

pub fn scores_are_online() {
    check((seq_strategy(12), 0u64..4), |(seq, seed)| {
        let g = small_generator(seed);
        let full = g.outlier_scores(&seq).unwrap();
        for n in 0..seq.len() {
            let part = g.outlier_scores(&seq.prefix(n + 1)).unwrap();
            prop_assert_eq!(part[n], full[n], "event {}", n);
        }
        Ok(())
    });
}

pub fn corrected_is_subsequence() {
    check((seq_strategy(15), 0u64..50), |(seq, seed)| {
        let g = small_generator(seed % 4);
        let (traj, corrected) = g.rollout(&seq, &mut RngStream::new(seed, 3), RolloutMode::Sample).unwrap();
        let kept: Vec<f64> = seq.times().iter().zip(&traj.actions).filter(|(_, &a)| a == 0).map(|(&t, _)| t).collect();
        prop_assert_eq!(corrected.times(), &kept[..]);
        prop_assert_eq!(corrected.horizon(), seq.horizon());
        for (p, s) in traj.scores.iter().zip(g.outlier_scores(&seq).unwrap()) {
            prop_assert_eq!(*p, s);
        }
        Ok(())
    });
}

pub fn first_epoch_ratio_is_one() {
    check((prop::collection::vec(seq_strategy(8), 1..4), 0u64..20), |(seqs, seed)| {
        let g = small_generator(seed % 4);
        let mut rng = RngStream::new(seed, 3);
        let mut batch = Vec::new();
        for s in &seqs {
            let (mut t, _) = g.rollout(s, &mut rng, RolloutMode::Sample).unwrap();
            t.set_terminal_reward(0.7);
            batch.push(t);
        }
        let refs: Vec<&EventSequence> = seqs.iter().collect();
        let targets = PpoTargets::from_batch(&batch, 0.99, false);
        prop_assume!(!targets.is_empty());
        let mut tape = Tape::new();
        let p = g.store().bind(&mut tape).unwrap();
        let pass = g.forward_batch(&mut tape, &p, &refs).unwrap().unwrap();
        let loss = ppo_loss(&mut tape, pass.log_probs, pass.values, &targets, &PpoConfig::default()).unwrap();
        prop_assert!(tape.value(loss.ratio).as_slice().iter().all(|&r| r == 1.0));
        Ok(())
    });
}

/// Fifty power iterations on a fixed weight recover its top singular value
/// to 1%.
pub fn spectral_estimate_converges() {
    check((0u64..1000, 2usize..9, 1usize..9), |(seed, rows, cols)| {
        let mut store = ParamStore::new();
        let layer = SpectralLinear::new(&mut store, "sn", rows, cols, ParamRole::Head, &mut RngStream::new(seed, 0));
        let mut rng = RngStream::new(seed, 1);
        // A fresh weight, so the construction-time iterations do not count.
        for x in store.value_mut(layer.w).as_mut_slice() {
            *x = rand::Rng::random_range(&mut rng, -1.0..1.0);
        }
        for _ in 0..50 {
            layer.power_iterate(&mut store);
        }
        let truth = top_singular_value(store.value(layer.w));
        let est = layer.sigma_estimate(&store);
        prop_assert!((est - truth).abs() <= 0.01 * truth, "σ̂ {est} vs σ {truth}");
        Ok(())
    });
}

/// Small weight drifts followed by the refresh used in training keep the
/// normalised weight within the bound.
pub fn spectral_bound_holds() {
    check((0u64..1000, 2usize..7, 1usize..7, 1usize..30), |(seed, rows, cols, steps)| {
        let cfg = DiscriminatorConfig::default();
        let mut store = ParamStore::new();
        let layer = SpectralLinear::new(&mut store, "sn", rows, cols, ParamRole::Head, &mut RngStream::new(seed, 0));
        let mut rng = RngStream::new(seed, 1);
        for _ in 0..steps {
            for x in store.value_mut(layer.w).as_mut_slice() {
                *x += rand::Rng::random_range(&mut rng, -1e-3..1e-3);
            }
            layer.refresh(&mut store, cfg.power_tol, cfg.power_iterations);
            let top = top_singular_value(&layer.effective_weight(&store));
            prop_assert!(top <= SPECTRAL_BOUND, "largest singular value {top}");
        }
        Ok(())
    });
}

/// The discriminator's head stays within the bound after every update.
pub fn discriminator_spectral_bound_during_training() {
    let mut d = Discriminator::new(DiscriminatorConfig { hidden: 16, ..Default::default() }, &mut RngStream::new(2, 0));
    let mut opt = d.store().adam();
    let real = EventSequence::new(vec![1.0, 2.0, 3.0], 10.0).unwrap();
    let fake = EventSequence::new(vec![7.0, 9.5], 10.0).unwrap();
    for _ in 0..200 {
        d.bce_update(&mut opt, &[&real], &[&fake]).unwrap();
        for layer in d.head() {
            let top = top_singular_value(&layer.effective_weight(d.store()));
            assert!(top <= SPECTRAL_BOUND, "largest singular value {top}");
        }
    }
}

pub const ALL: [(&str, fn()); 12] = [
    ("causality", encoding_is_causal),
    ("subsequence", corrected_is_subsequence),
    ("online prefix", scores_are_online),
    ("first-epoch ratio", first_epoch_ratio_is_one),
    ("spectral estimate", spectral_estimate_converges),
    ("spectral bound", spectral_bound_holds),
    ("spectral bound in training", discriminator_spectral_bound_during_training),
    ("auroc brute force", auroc_matches_pair_count),
    ("auroc complement", auroc_complement_and_monotone_invariance),
    ("wasserstein axioms", wasserstein_metric_axioms),
    ("dataset round trip", dataset_round_trip),
    ("uniform entropy", uniform_policy_has_maximal_entropy),
];

pub fn uniform_policy_has_maximal_entropy() {
    let g = Generator::new(GeneratorConfig { hidden: 6, mlp_hidden: 6, ..Default::default() }, &mut RngStream::new(1, 0));
    let seq = EventSequence::new(vec![0.5, 1.5, 4.0], 10.0).unwrap();
    let mut tape = Tape::new();
    let p = g.store().bind(&mut tape).unwrap();
    let pass = g.forward(&mut tape, &p, &seq).unwrap().unwrap();
    let targets = PpoTargets {
        actions: vec![0; 3],
        old_log_probs: vec![-std::f64::consts::LN_2; 3],
        returns: vec![0.0; 3],
        advantages: vec![0.0; 3],
    };
    let loss = ppo_loss(&mut tape, pass.log_probs, pass.values, &targets, &PpoConfig::default()).unwrap();
    assert!((tape.item(loss.entropy) - std::f64::consts::LN_2).abs() < 1e-15);
}
