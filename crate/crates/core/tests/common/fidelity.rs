//! Simulator checks against oracles that share no code with the simulators:
//! Simpson quadrature for Poisson counts and the cluster (branching)
//! construction for Hawkes counts.

use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson};
use tpp_outlier::seqdata::RngStream;
use tpp_outlier::tppsim::{inject_outliers, simulate_hawkes, simulate_poisson, HawkesSpec, OutlierSpec, PoissonSpec};

pub const RUNS: usize = 10_000;

/// Composite Simpson rule with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n).map(|k| f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 }).sum();
    (f(a) + inner + f(b)) * h / 3.0
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Number of events on `[0, horizon]` of one cluster-process draw.
fn branching_count(spec: &HawkesSpec, rng: &mut impl Rng) -> usize {
    let t_end = spec.horizon;
    let immigrants = Poisson::new(spec.mu * t_end).unwrap().sample(rng) as usize;
    let mut pending: Vec<f64> = (0..immigrants).map(|_| rng.random_range(0.0..t_end)).collect();
    let mut count = 0;
    while let Some(t) = pending.pop() {
        count += 1;
        for (&a, &b) in spec.alphas.iter().zip(&spec.decays) {
            if a == 0.0 {
                continue;
            }
            let children = Poisson::new(a).unwrap().sample(rng) as usize;
            for _ in 0..children {
                let c = t + Exp::new(b).unwrap().sample(rng);
                if c < t_end {
                    pending.push(c);
                }
            }
        }
    }
    count
}

/// Mean Hawkes count over `runs` cluster-process draws.
pub fn branching_mean(spec: &HawkesSpec, runs: usize, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, 77);
    (0..runs).map(|_| branching_count(spec, &mut rng) as f64).sum::<f64>() / runs as f64
}

pub struct Fidelity {
    pub empirical: f64,
    pub stderr: f64,
    pub target: f64,
}

/// Thinning output against the quadrature of the intensity.
pub fn poisson(spec: &PoissonSpec, runs: usize, seed: u64) -> Fidelity {
    let target = simpson(|t| spec.offset + spec.amplitude * (spec.frequency * t).sin(), 0.0, spec.horizon, 20_000);
    let mut rng = RngStream::new(seed, 0);
    let counts: Vec<f64> = (0..runs).map(|_| simulate_poisson(spec, &mut rng).unwrap().len() as f64).collect();
    let (empirical, stderr) = mean_and_stderr(&counts);
    Fidelity { empirical, stderr, target }
}

pub fn hawkes(spec: &HawkesSpec, runs: usize, seed: u64) -> Fidelity {
    let target = branching_mean(spec, runs * 4, seed);
    let mut rng = RngStream::new(seed, 0);
    let counts: Vec<f64> = (0..runs).map(|_| simulate_hawkes(spec, &mut rng).unwrap().len() as f64).collect();
    let (empirical, stderr) = mean_and_stderr(&counts);
    Fidelity { empirical, stderr, target }
}

/// Injected-outlier counts against `alpha · horizon`.
pub fn outliers(spec: &OutlierSpec, horizon: f64, runs: usize, seed: u64) -> Fidelity {
    let empty = tpp_outlier::seqdata::EventSequence::empty(horizon);
    let mut rng = RngStream::new(seed, 0);
    let counts: Vec<f64> = (0..runs).map(|_| inject_outliers(&empty, spec, &mut rng).unwrap().outlier_count() as f64).collect();
    let (empirical, stderr) = mean_and_stderr(&counts);
    Fidelity { empirical, stderr, target: spec.alpha * horizon }
}
