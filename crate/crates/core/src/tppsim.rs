//! Clean point-process simulation by thinning, outlier injection and
//! labeled dataset assembly.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqdata::{Dataset, EventSequence, LabeledSequence, RngStream};

/// Offset applied to an injected point that lands exactly on a clean event.
pub const TIE_NUDGE: f64 = 1e-9;

pub const DEFAULT_HORIZON: f64 = 10.0;

/// `λ(t) = offset + amplitude · sin(frequency · t)` on `(0, horizon]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoissonSpec {
    pub horizon: f64,
    pub amplitude: f64,
    pub frequency: f64,
    pub offset: f64,
}

impl Default for PoissonSpec {
    fn default() -> Self {
        Self { horizon: DEFAULT_HORIZON, amplitude: 1.0, frequency: 2.0, offset: 1.0 }
    }
}

impl PoissonSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be finite and >= 0, got {}", self.horizon)));
        }
        if self.offset < self.amplitude.abs() {
            return Err(Error::Config(format!(
                "intensity goes negative: offset {} < |amplitude| {}",
                self.offset, self.amplitude
            )));
        }
        Ok(())
    }

    pub fn intensity(&self, t: f64) -> f64 {
        self.offset + self.amplitude * (self.frequency * t).sin()
    }

    /// `∫₀ᵀ λ(t) dt` in closed form.
    pub fn expected_count(&self) -> f64 {
        let t = self.horizon;
        let osc = if self.frequency == 0.0 {
            0.0
        } else {
            self.amplitude * (1.0 - (self.frequency * t).cos()) / self.frequency
        };
        self.offset * t + osc
    }
}

/// Self-exciting process with baseline `mu` and kernel
/// `Σ_u alphas[u] · decays[u] · exp(−decays[u] · s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HawkesSpec {
    pub mu: f64,
    pub alphas: Vec<f64>,
    pub decays: Vec<f64>,
    pub horizon: f64,
}

impl Default for HawkesSpec {
    fn default() -> Self {
        Self { mu: 1.0, alphas: vec![0.01, 0.02, 0.01], decays: vec![1.0, 3.0, 7.0], horizon: DEFAULT_HORIZON }
    }
}

impl HawkesSpec {
    pub fn branching_ratio(&self) -> f64 {
        self.alphas.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.len() != self.decays.len() {
            return Err(Error::Config(format!("{} excitations but {} decays", self.alphas.len(), self.decays.len())));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!("baseline must be >= 0, got {}", self.mu)));
        }
        if self.alphas.iter().any(|&a| !(a >= 0.0)) || self.decays.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::Config("excitations must be >= 0 and decays > 0".into()));
        }
        if self.branching_ratio() >= 1.0 {
            return Err(Error::Config(format!("unstable: branching ratio {} >= 1", self.branching_ratio())));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be finite and >= 0, got {}", self.horizon)));
        }
        Ok(())
    }

    /// Conditional intensity at `t` given the events of `history` before `t`.
    pub fn intensity(&self, history: &[f64], t: f64) -> f64 {
        let mut lam = self.mu;
        for &s in history.iter().take_while(|&&s| s < t) {
            for (a, b) in self.alphas.iter().zip(&self.decays) {
                lam += a * b * (-b * (t - s)).exp();
            }
        }
        lam
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "process", rename_all = "lowercase")]
pub enum ProcessSpec {
    Poisson(PoissonSpec),
    Hawkes(HawkesSpec),
}

impl Default for ProcessSpec {
    fn default() -> Self {
        ProcessSpec::Poisson(PoissonSpec::default())
    }
}

impl ProcessSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ProcessSpec::Poisson(_) => "poisson",
            ProcessSpec::Hawkes(_) => "hawkes",
        }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            ProcessSpec::Poisson(p) => p.horizon,
            ProcessSpec::Hawkes(h) => h.horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ProcessSpec::Poisson(p) => p.validate(),
            ProcessSpec::Hawkes(h) => h.validate(),
        }
    }

    pub fn simulate(&self, rng: &mut RngStream) -> Result<EventSequence> {
        match self {
            ProcessSpec::Poisson(p) => simulate_poisson(p, rng),
            ProcessSpec::Hawkes(h) => simulate_hawkes(h, rng),
        }
    }
}

/// Constant-rate outlier process.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutlierSpec {
    pub alpha: f64,
}

impl Default for OutlierSpec {
    fn default() -> Self {
        Self { alpha: 0.5 }
    }
}

fn exp_gap(rate: f64, rng: &mut RngStream) -> f64 {
    Exp::new(rate).expect("positive rate").sample(rng)
}

/// Homogeneous Poisson points on `(0, horizon]`.
pub fn homogeneous(rate: f64, horizon: f64, rng: &mut RngStream) -> Vec<f64> {
    let mut out = Vec::new();
    if rate <= 0.0 || horizon <= 0.0 {
        return out;
    }
    let mut t = 0.0;
    loop {
        t += exp_gap(rate, rng);
        if t > horizon {
            return out;
        }
        // A zero-length first gap is possible only in theory; the open interval excludes it.
        if t > 0.0 {
            out.push(t);
        }
    }
}

/// Thinning against the constant bound `offset + |amplitude|`.
pub fn simulate_poisson(spec: &PoissonSpec, rng: &mut RngStream) -> Result<EventSequence> {
    spec.validate()?;
    let bound = spec.offset + spec.amplitude.abs();
    let mut times = Vec::new();
    if bound > 0.0 && spec.horizon > 0.0 {
        let mut t = 0.0;
        loop {
            t += exp_gap(bound, rng);
            if t > spec.horizon {
                break;
            }
            let u: f64 = rng.random();
            if u * bound <= spec.intensity(t) && t > 0.0 {
                times.push(t);
            }
        }
    }
    EventSequence::new(times, spec.horizon)
}

/// Ogata thinning. The excitation is tracked per kernel component; between
/// events the intensity only decays, so its value right after the last
/// accepted or rejected candidate bounds it until the next event.
pub fn simulate_hawkes(spec: &HawkesSpec, rng: &mut RngStream) -> Result<EventSequence> {
    spec.validate()?;
    let mut times = Vec::new();
    let mut excite = vec![0.0; spec.alphas.len()];
    let mut t = 0.0;
    if spec.horizon > 0.0 {
        loop {
            let bound = spec.mu + excite.iter().sum::<f64>();
            if bound <= 0.0 {
                break;
            }
            let dt = exp_gap(bound, rng);
            t += dt;
            if t > spec.horizon {
                break;
            }
            for (e, b) in excite.iter_mut().zip(&spec.decays) {
                *e *= (-b * dt).exp();
            }
            let lam = spec.mu + excite.iter().sum::<f64>();
            let u: f64 = rng.random();
            if u * bound <= lam && t > 0.0 {
                times.push(t);
                for ((e, a), b) in excite.iter_mut().zip(&spec.alphas).zip(&spec.decays) {
                    *e += a * b;
                }
            }
        }
    }
    EventSequence::new(times, spec.horizon)
}

/// Merges injected outlier times into a clean sequence, labelling injected
/// points 1. An injected point equal to a clean time is nudged by
/// [`TIE_NUDGE`] so both survive.
pub fn merge_outliers(clean: &EventSequence, injected: &[f64]) -> Result<LabeledSequence> {
    let horizon = clean.horizon();
    let mut merged: Vec<(f64, u8)> = clean.times().iter().map(|&t| (t, 0)).collect();
    let mut sorted_inj = injected.to_vec();
    sorted_inj.sort_by(f64::total_cmp);
    for mut t in sorted_inj {
        while merged.iter().any(|&(s, _)| s == t) {
            t = if t + TIE_NUDGE <= horizon { t + TIE_NUDGE } else { t - TIE_NUDGE };
        }
        merged.push((t, 1));
    }
    merged.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (times, labels): (Vec<f64>, Vec<u8>) = merged.into_iter().unzip();
    LabeledSequence::new(EventSequence::new(times, horizon)?, labels)
}

pub fn inject_outliers(clean: &EventSequence, spec: &OutlierSpec, rng: &mut RngStream) -> Result<LabeledSequence> {
    if !(spec.alpha >= 0.0) {
        return Err(Error::Config(format!("outlier intensity must be >= 0, got {}", spec.alpha)));
    }
    let injected = homogeneous(spec.alpha, clean.horizon(), rng);
    merge_outliers(clean, &injected)
}

/// `round(beta · count)` clean sequences and the rest corrupted, shuffled.
///
/// A corrupted sequence always carries at least one outlier: the injection is
/// redrawn while it comes out empty, so the clean count is exact.
pub fn build_dataset(process: &ProcessSpec, outliers: &OutlierSpec, count: usize, beta: f64, rng: &mut RngStream) -> Result<Dataset> {
    process.validate()?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta must lie in [0, 1], got {beta}")));
    }
    let n_clean = (beta * count as f64).round() as usize;
    let mut seqs = Vec::with_capacity(count);
    for i in 0..count {
        let clean = process.simulate(rng)?;
        if i < n_clean {
            seqs.push(LabeledSequence::clean(clean));
        } else {
            let mut corrupted = inject_outliers(&clean, outliers, rng)?;
            if outliers.alpha > 0.0 && clean.horizon() > 0.0 {
                while corrupted.is_clean() {
                    corrupted = inject_outliers(&clean, outliers, rng)?;
                }
            }
            seqs.push(corrupted);
        }
    }
    seqs.shuffle(rng);

    let mut meta = BTreeMap::new();
    meta.insert("generator".into(), process.name().into());
    meta.insert("process".into(), serde_json::to_string(process).expect("spec serialises"));
    meta.insert("outlier_alpha".into(), outliers.alpha.to_string());
    meta.insert("seed".into(), rng.seed().to_string());
    meta.insert("stream".into(), rng.stream().to_string());
    meta.insert("corrupted".into(), (count - n_clean).to_string());
    Dataset::new(seqs, beta, meta)
}
