use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{auroc, mean_stderr, tail_mean};
use crate::agent::Generator;
use crate::baselines::{len_scores, ppod_train, rnd_scores, PpodConfig, PpodModel};
use crate::error::{Error, Result};
use crate::seqdata::{Dataset, RngStream};
use crate::tppsim::{build_dataset, OutlierSpec, ProcessSpec};
use crate::train::{train, EpisodeMetrics, TrainConfig};

/// How per-event scores are turned into one AUROC.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// One AUROC over all events of all sequences.
    #[default]
    Events,
    /// Mean of per-sequence AUROCs over sequences that have both classes.
    PerSequence,
}

pub enum Scorer<'a> {
    GanRl(&'a Generator),
    Ppod(&'a PpodModel),
    Len,
    Rnd(u64),
}

impl Scorer<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Scorer::GanRl(_) => "gan-rl",
            Scorer::Ppod(_) => "ppod",
            Scorer::Len => "len",
            Scorer::Rnd(_) => "rnd",
        }
    }

    /// Per-event scores for every sequence of `data`, in order.
    pub fn score_all(&self, data: &Dataset) -> Result<Vec<Vec<f64>>> {
        let mut rng = match self {
            Scorer::Rnd(seed) => Some(RngStream::new(*seed, 7)),
            _ => None,
        };
        data.sequences
            .iter()
            .map(|ls| match self {
                Scorer::GanRl(g) => g.outlier_scores(ls.seq()),
                Scorer::Ppod(m) => m.scores(ls.seq()),
                Scorer::Len => Ok(len_scores(ls.seq())),
                Scorer::Rnd(_) => Ok(rnd_scores(ls.seq(), rng.as_mut().expect("rng for rnd"))),
            })
            .collect()
    }
}

/// AUROC of `scores` (one list per sequence) against the labels of `data`.
pub fn auroc_of(scores: &[Vec<f64>], data: &Dataset, pooling: Pooling) -> Option<f64> {
    match pooling {
        Pooling::Events => {
            let flat: Vec<f64> = scores.iter().flatten().copied().collect();
            let labels: Vec<u8> = data.sequences.iter().flat_map(|s| s.labels().iter().copied()).collect();
            auroc(&flat, &labels)
        }
        Pooling::PerSequence => {
            let per: Vec<f64> = scores.iter().zip(&data.sequences).filter_map(|(s, ls)| auroc(s, ls.labels())).collect();
            (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64)
        }
    }
}

pub fn evaluate_test(scorer: &Scorer, data: &Dataset, pooling: Pooling) -> Result<f64> {
    let scores = scorer.score_all(data)?;
    auroc_of(&scores, data, pooling).ok_or_else(|| Error::Validation("test set needs both outliers and clean events".into()))
}

/// Mean ± standard error over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn new(method: impl Into<String>, seeds: Vec<u64>, values: Vec<f64>, fingerprint: String) -> Self {
        let (mean, stderr) = mean_stderr(&values);
        Self { method: method.into(), seeds, values, mean, stderr, fingerprint }
    }

    pub fn summary(&self) -> String {
        format!("{}: {:.3} ± {:.3} over {} seed(s)", self.method, self.mean, self.stderr, self.values.len())
    }
}

/// Hex SHA-256 of any serialisable value's JSON form.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("serialisable");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// Data and training protocol of one experiment cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub process: ProcessSpec,
    pub outliers: OutlierSpec,
    pub train_size: usize,
    pub test_size: usize,
    pub beta: f64,
    pub test_seed: u64,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub ppod: PpodConfig,
    pub pooling: Pooling,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            process: ProcessSpec::default(),
            outliers: OutlierSpec::default(),
            train_size: 1000,
            test_size: 100,
            beta: 0.8,
            test_seed: 1000,
            seeds: (100..105).collect(),
            train: TrainConfig::default(),
            ppod: PpodConfig::default(),
            pooling: Pooling::Events,
        }
    }
}

impl ExperimentSpec {
    pub fn train_data(&self, seed: u64) -> Result<Dataset> {
        build_dataset(&self.process, &self.outliers, self.train_size, self.beta, &mut RngStream::new(seed, 0))
    }

    pub fn test_data(&self) -> Result<Dataset> {
        build_dataset(&self.process, &self.outliers, self.test_size, self.beta, &mut RngStream::new(self.test_seed, 0))
    }
}

/// Outcome of one GAN-RL training run.
#[derive(Clone, Debug)]
pub struct GanRun {
    pub seed: u64,
    pub test_auroc: f64,
    pub metrics: Vec<EpisodeMetrics>,
}

impl GanRun {
    /// Mean running training AUROC over the last 10% of episodes.
    pub fn tail_train_auroc(&self) -> Option<f64> {
        tail_mean(&self.metrics.iter().map(|m| m.auroc).collect::<Vec<_>>(), 0.1)
    }

    /// Mean discriminator scores (real, generated) over the last 10% of episodes.
    pub fn tail_disc_scores(&self) -> (f64, f64) {
        let real: Vec<Option<f64>> = self.metrics.iter().map(|m| Some(m.d_real)).collect();
        let fake: Vec<Option<f64>> = self.metrics.iter().map(|m| Some(m.d_fake)).collect();
        (tail_mean(&real, 0.1).unwrap_or(f64::NAN), tail_mean(&fake, 0.1).unwrap_or(f64::NAN))
    }
}

pub fn run_gan(spec: &ExperimentSpec, seed: u64) -> Result<GanRun> {
    let data = spec.train_data(seed)?;
    let test = spec.test_data()?;
    let cfg = TrainConfig { seed, ..spec.train.clone() };
    let (gen, _, metrics) = train(cfg, &data)?;
    let test_auroc = evaluate_test(&Scorer::GanRl(&gen), &test, spec.pooling)?;
    Ok(GanRun { seed, test_auroc, metrics })
}

pub fn run_gan_all(spec: &ExperimentSpec) -> Result<Vec<GanRun>> {
    spec.seeds.iter().map(|&s| run_gan(spec, s)).collect()
}

pub fn gan_report(spec: &ExperimentSpec, runs: &[GanRun]) -> EvalReport {
    EvalReport::new("gan-rl", runs.iter().map(|r| r.seed).collect(), runs.iter().map(|r| r.test_auroc).collect(), fingerprint(spec))
}

/// Test AUROC of a baseline per seed; PPOD is fitted to each seed's
/// (corrupted) training set.
pub fn baseline_report(spec: &ExperimentSpec, method: &str) -> Result<EvalReport> {
    let test = spec.test_data()?;
    let mut values = Vec::with_capacity(spec.seeds.len());
    for &seed in &spec.seeds {
        let v = match method {
            "rnd" => evaluate_test(&Scorer::Rnd(seed), &test, spec.pooling)?,
            "len" => evaluate_test(&Scorer::Len, &test, spec.pooling)?,
            "ppod" => {
                let data = spec.train_data(seed)?;
                let (model, _) = ppod_train(&data, &spec.ppod, &mut RngStream::new(seed, 6))?;
                evaluate_test(&Scorer::Ppod(&model), &test, spec.pooling)?
            }
            other => return Err(Error::Config(format!("unknown baseline {other:?} (expected rnd, len or ppod)"))),
        };
        values.push(v);
    }
    Ok(EvalReport::new(method, spec.seeds.clone(), values, fingerprint(spec)))
}

/// Test AUROC per clean fraction; train and test sets share `β`.
pub fn beta_sweep(spec: &ExperimentSpec, betas: &[f64]) -> Result<Vec<(f64, EvalReport, Vec<GanRun>)>> {
    betas
        .iter()
        .map(|&beta| {
            let cell = ExperimentSpec { beta, ..spec.clone() };
            let runs = run_gan_all(&cell)?;
            Ok((beta, gan_report(&cell, &runs), runs))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    NoAttention,
    WdReward,
    FrozenEncoder,
}

impl AblationKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "no_attention" => Ok(Self::NoAttention),
            "wd_reward" => Ok(Self::WdReward),
            "frozen_encoder" => Ok(Self::FrozenEncoder),
            other => Err(Error::Config(format!("unknown ablation {other:?} (expected no_attention, wd_reward or frozen_encoder)"))),
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        match self {
            Self::NoAttention => cfg.ablation.no_attention = true,
            Self::WdReward => cfg.ablation.wd_reward = true,
            Self::FrozenEncoder => cfg.ablation.frozen_encoder = true,
        }
    }
}

/// Test AUROC and last-10% training AUROC of an ablated variant.
#[derive(Clone, Debug)]
pub struct AblationResult {
    pub kind: AblationKind,
    pub test: EvalReport,
    pub train_tail: EvalReport,
    pub runs: Vec<GanRun>,
}

pub fn tail_report(spec: &ExperimentSpec, method: &str, runs: &[GanRun]) -> EvalReport {
    EvalReport::new(
        method,
        runs.iter().map(|r| r.seed).collect(),
        runs.iter().map(|r| r.tail_train_auroc().unwrap_or(f64::NAN)).collect(),
        fingerprint(spec),
    )
}

pub fn ablation_run(kind: AblationKind, spec: &ExperimentSpec) -> Result<AblationResult> {
    let mut cell = spec.clone();
    kind.apply(&mut cell.train);
    let runs = run_gan_all(&cell)?;
    let name = serde_json::to_value(kind).expect("serialisable").as_str().unwrap_or("ablation").to_string();
    Ok(AblationResult { kind, test: gan_report(&cell, &runs).renamed(&name), train_tail: tail_report(&cell, &name, &runs), runs })
}

impl EvalReport {
    fn renamed(mut self, method: &str) -> Self {
        self.method = method.to_string();
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    UpdateFrequency,
    DiscLr,
    GenLr,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "update_freq" | "update_frequency" => Ok(Self::UpdateFrequency),
            "disc_lr" => Ok(Self::DiscLr),
            "gen_lr" => Ok(Self::GenLr),
            other => Err(Error::Config(format!("unknown sweep parameter {other:?}"))),
        }
    }

    /// Sets the parameter; `GenLr` moves the actor and critic rates together.
    pub fn apply(self, cfg: &mut TrainConfig, value: f64) -> Result<()> {
        match self {
            Self::UpdateFrequency => {
                if value < 2.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("update frequency must be an even integer, got {value}")));
                }
                cfg.update_frequency = value as usize;
            }
            Self::DiscLr => cfg.discriminator.lr = value,
            Self::GenLr => {
                cfg.ppo.actor_lr = value;
                cfg.ppo.critic_lr = value;
            }
        }
        cfg.validate()
    }
}

/// One row per value: test AUROC report and the runs behind it.
pub fn sensitivity_sweep(param: SweepParam, values: &[f64], spec: &ExperimentSpec) -> Result<Vec<(f64, EvalReport, Vec<GanRun>)>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|&v| {
            let mut cell = spec.clone();
            param.apply(&mut cell.train, v)?;
            let runs = run_gan_all(&cell)?;
            Ok((v, gan_report(&cell, &runs), runs))
        })
        .collect()
}
