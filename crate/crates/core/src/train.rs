//! The adversarial training loop.
//!
//! Episodes alternate in blocks of `F/2`: first the discriminator learns to
//! separate observed sequences from the generator's corrected ones, then the
//! generator is trained by PPO with the discriminator's score as terminal
//! reward.

use std::collections::VecDeque;
use std::io::Write;

use gradcore::Adam;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{ppo_update, Generator, GeneratorConfig, PpoConfig, RolloutMode, Trajectory};
use crate::baselines::{ppod_train, PpodConfig};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::evalkit::{auroc, wasserstein_seq_distance};
use crate::seqdata::{Dataset, EventSequence, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Disc,
    Gen,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Disc => "disc",
            Phase::Gen => "gen",
        }
    }
}

/// `Disc` when `k mod F < F/2`, otherwise `Gen`.
pub fn phase(k: usize, update_frequency: usize) -> Phase {
    if k % update_frequency < update_frequency / 2 {
        Phase::Disc
    } else {
        Phase::Gen
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Encoder without attention and layer norm.
    pub no_attention: bool,
    /// Reward `−W(S_g, S_real)` instead of the discriminator score; the
    /// discriminator is never updated.
    pub wd_reward: bool,
    /// Generator and discriminator share a cLSTM pre-trained by maximum
    /// likelihood and kept frozen.
    pub frozen_encoder: bool,
}

/// Which events the per-episode training AUROC is computed on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AurocSource {
    /// Pooled over the episodes' own sequences in a sliding window.
    Episodes { window: usize },
    /// The first `size` training sequences, re-scored after every PPO update.
    HeldIn { size: usize },
}

impl Default for AurocSource {
    fn default() -> Self {
        AurocSource::Episodes { window: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub update_frequency: usize,
    /// (real, generated) pairs per discriminator update.
    pub disc_batch: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub auroc: AurocSource,
    pub ppo: PpoConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub ablation: Ablation,
    /// Pre-training of the shared encoder for the frozen-encoder ablation.
    pub pretrain: PpodConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 10_000,
            update_frequency: 1000,
            disc_batch: 50,
            seed: 100,
            checkpoint_every: 1000,
            auroc: AurocSource::default(),
            ppo: PpoConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            ablation: Ablation::default(),
            pretrain: PpodConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.update_frequency == 0 || !self.update_frequency.is_multiple_of(2) {
            return Err(Error::Config(format!("update frequency must be even and positive, got {}", self.update_frequency)));
        }
        if self.update_frequency > self.episodes {
            return Err(Error::Config(format!(
                "update frequency {} exceeds the episode count {}",
                self.update_frequency, self.episodes
            )));
        }
        if self.disc_batch == 0 {
            return Err(Error::Config("discriminator batch must be positive".into()));
        }
        match self.auroc {
            AurocSource::Episodes { window: 0 } | AurocSource::HeldIn { size: 0 } => {
                return Err(Error::Config("training AUROC source must cover at least one item".into()))
            }
            _ => {}
        }
        if self.ablation.frozen_encoder {
            self.pretrain.validate()?;
            if self.pretrain.hidden != self.generator.hidden || self.pretrain.hidden != self.discriminator.hidden {
                return Err(Error::Config("frozen encoder needs equal generator, discriminator and pre-training widths".into()));
            }
        }
        self.ppo.validate()
    }

    /// Generator settings after applying the ablation switches.
    pub fn effective_generator(&self) -> GeneratorConfig {
        let mut g = self.generator.clone();
        if self.ablation.no_attention {
            g.attention = false;
        }
        g
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub phase: Phase,
    pub auroc: Option<f64>,
    pub d_real: f64,
    pub d_fake: f64,
    pub reward_mean: Option<f64>,
    pub gen_loss: Option<f64>,
    pub disc_loss: Option<f64>,
}

pub const METRICS_HEADER: &str = "episode,phase,auroc,d_real,d_fake,reward_mean,gen_loss,disc_loss";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.12}")).unwrap_or_default()
}

impl EpisodeMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.12},{:.12},{},{},{}",
            self.episode,
            self.phase.as_str(),
            opt(self.auroc),
            self.d_real,
            self.d_fake,
            opt(self.reward_mean),
            opt(self.gen_loss),
            opt(self.disc_loss)
        )
    }
}

pub fn write_metrics(out: &mut impl Write, rows: &[EpisodeMetrics]) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

struct Streams {
    pick: RngStream,
    act: RngStream,
    real: RngStream,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a Dataset,
    gen: Generator,
    disc: Discriminator,
    gen_opt: Adam,
    disc_opt: Adam,
    rng: Streams,
    episode: usize,
    disc_queue: Vec<(usize, EventSequence)>,
    ppo_queue: Vec<Trajectory>,
    window: VecDeque<(Vec<f64>, Vec<u8>, Option<f64>)>,
    held_in_auroc: Option<f64>,
    last_gen_loss: Option<f64>,
    last_disc_loss: Option<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        if data.sequences.is_empty() {
            return Err(Error::Validation("training needs at least one sequence".into()));
        }
        let mut gen = Generator::new(cfg.effective_generator(), &mut RngStream::new(cfg.seed, 0));
        let mut disc = Discriminator::new(cfg.discriminator.clone(), &mut RngStream::new(cfg.seed, 1));
        if cfg.ablation.frozen_encoder {
            let (model, _) = ppod_train(data, &cfg.pretrain, &mut RngStream::new(cfg.seed, 5))?;
            gen.freeze_clstm_from(model.store(), model.clstm())?;
            disc.freeze_clstm_from(model.store(), model.clstm())?;
        }
        let gen_opt = gen.store().adam();
        let disc_opt = disc.store().adam();
        let rng = Streams {
            pick: RngStream::new(cfg.seed, 2),
            act: RngStream::new(cfg.seed, 3),
            real: RngStream::new(cfg.seed, 4),
        };
        let mut trainer = Self {
            cfg,
            data,
            gen,
            disc,
            gen_opt,
            disc_opt,
            rng,
            episode: 0,
            disc_queue: Vec::new(),
            ppo_queue: Vec::new(),
            window: VecDeque::new(),
            held_in_auroc: None,
            last_gen_loss: None,
            last_disc_loss: None,
        };
        trainer.refresh_held_in()?;
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &Generator {
        &self.gen
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.disc
    }

    pub fn episode(&self) -> usize {
        self.episode
    }

    pub fn is_done(&self) -> bool {
        self.episode >= self.cfg.episodes
    }

    pub fn into_models(self) -> (Generator, Discriminator) {
        (self.gen, self.disc)
    }

    fn refresh_held_in(&mut self) -> Result<()> {
        if let AurocSource::HeldIn { size } = self.cfg.auroc {
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for ls in self.data.sequences.iter().take(size) {
                scores.extend(self.gen.outlier_scores(ls.seq())?);
                labels.extend_from_slice(ls.labels());
            }
            self.held_in_auroc = auroc(&scores, &labels);
        }
        Ok(())
    }

    /// Runs one episode and returns its metrics row.
    pub fn step(&mut self) -> Result<EpisodeMetrics> {
        let k = self.episode;
        let n = self.data.sequences.len();
        let j = self.rng.pick.random_range(0..n);
        let i = self.rng.real.random_range(0..n);
        let sample = &self.data.sequences[j];
        let real = self.data.sequences[i].seq();
        let (mut traj, corrected) = self.gen.rollout(sample.seq(), &mut self.rng.act, RolloutMode::Sample)?;
        let d = self.disc.score_batch(&[real, &corrected])?;
        let (d_real, d_fake) = (d[0], d[1]);
        let ph = phase(k, self.cfg.update_frequency);
        let mut reward = None;
        match ph {
            Phase::Disc => {
                if !self.cfg.ablation.wd_reward {
                    self.disc_queue.push((i, corrected));
                    if self.disc_queue.len() == self.cfg.disc_batch {
                        let reals: Vec<&EventSequence> = self.disc_queue.iter().map(|(i, _)| self.data.sequences[*i].seq()).collect();
                        let fakes: Vec<&EventSequence> = self.disc_queue.iter().map(|(_, f)| f).collect();
                        self.last_disc_loss = Some(self.disc.bce_update(&mut self.disc_opt, &reals, &fakes)?);
                        self.disc_queue.clear();
                    }
                }
            }
            Phase::Gen => {
                // Pairs collected for an unfinished discriminator batch are
                // stale once the generator moves.
                self.disc_queue.clear();
                let r = if self.cfg.ablation.wd_reward { -wasserstein_seq_distance(&corrected, real)? } else { d_fake };
                reward = Some(r);
                if !traj.is_empty() {
                    traj.set_terminal_reward(r);
                    self.ppo_queue.push(traj.clone());
                    if self.ppo_queue.len() == self.cfg.ppo.batch_sequences {
                        let stats = ppo_update(&mut self.gen, &mut self.gen_opt, &self.ppo_queue, &self.cfg.ppo)?;
                        self.last_gen_loss = Some(stats.loss);
                        self.ppo_queue.clear();
                        self.refresh_held_in()?;
                    }
                }
            }
        }
        if ph == Phase::Disc {
            // Trajectories from a generator phase never straddle into the
            // next discriminator phase.
            self.ppo_queue.clear();
        }

        let auroc_now = match self.cfg.auroc {
            AurocSource::Episodes { window } => {
                self.window.push_back((traj.scores, sample.labels().to_vec(), reward));
                while self.window.len() > window {
                    self.window.pop_front();
                }
                let scores: Vec<f64> = self.window.iter().flat_map(|(s, _, _)| s.iter().copied()).collect();
                let labels: Vec<u8> = self.window.iter().flat_map(|(_, l, _)| l.iter().copied()).collect();
                auroc(&scores, &labels)
            }
            AurocSource::HeldIn { .. } => {
                self.window.push_back((vec![], vec![], reward));
                while self.window.len() > 100 {
                    self.window.pop_front();
                }
                self.held_in_auroc
            }
        };
        let rewards: Vec<f64> = self.window.iter().filter_map(|(_, _, r)| *r).collect();
        let reward_mean = (!rewards.is_empty()).then(|| rewards.iter().sum::<f64>() / rewards.len() as f64);

        self.episode += 1;
        Ok(EpisodeMetrics {
            episode: k,
            phase: ph,
            auroc: auroc_now,
            d_real,
            d_fake,
            reward_mean,
            gen_loss: self.last_gen_loss,
            disc_loss: self.last_disc_loss,
        })
    }

    /// Runs the remaining episodes, calling `on_episode` after each.
    pub fn run(&mut self, mut on_episode: impl FnMut(&Self, &EpisodeMetrics) -> Result<()>) -> Result<Vec<EpisodeMetrics>> {
        let mut log = Vec::with_capacity(self.cfg.episodes - self.episode);
        while !self.is_done() {
            let m = self.step()?;
            on_episode(self, &m)?;
            log.push(m);
        }
        Ok(log)
    }
}

/// Trains from scratch and returns the models with the full metrics log.
pub fn train(cfg: TrainConfig, data: &Dataset) -> Result<(Generator, Discriminator, Vec<EpisodeMetrics>)> {
    let mut t = Trainer::new(cfg, data)?;
    let log = t.run(|_, _| Ok(()))?;
    let (g, d) = t.into_models();
    Ok((g, d, log))
}
