//! The generator: a cLSTM + causal-attention encoder feeding actor and critic
//! heads. Each event is an RL step whose action keeps (0) or removes (1) it;
//! the probability of removal doubles as the event's outlier score.

use std::path::Path;

use gradcore::{Adam, Matrix, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{checkpoint, Bound, CausalAttention, Clstm, Mlp, ParamRole, ParamStore};
use crate::seqdata::{EventSequence, RngStream};

pub const KEEP: usize = 0;
pub const REMOVE: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub hidden: usize,
    pub mlp_hidden: usize,
    /// Width of the critic's last layer; the value is read from column 0.
    pub critic_outputs: usize,
    pub attention: bool,
    pub residual: bool,
    pub layer_norm_affine: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { hidden: 64, mlp_hidden: 64, critic_outputs: 1, attention: true, residual: true, layer_norm_affine: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_sequences: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub encoder_lr: f64,
    pub max_grad_norm: f64,
    /// Standardise discounted returns over each batch's events before
    /// computing advantages and value targets.
    pub normalize_returns: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            gamma: 0.99,
            epochs: 10,
            batch_sequences: 10,
            actor_lr: 1e-5,
            critic_lr: 1e-5,
            encoder_lr: 1e-3,
            max_grad_norm: 5.0,
            normalize_returns: false,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("PPO clip must be > 0, got {}", self.clip)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("discount must lie in (0, 1], got {}", self.gamma)));
        }
        if self.epochs == 0 || self.batch_sequences == 0 {
            return Err(Error::Config("PPO epochs and batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_for(&self, role: ParamRole) -> f64 {
        match role {
            ParamRole::Actor => self.actor_lr,
            ParamRole::Critic => self.critic_lr,
            ParamRole::Encoder => self.encoder_lr,
            ParamRole::Head | ParamRole::Buffer => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMode {
    Sample,
    Greedy,
}

/// One episode: the input sequence and, per event, the action taken with its
/// log-probability and the critic's value at rollout time.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub seq: EventSequence,
    pub encodings: Matrix,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Removal probability per event (the outlier score).
    pub scores: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Terminal-only reward: `r_N = reward`, all earlier rewards stay 0.
    pub fn set_terminal_reward(&mut self, reward: f64) {
        if let Some(last) = self.rewards.last_mut() {
            *last = reward;
        }
    }

    pub fn terminal_reward(&self) -> Option<f64> {
        self.rewards.last().copied()
    }

    /// Discounted returns-to-go `G_n = Σ_{k≥n} γ^{k−n} r_k`.
    pub fn returns(&self, gamma: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.rewards.len()];
        let mut acc = 0.0;
        for i in (0..self.rewards.len()).rev() {
            acc = self.rewards[i] + gamma * acc;
            out[i] = acc;
        }
        out
    }
}

/// Tape handles for one policy/value pass over a sequence.
pub struct PolicyPass {
    pub encodings: Var,
    /// `N x 2` log-probabilities of keep/remove.
    pub log_probs: Var,
    /// `N x 1` state values.
    pub values: Var,
}

#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    store: ParamStore,
    clstm: Clstm,
    attention: Option<CausalAttention>,
    actor: Mlp,
    critic: Mlp,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let h = cfg.hidden;
        let clstm = Clstm::new(&mut store, "encoder.clstm", h, ParamRole::Encoder, rng);
        let attention = cfg
            .attention
            .then(|| CausalAttention::new(&mut store, "encoder.attention", h, cfg.residual, cfg.layer_norm_affine, ParamRole::Encoder, rng));
        let m = cfg.mlp_hidden;
        let actor = Mlp::new(&mut store, "actor", &[h, m, m, 2], ParamRole::Actor, rng);
        let critic = Mlp::new(&mut store, "critic", &[h, m, m, cfg.critic_outputs.max(1)], ParamRole::Critic, rng);
        // Zero output layer: the initial policy is exactly uniform.
        actor.last().zero_weights(&mut store);
        Self { cfg, store, clstm, attention, actor, critic }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn clstm(&self) -> &Clstm {
        &self.clstm
    }

    /// Replaces the cLSTM weights (same hidden size) and freezes them.
    pub fn freeze_clstm_from(&mut self, src: &ParamStore, src_cell: &Clstm) -> Result<()> {
        copy_clstm(src, src_cell, &mut self.store, &self.clstm)?;
        for id in self.clstm.ids() {
            self.store.set_frozen(id, true);
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, seq: &EventSequence) -> Result<Option<PolicyPass>> {
        self.forward_batch(tape, p, &[seq])
    }

    /// One pass over several sequences; output rows are the events of all
    /// non-empty sequences, concatenated in batch order. `None` if there are
    /// no events at all.
    pub fn forward_batch(&self, tape: &mut Tape, p: &Bound, seqs: &[&EventSequence]) -> Result<Option<PolicyPass>> {
        let times: Vec<&[f64]> = seqs.iter().map(|s| s.times()).collect();
        let run = self.clstm.run_batch(tape, p, &times)?;
        let stacked = run.stack_outputs(tape)?;
        let mut blocks = Vec::with_capacity(seqs.len());
        for s in 0..seqs.len() {
            let Some(hs) = run.event_outputs(tape, stacked, s)? else { continue };
            blocks.push(match &self.attention {
                Some(attn) => attn.forward(tape, p, hs)?,
                None => hs,
            });
        }
        if blocks.is_empty() {
            return Ok(None);
        }
        let encodings = if blocks.len() == 1 { blocks[0] } else { tape.concat_rows(&blocks)? };
        let logits = self.actor.forward(tape, p, encodings)?;
        let log_probs = tape.log_softmax_rows(logits)?;
        let mut values = self.critic.forward(tape, p, encodings)?;
        if tape.shape(values).1 != 1 {
            values = tape.slice_cols(values, 0, 1)?;
        }
        Ok(Some(PolicyPass { encodings, log_probs, values }))
    }

    fn inference(&self, seq: &EventSequence) -> Result<Option<(Matrix, Matrix, Matrix)>> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape)?;
        Ok(self.forward(&mut tape, &p, seq)?.map(|pass| {
            (tape.value(pass.encodings).clone(), tape.value(pass.log_probs).clone(), tape.value(pass.values).clone())
        }))
    }

    /// `N x H` encodings; `0 x H` for an empty sequence.
    pub fn encode(&self, seq: &EventSequence) -> Result<Matrix> {
        Ok(self.inference(seq)?.map_or_else(|| Matrix::zeros(0, self.cfg.hidden), |(e, _, _)| e))
    }

    /// `N x 2` keep/remove probabilities.
    pub fn action_probs(&self, seq: &EventSequence) -> Result<Matrix> {
        Ok(self.inference(seq)?.map_or_else(|| Matrix::zeros(0, 2), |(_, lp, _)| lp.map(f64::exp)))
    }

    /// Per-event probability of removal, `π(remove | φ_n)`.
    pub fn outlier_scores(&self, seq: &EventSequence) -> Result<Vec<f64>> {
        let probs = self.action_probs(seq)?;
        Ok((0..probs.rows()).map(|r| probs.get(r, REMOVE)).collect())
    }

    /// Samples (or takes the argmax of) an action per event and returns the
    /// trajectory together with the corrected sequence of kept events.
    pub fn rollout(&self, seq: &EventSequence, rng: &mut RngStream, mode: RolloutMode) -> Result<(Trajectory, EventSequence)> {
        let Some((enc, lp, vals)) = self.inference(seq)? else {
            let traj = Trajectory {
                seq: seq.clone(),
                encodings: Matrix::zeros(0, self.cfg.hidden),
                actions: vec![],
                log_probs: vec![],
                values: vec![],
                rewards: vec![],
                scores: vec![],
            };
            return Ok((traj, seq.clone()));
        };
        let n = seq.len();
        let mut actions = Vec::with_capacity(n);
        let mut log_probs = Vec::with_capacity(n);
        let mut scores = Vec::with_capacity(n);
        for r in 0..n {
            let p_remove = lp.get(r, REMOVE).exp();
            let a = match mode {
                RolloutMode::Sample => {
                    let u: f64 = rng.random();
                    if u < p_remove { REMOVE } else { KEEP }
                }
                RolloutMode::Greedy => {
                    if lp.get(r, REMOVE) > lp.get(r, KEEP) { REMOVE } else { KEEP }
                }
            };
            actions.push(a);
            log_probs.push(lp.get(r, a));
            scores.push(p_remove);
        }
        let corrected = apply_actions(seq, &actions);
        let traj = Trajectory {
            seq: seq.clone(),
            encodings: enc,
            actions,
            log_probs,
            values: vals.as_slice().to_vec(),
            rewards: vec![0.0; n],
            scores,
        };
        Ok((traj, corrected))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let cfg = serde_json::to_value(&self.cfg).expect("config serialises");
        checkpoint::save(dir, "generator", cfg, &self.store)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = checkpoint::read_manifest(dir)?;
        if manifest.kind != "generator" {
            return Err(Error::Checkpoint(format!("{} holds a {}, not a generator", dir.display(), manifest.kind)));
        }
        let cfg: GeneratorConfig = serde_json::from_value(manifest.config.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut gen = Generator::new(cfg, &mut RngStream::new(0, 0));
        checkpoint::load_into(dir, &manifest, &mut gen.store)?;
        Ok(gen)
    }
}

pub(crate) fn copy_clstm(src: &ParamStore, src_cell: &Clstm, dst: &mut ParamStore, dst_cell: &Clstm) -> Result<()> {
    if src_cell.hidden != dst_cell.hidden {
        return Err(Error::Config(format!("cLSTM width {} cannot replace width {}", src_cell.hidden, dst_cell.hidden)));
    }
    for (s, d) in src_cell.ids().into_iter().zip(dst_cell.ids()) {
        *dst.value_mut(d) = src.value(s).clone();
    }
    Ok(())
}

/// Keeps events whose action is [`KEEP`].
pub fn apply_actions(seq: &EventSequence, actions: &[usize]) -> EventSequence {
    let remove: Vec<bool> = actions.iter().map(|&a| a == REMOVE).collect();
    seq.without(&remove)
}

/// Flattened per-event PPO targets for a batch.
#[derive(Clone, Debug, Default)]
pub struct PpoTargets {
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl PpoTargets {
    pub fn from_batch(batch: &[Trajectory], gamma: f64, normalize: bool) -> Self {
        let mut t = PpoTargets::default();
        for traj in batch {
            t.actions.extend_from_slice(&traj.actions);
            t.old_log_probs.extend_from_slice(&traj.log_probs);
            t.returns.extend(traj.returns(gamma));
        }
        if normalize && !t.returns.is_empty() {
            let n = t.returns.len() as f64;
            let mean = t.returns.iter().sum::<f64>() / n;
            let std = (t.returns.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n).sqrt();
            for g in &mut t.returns {
                *g = (*g - mean) / (std + 1e-7);
            }
        }
        let values = batch.iter().flat_map(|traj| traj.values.iter());
        t.advantages = t.returns.iter().zip(values).map(|(g, v)| g - v).collect();
        t
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Tape handles of the PPO objective's parts.
pub struct PpoLoss {
    pub total: Var,
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
    pub ratio: Var,
}

/// Clipped-surrogate loss to minimise:
/// `−mean(min(ρA, clip(ρ,1−ε,1+ε)A)) + c1·mean((G − v)²) − c2·mean(H(π))`.
pub fn ppo_loss(tape: &mut Tape, log_probs: Var, values: Var, targets: &PpoTargets, cfg: &PpoConfig) -> Result<PpoLoss> {
    let n = targets.len();
    if tape.shape(log_probs) != (n, 2) || tape.shape(values) != (n, 1) {
        return Err(Error::Validation(format!(
            "PPO targets cover {n} events but policy/value shapes are {:?}/{:?}",
            tape.shape(log_probs),
            tape.shape(values)
        )));
    }
    let new_lp = tape.gather_cols(log_probs, targets.actions.clone())?;
    let old_lp = tape.constant(Matrix::col_vector(targets.old_log_probs.clone()))?;
    let diff = tape.sub(new_lp, old_lp)?;
    let ratio = tape.exp(diff)?;
    let adv = tape.constant(Matrix::col_vector(targets.advantages.clone()))?;
    let surr1 = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)?;
    let surr2 = tape.mul(clipped, adv)?;
    let surr = tape.minimum(surr1, surr2)?;
    let surr = tape.mean(surr)?;
    let policy = tape.neg(surr)?;

    let ret = tape.constant(Matrix::col_vector(targets.returns.clone()))?;
    let err = tape.sub(ret, values)?;
    let sq = tape.mul(err, err)?;
    let value = tape.mean(sq)?;

    let probs = tape.exp(log_probs)?;
    let plogp = tape.mul(probs, log_probs)?;
    let row_ent = tape.sum_rows(plogp)?;
    let neg_ent = tape.mean(row_ent)?;
    let entropy = tape.neg(neg_ent)?;

    let vterm = tape.scale(value, cfg.value_coef)?;
    let eterm = tape.scale(neg_ent, cfg.entropy_coef)?;
    let total = tape.add(policy, vterm)?;
    let total = tape.add(total, eterm)?;
    Ok(PpoLoss { total, policy, value, entropy, ratio })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PpoStats {
    /// Loss of the last epoch.
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// `max |ρ − 1|` during the first epoch; 0 when nothing changed since rollout.
    pub first_epoch_ratio_dev: f64,
    pub grad_norm: f64,
}

/// Runs `cfg.epochs` full-batch Adam steps on the PPO objective.
///
/// Every trajectory needs its terminal reward; advantages use the critic
/// values recorded at rollout time.
pub fn ppo_update(gen: &mut Generator, opt: &mut Adam, batch: &[Trajectory], cfg: &PpoConfig) -> Result<PpoStats> {
    let batch: Vec<&Trajectory> = batch.iter().filter(|t| !t.is_empty()).collect();
    if batch.is_empty() {
        return Err(Error::Validation("PPO update needs at least one non-empty trajectory".into()));
    }
    let owned: Vec<Trajectory> = batch.iter().map(|t| (*t).clone()).collect();
    let targets = PpoTargets::from_batch(&owned, cfg.gamma, cfg.normalize_returns);
    let mut stats = PpoStats::default();
    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let p = gen.store.bind(&mut tape)?;
        let seqs: Vec<&EventSequence> = batch.iter().map(|t| &t.seq).collect();
        let pass = gen.forward_batch(&mut tape, &p, &seqs)?.expect("non-empty trajectories");
        let (log_probs, values) = (pass.log_probs, pass.values);
        let loss = ppo_loss(&mut tape, log_probs, values, &targets, cfg)?;
        if epoch == 0 {
            stats.first_epoch_ratio_dev = tape.value(loss.ratio).as_slice().iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
        }
        stats.loss = tape.item(loss.total);
        stats.policy_loss = tape.item(loss.policy);
        stats.value_loss = tape.item(loss.value);
        stats.entropy = tape.item(loss.entropy);
        let mut grads = tape.backward(loss.total)?;
        let grads = gen.store.collect_grads(&p, &mut grads);
        stats.grad_norm = gen.store.apply_adam(opt, grads, |r| cfg.lr_for(r), Some(cfg.max_grad_norm));
    }
    Ok(stats)
}
